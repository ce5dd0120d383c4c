"""``vlamia`` command line: config-driven audit pipeline.

Every subcommand resolves a :class:`RunConfig` from (lowest to highest
priority) built-in defaults, a JSON config file (``--config`` or the
``VLAMIA_CONFIG`` environment variable), ``--set group.key=value`` overrides,
and dedicated flags.  Each run writes a manifest with the resolved config and
the sha256 of every input and output; ``vlamia replay`` re-executes it.

Exit codes: 0 success, 2 usage, 3 schema, 4 access regime, 5 numeric
failure, 1 replay mismatch.  Failures print one line ``vlamia: error CLASS:
message`` on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import attacks as A
from . import metrics as M
from . import pipeline as P
from .core import (PROMPT_MODES, AccessRegimeViolation, NonFiniteScore, NumericFailure,
                   SchemaError, VlaMiaError, decide, load_inference_log, read_corpus,
                   write_corpus, write_inference_log)
from .corpus import read_manifest, write_manifest
from .surrogate import ActionTokenizer, load_checkpoint, save_checkpoint

CONFIG_ENV = "VLAMIA_CONFIG"
RUN_SCHEMA = "run/1"

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_SCHEMA, EXIT_REGIME, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


class ReplayMismatch(VlaMiaError):
    """A replayed run produced different artifacts."""


def _error_class(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, ReplayMismatch):
        return "REPLAY_MISMATCH", EXIT_MISMATCH
    if isinstance(exc, SchemaError):
        return "SCHEMA", EXIT_SCHEMA
    if isinstance(exc, AccessRegimeViolation):
        return "ACCESS_REGIME", EXIT_REGIME
    if isinstance(exc, (NumericFailure, NonFiniteScore)):
        return "NUMERIC", EXIT_NUMERIC
    if isinstance(exc, FileNotFoundError):
        return "MISSING_FILE", EXIT_USAGE
    if isinstance(exc, json.JSONDecodeError):
        return "SCHEMA", EXIT_SCHEMA
    return "USAGE", EXIT_USAGE


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --------------------------------------------------------------------------
# subcommands; each returns (input paths, output paths)

def cmd_gen(args, cfg: P.RunConfig):
    meta, trajs = P.build_corpus(cfg)
    write_corpus(meta, trajs, args.corpus)
    outputs = [args.corpus]
    if args.manifest:
        write_manifest(P.build_manifest(cfg, trajs), args.manifest)
        outputs.append(args.manifest)
    return [], outputs


def cmd_train(args, cfg: P.RunConfig):
    meta, trajs = read_corpus(args.corpus)
    ckpts, _ = P.train_policy(cfg, meta, trajs)
    out = Path(args.out_dir)
    outputs = []
    for ck in ckpts:
        path = out / f"ckpt-step{ck.step:06d}.ckpt"
        save_checkpoint(ck, path)
        outputs.append(str(path))
    summary = out / "checkpoints.csv"
    summary.write_text(P.format_table(("step", "train_ce", "heldout_l1", "path"),
                                      [[ck.step, ck.train_loss, ck.heldout_error,
                                        Path(p).name] for ck, p in zip(ckpts, outputs)]))
    return [args.corpus], outputs + [str(summary)]


def _load_model(args, meta):
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.params.action_dim != meta.action_dim:
        raise SchemaError(f"checkpoint has action_dim {ckpt.params.action_dim}, "
                          f"corpus has {meta.action_dim}")
    return ckpt, ActionTokenizer.from_metadata(meta, ckpt.params.bins)


def cmd_infer(args, cfg: P.RunConfig):
    meta, trajs = read_corpus(args.corpus)
    manifest = read_manifest(args.manifest)
    ckpt, tok = _load_model(args, meta)
    log = P.infer(cfg, ckpt.params, trajs, manifest.query_keys(trajs), tok,
                  model_tag=Path(args.checkpoint).stem)
    write_inference_log(log.records, args.out, log.header)
    return [args.corpus, args.manifest, args.checkpoint], [args.out]


def cmd_attack(args, cfg: P.RunConfig):
    _, trajs = read_corpus(args.corpus)
    manifest = read_manifest(args.manifest)
    logs = {}
    for path in args.log:
        log = load_inference_log(path)
        modes = {r.prompt_mode for r in log.records} or {log.header.get("prompt_mode")}
        if len(modes) != 1:
            raise SchemaError(f"{path}: mixed prompt modes {sorted(modes)}")
        mode = modes.pop()
        if mode in logs:
            raise SchemaError(f"two logs given for prompt mode {mode!r}")
        logs[mode] = log.records
    wanted = args.attack or cfg.eval.attacks
    everything = wanted == ["all"]
    names = [a.value for a in A.AttackName] if everything else wanted
    scored = P.score_attacks(names, trajs, logs, manifest, cfg.workers,
                             skip_unavailable=everything)
    A.write_scores([s for name in names if name in scored for s in scored[name]], args.out)
    return [args.corpus, args.manifest, *args.log], [args.out]


def cmd_eval(args, cfg: P.RunConfig):
    grouped: dict[str, list] = {}
    for path in args.scores:
        for s in A.read_scores(path):
            grouped.setdefault(s.attack_name, []).append(s)
    if not grouped:
        raise SchemaError("score files contain no records")
    sums = P.summaries(grouped, args.dataset or cfg.eval.dataset)
    report = M.build_report(sums, args.format or cfg.eval.format)
    if args.gamma is not None:
        report += decision_summary(grouped, args.gamma)
    outputs = []
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report)
        outputs.append(args.out)
    else:
        sys.stdout.write(report)
    if args.roc_dir:
        for name, scored in grouped.items():
            path = Path(args.roc_dir) / f"roc-{name}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(M.roc_points_csv(scored))
            outputs.append(str(path))
    return list(args.scores), outputs


def decision_summary(grouped: dict[str, list], gamma: float) -> str:
    """Counts of the binary rule ``score >= gamma`` per attack (no default threshold)."""
    lines = [f"Decisions at gamma={gamma!r}:"]
    for name, scored in grouped.items():
        flagged = [decide(s.score, gamma) for s in scored]
        tp = sum(f and s.member for f, s in zip(flagged, scored))
        fp = sum(f and not s.member for f, s in zip(flagged, scored))
        n_pos = sum(s.member for s in scored)
        n_neg = len(scored) - n_pos
        lines.append(f"  {name}: flagged {sum(flagged)}/{len(scored)}, "
                     f"TPR {tp / max(n_pos, 1):.4f}, FPR {fp / max(n_neg, 1):.4f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args, cfg: P.RunConfig):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bins_rows, runs = P.bins_ablation(cfg)
    (out / "bins.csv").write_text(P.format_table(P.BINS_COLUMNS, bins_rows))
    meta, trajs = P.build_corpus(cfg)
    manifest = P.build_manifest(cfg, trajs)
    base = cfg.train.bins or meta.bin_count
    if base in runs:
        ckpts = runs[base]
        tok = ActionTokenizer.from_metadata(meta, base)
    else:
        ckpts, tok = P.train_policy(cfg, meta, trajs, bins=base)
    steps_rows = P.steps_ablation(cfg, ckpts, trajs, manifest, tok)
    (out / "steps.csv").write_text(P.format_table(P.STEPS_COLUMNS, steps_rows))
    return [], [str(out / "bins.csv"), str(out / "steps.csv")]


def cmd_defend_sweep(args, cfg: P.RunConfig):
    meta, trajs = read_corpus(args.corpus)
    manifest = read_manifest(args.manifest)
    ckpt, tok = _load_model(args, meta)
    rows = P.defense_sweep(cfg, ckpt.params, trajs, manifest, tok, args.defense or None)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(P.format_table(P.DEFENSE_COLUMNS, rows))
    return [args.corpus, args.manifest, args.checkpoint], [args.out]


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "attack": cmd_attack,
            "eval": cmd_eval, "ablate": cmd_ablate, "defend-sweep": cmd_defend_sweep}


# --------------------------------------------------------------------------
# config resolution

def _flag_overrides(args) -> list[str]:
    mapping = {"seed": "seed", "workers": "workers", "bins": "train.bins",
               "steps": "train.steps", "lr": "train.lr", "batch": "train.batch",
               "dropout_p": "train.dropout_p", "checkpoint_every": "train.checkpoint_every",
               "prompt_mode": "infer.prompt_mode", "defense": "infer.defense",
               "n_samples": "eval.n_samples", "n_trajs": "eval.n_trajs"}
    out = []
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        # defend-sweep reuses --defense as a repeatable list of sweep entries
        if value is not None and not (attr == "defense" and isinstance(value, list)):
            out.append(f"{key}={json.dumps(value)}")
    if getattr(args, "fields", None):
        out.append(f"infer.fields={json.dumps(args.fields.split(','))}")
    return out


def resolve_config(args) -> P.RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = P.RunConfig()
    if path:
        with open(path, encoding="utf-8") as f:
            cfg = P.RunConfig.from_dict(json.load(f))
    return cfg.override(list(args.set or []) + _flag_overrides(args))


def _manifest_path(args, outputs: list[str]) -> Path | None:
    if args.run_manifest == "-":
        return None
    if args.run_manifest:
        return Path(args.run_manifest)
    if not outputs:
        return None
    first = Path(outputs[0])
    return first.parent / (first.name + ".run.json")


def _portable_args(args) -> dict:
    skip = {"config", "set", "run_manifest", "func", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def execute(command: str, args, cfg: P.RunConfig) -> dict:
    inputs, outputs = COMMANDS[command](args, cfg)
    record = {"schema": RUN_SCHEMA, "version": __version__, "command": command,
              "args": _portable_args(args), "config": cfg.to_dict(),
              "inputs": {p: sha256(p) for p in inputs},
              "outputs": {p: sha256(p) for p in outputs}}
    path = _manifest_path(args, outputs)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def replay(path: str) -> dict:
    """Re-run a recorded command with its resolved config and compare hashes."""
    with open(path, encoding="utf-8") as f:
        record = json.load(f)
    if record.get("schema") != RUN_SCHEMA:
        raise SchemaError(f"{path}: not a {RUN_SCHEMA} run manifest")
    for p, digest in record["inputs"].items():
        if sha256(p) != digest:
            raise ReplayMismatch(f"input {p} changed since the recorded run")
    args = argparse.Namespace(**record["args"], config=None, set=None, run_manifest="-")
    cfg = P.RunConfig.from_dict(record["config"])
    fresh = execute(record["command"], args, cfg)
    diff = sorted(p for p, d in record["outputs"].items() if fresh["outputs"].get(p) != d)
    if diff:
        raise ReplayMismatch(f"replayed outputs differ: {', '.join(diff)}")
    return fresh


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlamia", description=(
        "Membership-inference auditing for tokenized-action policies."))
    parser.add_argument("--version", action="version", version=f"vlamia {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--set", action="append", metavar="GROUP.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="parallel workers (outputs unchanged)")
    common.add_argument("--run-manifest", help="where to write the run manifest "
                        "('-' to skip; default: next to the first output)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen", parents=[common], help="generate and split a corpus")
    p.add_argument("--corpus", required=True, help="output corpus file")
    p.add_argument("--manifest", help="also write an evaluation manifest here")
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--n-trajs", type=int, dest="n_trajs")

    p = sub.add_parser("train", parents=[common], help="train the surrogate policy")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bins", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--dropout-p", type=float, dest="dropout_p")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")

    p = sub.add_parser("infer", parents=[common], help="query a checkpoint, write a log")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompt-mode", choices=PROMPT_MODES, dest="prompt_mode")
    p.add_argument("--defense", help="e.g. gaussian:0.2, round:0.1, decode:T=2.0,p=0.95, "
                   "jitter:light, mcdropout:0.2")
    p.add_argument("--fields", help="comma-separated record fields to expose "
                   f"(default: {','.join(A.RECORD_FIELDS)})")

    p = sub.add_parser("attack", parents=[common], help="score units with attacks")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--log", action="append", required=True,
                   help="inference log; give one per prompt mode")
    p.add_argument("--attack", action="append", help="attack name or 'all'; repeatable")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="ROC/AUC report from score files")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--format", choices=("csv", "text", "markdown"))
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--roc-dir", help="also write ROC points per attack here")
    p.add_argument("--gamma", type=float,
                   help="also report binary decisions score >= GAMMA per attack")

    p = sub.add_parser("ablate", parents=[common], help="bins and training-step sweeps")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")

    p = sub.add_parser("defend-sweep", parents=[common], help="leakage/utility per defense")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--defense", action="append", help="defense to sweep; repeatable")

    p = sub.add_parser("replay", help="re-execute a run manifest and verify its outputs")
    p.add_argument("run_manifest_path")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            replay(args.run_manifest_path)
        else:
            execute(args.command, args, resolve_config(args))
    except (VlaMiaError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        name, code = _error_class(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"vlamia: error {name}: {message}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
