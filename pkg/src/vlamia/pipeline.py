"""End-to-end drivers shared by the CLI, the demos and the acceptance suite.

All randomness flows from ``RunConfig.seed`` through named substreams, so a
stage can be rerun in isolation and still reproduce its artifact.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from collections.abc import Sequence
from typing import Any

import numpy as np

from . import attacks as A
from . import metrics as M
from .core import (PROMPT_FIXED, PROMPT_ORIGINAL, AccessRegimeViolation, CorpusMetadata,
                   InferenceLog, InferenceRecord, ScoredExample, Trajectory)
from .corpus import (DEFAULT_GOAL_SPREAD, EvalManifest, apply_split, generate_corpus,
                     sample_eval_sets, split_corpus)
from .mitigations import DefenseSpec, parse_defense, run_defended_inference
from .surrogate import (HIDDEN, LEARNING_RATE, ActionTokenizer, Checkpoint, PolicyParams,
                        init_params, observation_stats, train)

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class CorpusConfig:
    tasks: int = 4
    trajs_per_task: int = 50
    horizon: int = 60
    action_dim: int = 7
    sigma_demo: float = 0.1
    sigma_obs: float = 0.01
    goal_spread: float = DEFAULT_GOAL_SPREAD
    bins: int = 256
    split_fraction: float = 0.5


@dataclasses.dataclass
class TrainConfig:
    steps: int = 3000
    lr: float = LEARNING_RATE
    batch: int = 64
    momentum: float = 0.9
    hidden: int = HIDDEN
    dropout_p: float = 0.0
    checkpoint_every: int = 500
    bins: int | None = None


@dataclasses.dataclass
class InferConfig:
    prompt_mode: str = PROMPT_ORIGINAL
    defense: str = "none"
    fields: list[str] = dataclasses.field(default_factory=lambda: list(A.RECORD_FIELDS))


@dataclasses.dataclass
class EvalConfig:
    n_samples: int = 1000
    n_trajs: int = 50
    disjoint: bool = False
    attacks: list[str] = dataclasses.field(default_factory=lambda: [a.value for a in A.AttackName])
    format: str = "text"
    dataset: str = "desk"


@dataclasses.dataclass
class DefendConfig:
    defenses: list[str] = dataclasses.field(default_factory=lambda: [
        "none", "gaussian:0.1", "gaussian:0.2", "gaussian:0.5",
        "round:0.05", "round:0.1", "round:0.25",
        "decode:T=1.1,p=0.95", "decode:T=2.0,p=0.95", "decode:T=3.0,p=0.95",
        "jitter:light", "jitter:medium", "jitter:strong",
        "mcdropout:0.1", "mcdropout:0.2", "mcdropout:0.4"])
    attacks: list[str] = dataclasses.field(default_factory=lambda: ["NLL", "Conf", "ActionL1"])


@dataclasses.dataclass
class AblationConfig:
    bins: list[int] = dataclasses.field(default_factory=lambda: [64, 256, 512])
    attacks: list[str] = dataclasses.field(default_factory=lambda: ["NLL", "Conf", "ActionL1"])
    step_attack: str = "ActionL1"


_GROUPS = {"corpus": CorpusConfig, "train": TrainConfig, "infer": InferConfig,
           "eval": EvalConfig, "defend": DefendConfig, "ablation": AblationConfig}


@dataclasses.dataclass
class RunConfig:
    seed: int = 7
    workers: int = 1
    corpus: CorpusConfig = dataclasses.field(default_factory=CorpusConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    infer: InferConfig = dataclasses.field(default_factory=InferConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    defend: DefendConfig = dataclasses.field(default_factory=DefendConfig)
    ablation: AblationConfig = dataclasses.field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        cfg = cls()
        for key, value in obj.items():
            if key in _GROUPS:
                if not isinstance(value, dict):
                    raise ValueError(f"config group {key!r} must be an object")
                group = getattr(cfg, key)
                for name, v in value.items():
                    _set_field(group, f"{key}.{name}", name, v)
            elif key in ("seed", "workers"):
                setattr(cfg, key, int(value))
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cfg

    def override(self, assignments: Sequence[str]) -> RunConfig:
        """Apply ``group.field=value`` strings; values parse as JSON, else as strings."""
        import json
        cfg = RunConfig.from_dict(self.to_dict())
        for item in assignments:
            path, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = path.strip().split(".")
            if len(parts) == 1 and parts[0] in ("seed", "workers"):
                setattr(cfg, parts[0], int(value))
            elif len(parts) == 2 and parts[0] in _GROUPS:
                _set_field(getattr(cfg, parts[0]), path, parts[1], value)
            else:
                raise ValueError(f"unknown config key {path!r}")
        return cfg


def _set_field(group, path: str, name: str, value: Any) -> None:
    fields = {f.name: f for f in dataclasses.fields(group)}
    if name not in fields:
        raise ValueError(f"unknown config key {path!r}")
    current = getattr(group, name)
    if isinstance(current, bool):
        value = bool(value)
    elif isinstance(current, int) and value is not None:
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    elif isinstance(current, list) and isinstance(value, str):
        value = [v.strip() for v in value.split(";") if v.strip()]
    setattr(group, name, value)


# --------------------------------------------------------------------------
# stages

def build_corpus(cfg: RunConfig) -> tuple[CorpusMetadata, list[Trajectory]]:
    """Generate the corpus and apply the stratified member split."""
    c = cfg.corpus
    meta, trajs = generate_corpus(c.tasks, c.trajs_per_task, c.action_dim, c.horizon,
                                  cfg.seed, c.sigma_demo, c.sigma_obs, c.bins, c.goal_spread)
    return meta, apply_split(trajs, split_corpus(trajs, c.split_fraction, cfg.seed))


def build_manifest(cfg: RunConfig, trajs: Sequence[Trajectory]) -> EvalManifest:
    e = cfg.eval
    return sample_eval_sets(trajs, e.n_samples, e.n_trajs, cfg.seed, e.disjoint)


def train_policy(cfg: RunConfig, meta: CorpusMetadata, trajs: Sequence[Trajectory],
                 bins: int | None = None) -> tuple[list[Checkpoint], ActionTokenizer]:
    t = cfg.train
    bins = bins or t.bins or meta.bin_count
    members = [tr for tr in trajs if tr.member]
    mean, scale = observation_stats(members)
    n_tasks = max(tr.instruction_id for tr in trajs) + 1
    params = init_params(mean.size, n_tasks, meta.action_dim, bins, hidden=t.hidden,
                         seed=cfg.seed, dropout_p=t.dropout_p, obs_mean=mean, obs_scale=scale)
    tokenizer = ActionTokenizer.from_metadata(meta, bins)
    ckpts = train(params, trajs, steps=t.steps, lr=t.lr, batch_size=t.batch,
                  momentum=t.momentum, seed=cfg.seed, checkpoint_every=t.checkpoint_every,
                  tokenizer=tokenizer)
    return ckpts, tokenizer


def infer(cfg: RunConfig, params: PolicyParams, trajs: Sequence[Trajectory],
          keys: Sequence[tuple[str, int]], tokenizer: ActionTokenizer,
          prompt_mode: str | None = None, defense: str | DefenseSpec | None = None,
          model_tag: str = "") -> InferenceLog:
    spec = defense if isinstance(defense, DefenseSpec) else parse_defense(
        defense or cfg.infer.defense, seed=cfg.seed)
    log = run_defended_inference(params, trajs, keys, spec, tokenizer,
                                 prompt_mode or cfg.infer.prompt_mode, model_tag, cfg.workers)
    dropped = [f for f in A.RECORD_FIELDS if f not in cfg.infer.fields]
    if dropped:
        log = InferenceLog({**log.header, "withheld": dropped},
                           A.strip_fields(log.records, dropped))
    return log


def score_attacks(attacks: Sequence[str], trajs: Sequence[Trajectory],
                  logs: dict[str, Sequence[InferenceRecord]], manifest: EvalManifest,
                  workers: int = 1, skip_unavailable: bool = False
                  ) -> dict[str, list[ScoredExample]]:
    """Run each attack against the log of its prompt mode.

    ``logs`` maps prompt mode to records.  With ``skip_unavailable`` attacks
    whose log is absent or withholds a required field are skipped instead of
    raising.
    """
    out = {}
    for name in attacks:
        attack = A.AttackName(name)
        records = logs.get(A.REGIMES[attack].prompt)
        try:
            if records is None:
                raise AccessRegimeViolation(f"{attack} needs a "
                                            f"{A.REGIMES[attack].prompt}-prompt log")
            out[attack.value] = A.run_attack(attack, trajs, records, manifest, workers)
        except AccessRegimeViolation:
            if not skip_unavailable:
                raise
            logger.info("skipping %s: log does not expose its signals", attack)
    return out


def summaries(scored: dict[str, list[ScoredExample]], dataset: str = "desk"
              ) -> list[M.RocSummary]:
    return [M.summarize(s, name, dataset) for name, s in scored.items()]


def heldout_utility(records: Sequence[InferenceRecord], trajs: Sequence[Trajectory]) -> float:
    """Mean L1 action error over the non-member records of a log (utility proxy)."""
    by_id = {t.trajectory_id: t for t in trajs}
    errs = [np.abs(r.generated_action - by_id[r.trajectory_id].samples[r.step_index].action).sum()
            for r in records if not by_id[r.trajectory_id].member]
    if not errs:
        raise ValueError("no non-member records to measure utility on")
    return float(np.mean(errs))


@dataclasses.dataclass
class PipelineResult:
    meta: CorpusMetadata
    trajectories: list[Trajectory]
    manifest: EvalManifest
    checkpoints: list[Checkpoint]
    tokenizer: ActionTokenizer
    logs: dict[str, InferenceLog]
    scores: dict[str, list[ScoredExample]]
    report: str


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """Corpus, split, manifest, training, inference under both prompts, every attack."""
    meta, trajs = build_corpus(cfg)
    manifest = build_manifest(cfg, trajs)
    ckpts, tok = train_policy(cfg, meta, trajs)
    final = ckpts[-1]
    keys = manifest.query_keys(trajs)
    logs = {mode: infer(cfg, final.params, trajs, keys, tok, prompt_mode=mode,
                        model_tag=f"step{final.step}")
            for mode in (PROMPT_ORIGINAL, PROMPT_FIXED)}
    scores = score_attacks(cfg.eval.attacks, trajs,
                           {m: lg.records for m, lg in logs.items()}, manifest,
                           cfg.workers, skip_unavailable=True)
    report = M.build_report(summaries(scores, cfg.eval.dataset), cfg.eval.format)
    return PipelineResult(meta, trajs, manifest, ckpts, tok, logs, scores, report)


# --------------------------------------------------------------------------
# sweeps

def format_table(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """CSV with ``repr`` floats, so tables are exact and diffable."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                         for v in row])
    return buf.getvalue()


BINS_COLUMNS = ("bins", "attack", "auc", "tpr@0.1%", "tpr@1%", "tpr@5%", "train_ce",
                "heldout_l1")
STEPS_COLUMNS = ("step", "attack", "auc", "train_ce", "heldout_l1")
DEFENSE_COLUMNS = ("defense", "attack", "auc", "tpr@0.1%", "tpr@1%", "tpr@5%", "utility_l1")


def _metric_row(s: M.RocSummary) -> list:
    return [s.auc] + [s.tpr_at[f] for f in M.FPR_GRID]


def sample_auc_for(attacks: Sequence[str], ckpt: Checkpoint, cfg: RunConfig,
                   trajs: Sequence[Trajectory], manifest: EvalManifest,
                   tokenizer: ActionTokenizer) -> dict[str, M.RocSummary]:
    keys = manifest.sample_units
    logs = {}
    for name in attacks:
        mode = A.REGIMES[A.AttackName(name)].prompt
        if mode not in logs:
            logs[mode] = infer(cfg, ckpt.params, trajs, keys, tokenizer, prompt_mode=mode,
                               defense="none").records
    scored = score_attacks(attacks, trajs, logs, manifest, cfg.workers)
    return {name: M.summarize(s, name) for name, s in scored.items()}


def bins_ablation(cfg: RunConfig) -> tuple[list[list], dict[int, list[Checkpoint]]]:
    """Matched runs that differ only in the number of action bins."""
    meta, trajs = build_corpus(cfg)
    manifest = build_manifest(cfg, trajs)
    rows, runs = [], {}
    for bins in cfg.ablation.bins:
        ckpts, tok = train_policy(cfg, meta, trajs, bins=bins)
        runs[bins] = ckpts
        final = ckpts[-1]
        for name, s in sample_auc_for(cfg.ablation.attacks, final, cfg, trajs, manifest,
                                      tok).items():
            rows.append([bins, name, *_metric_row(s), final.train_loss, final.heldout_error])
    return rows, runs


def steps_ablation(cfg: RunConfig, checkpoints: Sequence[Checkpoint],
                   trajs: Sequence[Trajectory], manifest: EvalManifest,
                   tokenizer: ActionTokenizer) -> list[list]:
    """Leakage and utility at every checkpoint of one training run."""
    rows = []
    for ck in checkpoints:
        s = sample_auc_for([cfg.ablation.step_attack], ck, cfg, trajs, manifest,
                           tokenizer)[cfg.ablation.step_attack]
        rows.append([ck.step, s.attack_name, s.auc, ck.train_loss, ck.heldout_error])
    return rows


def defense_sweep(cfg: RunConfig, params: PolicyParams, trajs: Sequence[Trajectory],
                  manifest: EvalManifest, tokenizer: ActionTokenizer,
                  defenses: Sequence[str] | None = None) -> list[list]:
    """Sample-level leakage and held-out utility under each defense."""
    rows = []
    keys = manifest.sample_units
    for text in defenses or cfg.defend.defenses:
        spec = parse_defense(text, seed=cfg.seed)
        logs = {}
        for name in cfg.defend.attacks:
            mode = A.REGIMES[A.AttackName(name)].prompt
            if mode not in logs:
                logs[mode] = infer(cfg, params, trajs, keys, tokenizer, prompt_mode=mode,
                                   defense=spec).records
        utility = heldout_utility(logs.get(PROMPT_ORIGINAL) or next(iter(logs.values())),
                                  trajs)
        scored = score_attacks(cfg.defend.attacks, trajs, logs, manifest, cfg.workers)
        for name, s in scored.items():
            rows.append([spec.label, name, *_metric_row(M.summarize(s, name)), utility])
    return rows
