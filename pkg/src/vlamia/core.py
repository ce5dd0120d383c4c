"""Domain model, membership labels, and the NDJSON record formats.

Every file the toolkit reads or writes is newline-delimited JSON with one
metadata header line followed by one record per line.  Two schemas live here:

* ``corpus/1``   -- transition samples with ground-truth actions and labels.
* ``inferlog/1`` -- per-timestep model outputs, never carrying labels.
"""
from __future__ import annotations

import base64
import dataclasses
import json
import logging
import math
import zlib
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any, Union

import numpy as np

logger = logging.getLogger(__name__)

CORPUS_SCHEMA = "corpus/1"
INFERLOG_SCHEMA = "inferlog/1"

PROMPT_ORIGINAL = "original"
PROMPT_FIXED = "fixed"
PROMPT_MODES = (PROMPT_ORIGINAL, PROMPT_FIXED)

# Log-probabilities are floored here before any averaging.
LOGPROB_FLOOR = math.log(1e-12)


class VlaMiaError(Exception):
    """Base class for every error raised by this package."""


class EmptyTrajectory(VlaMiaError):
    pass


class NonFiniteScore(VlaMiaError):
    pass


class SchemaError(VlaMiaError):
    """A file does not match the schema it claims (or is expected) to have."""


class MissingHeader(SchemaError):
    pass


class DuplicateRecord(SchemaError):
    pass


class AccessRegimeViolation(VlaMiaError):
    """An attack asked for a signal its access regime does not provide."""


class PromptModeMismatch(AccessRegimeViolation):
    pass


class MissingRecord(SchemaError):
    """An evaluation unit has no matching inference record."""


class TrajectoryTooShort(VlaMiaError):
    pass


class DegenerateEvaluation(VlaMiaError):
    pass


class InsufficientPopulation(VlaMiaError):
    pass


class NumericFailure(VlaMiaError):
    pass


def substream(seed: int, name: str, *keys: int | str) -> np.random.Generator:
    """Independent generator for a named stream under a root seed.

    Keys may be ints or strings (hashed with crc32), so draws for a given unit
    do not depend on the order in which units are processed.
    """
    words = [zlib.crc32(name.encode())]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=words)))


def _frozen_array(values: Any, ndim: int | None = None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclasses.dataclass(frozen=True, eq=False)
class VectorObs:
    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.values, ndim=1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("observation contains non-finite values")
        object.__setattr__(self, "values", arr)

    def __eq__(self, other):
        return isinstance(other, VectorObs) and np.array_equal(self.values, other.values)

    def to_json(self) -> dict:
        return {"kind": "vector", "values": self.values.tolist()}


@dataclasses.dataclass(frozen=True, eq=False)
class PixelObs:
    """A raw ``(height, width, channels)`` grid with values clipped to [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"pixel observation must be HxWxC, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("observation contains non-finite values")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        return isinstance(other, PixelObs) and np.array_equal(self.pixels, other.pixels)

    def to_json(self) -> dict:
        return {"kind": "pixel", "shape": list(self.pixels.shape),
                "values": self.pixels.ravel().tolist()}


Observation = Union[VectorObs, PixelObs]


def observation_from_json(obj: dict) -> Observation:
    kind = obj.get("kind")
    if kind == "vector":
        return VectorObs(obj["values"])
    if kind == "pixel":
        return PixelObs(np.asarray(obj["values"], dtype=np.float64).reshape(obj["shape"]))
    raise SchemaError(f"unknown observation kind {kind!r}")


@dataclasses.dataclass(frozen=True, eq=False)
class TransitionSample:
    observation: Observation
    instruction_id: int
    action: np.ndarray
    step_index: int

    def __post_init__(self):
        action = _frozen_array(self.action, ndim=1)
        if action.size < 1 or not np.all(np.isfinite(action)):
            raise ValueError("action must be a non-empty finite vector")
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")
        object.__setattr__(self, "action", action)

    def __eq__(self, other):
        return (isinstance(other, TransitionSample)
                and self.observation == other.observation
                and self.instruction_id == other.instruction_id
                and self.step_index == other.step_index
                and np.array_equal(self.action, other.action))


@dataclasses.dataclass(frozen=True)
class Trajectory:
    trajectory_id: str
    samples: tuple[TransitionSample, ...]
    instruction_id: int
    member: bool

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise EmptyTrajectory(f"trajectory {self.trajectory_id} has no samples")
        for t, s in enumerate(samples):
            if s.step_index != t:
                raise SchemaError(
                    f"trajectory {self.trajectory_id}: step {s.step_index} at position {t}")
            if s.instruction_id != self.instruction_id:
                raise SchemaError(f"trajectory {self.trajectory_id} mixes instructions")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    def actions(self) -> np.ndarray:
        return np.stack([s.action for s in self.samples])


@dataclasses.dataclass(frozen=True)
class CorpusMetadata:
    action_dim: int
    bin_count: int
    action_bounds: tuple[tuple[float, float], ...]
    vocab_size: int
    seed: int
    schema: str = CORPUS_SCHEMA
    generator: dict | None = None

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.action_bounds)
        object.__setattr__(self, "action_bounds", bounds)
        if self.action_dim < 1:
            raise ValueError("action_dim must be >= 1")
        if self.bin_count < 2:
            raise ValueError("bin_count must be >= 2")
        if len(bounds) != self.action_dim:
            raise ValueError("need one (lo, hi) pair per action dimension")
        if any(not lo < hi for lo, hi in bounds):
            raise ValueError("action bounds need lo < hi")
        if self.vocab_size < self.bin_count:
            raise ValueError("vocab_size must be >= bin_count")

    def header(self) -> dict:
        out = {"schema": self.schema, "d": self.action_dim, "B": self.bin_count,
               "bounds": [list(b) for b in self.action_bounds],
               "V": self.vocab_size, "seed": self.seed}
        if self.generator is not None:
            out["generator"] = self.generator
        return out


@dataclasses.dataclass(frozen=True, eq=False)
class InferenceRecord:
    """Model outputs for one queried transition.

    ``token_logprob_rows`` holds one full log-probability vector per action-token
    position, conditioned on the *generated* prefix.  ``gt_token_logprobs`` holds
    the teacher-forced log-probability of each ground-truth token.  Either may
    be ``None`` when the serving interface does not expose it.
    """

    trajectory_id: str
    step_index: int
    generated_action: np.ndarray | None
    token_logprob_rows: np.ndarray | None = None
    gt_token_logprobs: np.ndarray | None = None
    prompt_mode: str = PROMPT_ORIGINAL

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise SchemaError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.generated_action is not None:
            ga = _frozen_array(self.generated_action, ndim=1)
            if not np.all(np.isfinite(ga)):
                raise SchemaError("generated_action contains non-finite values")
            object.__setattr__(self, "generated_action", ga)
        if self.token_logprob_rows is not None:
            rows = _frozen_array(self.token_logprob_rows, ndim=2)
            object.__setattr__(self, "token_logprob_rows", rows)
        if self.gt_token_logprobs is not None:
            gt = _frozen_array(self.gt_token_logprobs, ndim=1)
            if np.any(gt > 0):
                raise SchemaError("teacher-forced log-probabilities must be <= 0")
            object.__setattr__(self, "gt_token_logprobs", gt)

    @property
    def key(self) -> tuple[str, int]:
        return (self.trajectory_id, self.step_index)

    def check_normalized(self, atol: float = 1e-6) -> None:
        if self.token_logprob_rows is None:
            return
        with np.errstate(under="ignore"):
            sums = np.exp(self.token_logprob_rows).sum(axis=1)
        if not np.all(np.abs(sums - 1.0) <= atol):
            raise SchemaError(
                f"record {self.key}: probability rows do not sum to 1 (max dev "
                f"{np.max(np.abs(sums - 1.0)):.3g})")

    def replace(self, **changes) -> InferenceRecord:
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, InferenceRecord):
            return NotImplemented
        return (self.key == other.key and self.prompt_mode == other.prompt_mode
                and _opt_equal(self.generated_action, other.generated_action)
                and _opt_equal(self.token_logprob_rows, other.token_logprob_rows)
                and _opt_equal(self.gt_token_logprobs, other.gt_token_logprobs))

    def to_json(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "step_index": self.step_index,
            "prompt_mode": self.prompt_mode,
            "generated_action": _opt_list(self.generated_action),
            "token_logprob_rows": encode_rows(self.token_logprob_rows),
            "gt_token_logprobs": _opt_list(self.gt_token_logprobs),
        }


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


def _opt_list(a):
    return None if a is None else a.tolist()


def encode_rows(rows: np.ndarray | None) -> dict | None:
    """Probability rows as base64 little-endian float64 (lossless, compact)."""
    if rows is None:
        return None
    data = np.ascontiguousarray(rows, dtype="<f8").tobytes()
    return {"shape": list(rows.shape), "f8": base64.b64encode(data).decode("ascii")}


def decode_rows(obj) -> np.ndarray | None:
    """Inverse of :func:`encode_rows`; nested lists are accepted as well."""
    if obj is None or isinstance(obj, list):
        return obj
    try:
        flat = np.frombuffer(base64.b64decode(obj["f8"], validate=True), dtype="<f8")
        return flat.reshape(obj["shape"]).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed token_logprob_rows ({exc})") from None


@dataclasses.dataclass(frozen=True)
class ScoredExample:
    unit_id: str
    attack_name: str
    score: float
    member: bool

    def to_json(self) -> dict:
        return {"unit_id": self.unit_id, "attack": self.attack_name,
                "score": self.score, "member": self.member}


def sample_unit_id(trajectory_id: str, step_index: int) -> str:
    # Zero padding keeps lexical order equal to step order.
    return f"{trajectory_id}@{step_index:05d}"


def label_trajectory(member_flags: Sequence[bool], rho: float = 1.0) -> bool:
    """Trajectory membership: the member fraction of its samples reaches ``rho``."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    flags = list(member_flags)
    if not flags:
        raise EmptyTrajectory("cannot label an empty trajectory")
    return sum(bool(f) for f in flags) / len(flags) >= rho


def decide(score: float, gamma: float) -> bool:
    """Binary membership decision ``score >= gamma``."""
    if math.isnan(score):
        raise NonFiniteScore("score is NaN")
    return score >= gamma


# --------------------------------------------------------------------------
# NDJSON plumbing

def _dumps(obj: Any) -> str:
    # repr-based float output is the shortest string that round-trips exactly.
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _read_lines(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out


def write_ndjson(path: str | Path, header: dict | None, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        if header is not None:
            f.write(_dumps(header) + "\n")
        for row in rows:
            f.write(_dumps(row) + "\n")


def _split_header(lines: list[dict], schema: str, path) -> tuple[dict, list[dict]]:
    head = lines[0]
    if "schema" not in head:
        raise MissingHeader(f"{path}: first line is not a metadata header")
    if head["schema"] != schema:
        raise SchemaError(f"{path}: schema {head['schema']!r}, expected {schema!r}")
    return head, lines[1:]


_CORPUS_HEADER_KEYS = {"schema", "d", "B", "bounds", "V", "seed", "generator"}
_CORPUS_ROW_KEYS = {"trajectory_id", "step_index", "instruction_id", "member",
                    "observation", "action"}


def write_corpus(meta: CorpusMetadata, trajectories: Sequence[Trajectory],
                 path: str | Path) -> None:
    def rows():
        for traj in trajectories:
            for s in traj.samples:
                yield {"trajectory_id": traj.trajectory_id, "step_index": s.step_index,
                       "instruction_id": s.instruction_id, "member": traj.member,
                       "observation": s.observation.to_json(),
                       "action": s.action.tolist()}

    write_ndjson(path, meta.header(), rows())


def read_corpus(path: str | Path, strict: bool = True
                ) -> tuple[CorpusMetadata, list[Trajectory]]:
    """Load a corpus file.

    In strict mode unknown keys and actions whose length disagrees with the
    header raise :class:`SchemaError`; in lenient mode unknown keys are ignored
    and trajectories holding a malformed sample are skipped with a counted
    warning (a gap would break step contiguity).
    """
    lines = _read_lines(path)
    if not lines:
        raise MissingHeader(f"{path}: empty corpus file has no metadata header")
    head, rows = _split_header(lines, CORPUS_SCHEMA, path)
    unknown = set(head) - _CORPUS_HEADER_KEYS
    if unknown and strict:
        raise SchemaError(f"{path}: unknown header fields {sorted(unknown)}")
    try:
        meta = CorpusMetadata(action_dim=head["d"], bin_count=head["B"],
                              action_bounds=head["bounds"], vocab_size=head["V"],
                              seed=head["seed"], generator=head.get("generator"))
    except KeyError as exc:
        raise SchemaError(f"{path}: header is missing {exc}") from None

    grouped: dict[str, list[dict]] = {}
    seen: set[tuple[str, int]] = set()
    bad: set[str] = set()
    skipped = 0
    for row in rows:
        extra = set(row) - _CORPUS_ROW_KEYS
        if extra and strict:
            raise SchemaError(f"{path}: unknown record fields {sorted(extra)}")
        missing = _CORPUS_ROW_KEYS - set(row)
        if missing:
            if strict:
                raise SchemaError(f"{path}: record is missing fields {sorted(missing)}")
            skipped += 1
            if "trajectory_id" in row:
                bad.add(row["trajectory_id"])
            continue
        key = (row["trajectory_id"], row["step_index"])
        if key in seen:
            raise DuplicateRecord(f"{path}: duplicate sample {key}")
        seen.add(key)
        if len(row["action"]) != meta.action_dim:
            if strict:
                raise SchemaError(f"{path}: sample {key} has action length "
                                  f"{len(row['action'])}, header says {meta.action_dim}")
            skipped += 1
            bad.add(row["trajectory_id"])
            continue
        grouped.setdefault(row["trajectory_id"], []).append(row)
    if skipped:
        logger.warning("skipped %d malformed corpus samples; dropping %d trajectories",
                       skipped, len(bad))
        grouped = {tid: g for tid, g in grouped.items() if tid not in bad}

    trajectories = []
    for tid, group in grouped.items():
        group.sort(key=lambda r: r["step_index"])
        members = {bool(r["member"]) for r in group}
        if len(members) != 1:
            raise SchemaError(f"{path}: trajectory {tid} has mixed membership labels")
        samples = tuple(
            TransitionSample(observation=observation_from_json(r["observation"]),
                             instruction_id=int(r["instruction_id"]),
                             action=r["action"], step_index=int(r["step_index"]))
            for r in group)
        trajectories.append(Trajectory(tid, samples, samples[0].instruction_id,
                                       members.pop()))
    return meta, trajectories


@dataclasses.dataclass
class InferenceLog:
    header: dict
    records: list[InferenceRecord]


_LOG_ROW_KEYS = {"trajectory_id", "step_index", "prompt_mode", "generated_action",
                 "token_logprob_rows", "gt_token_logprobs"}


def write_inference_log(records: Sequence[InferenceRecord], path: str | Path,
                        header: dict | None = None) -> None:
    """Write records sorted by ``(trajectory_id, step_index)``."""
    head = {"schema": INFERLOG_SCHEMA, "model_tag": "", "prompt_mode": PROMPT_ORIGINAL}
    if records:
        head["prompt_mode"] = records[0].prompt_mode
    head.update(header or {})
    head["schema"] = INFERLOG_SCHEMA
    ordered = sorted(records, key=lambda r: r.key)
    for a, b in zip(ordered, ordered[1:]):
        if a.key == b.key:
            raise DuplicateRecord(f"duplicate inference record {a.key}")
    write_ndjson(path, head, (r.to_json() for r in ordered))


def load_inference_log(path: str | Path, strict: bool = True) -> InferenceLog:
    lines = _read_lines(path)
    if not lines:
        return InferenceLog(header={}, records=[])
    head, rows = _split_header(lines, INFERLOG_SCHEMA, path)
    action_dim = head.get("action_dim")
    records, seen, skipped = [], set(), 0
    for row in rows:
        extra = set(row) - _LOG_ROW_KEYS
        if extra and strict:
            raise SchemaError(f"{path}: unknown record fields {sorted(extra)}")
        try:
            key = (row["trajectory_id"], int(row["step_index"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: record without a valid key ({exc})") from None
        if key in seen:
            raise DuplicateRecord(f"{path}: duplicate inference record {key}")
        seen.add(key)
        ga = row.get("generated_action")
        if action_dim is not None and ga is not None and len(ga) != action_dim:
            if strict:
                raise SchemaError(f"{path}: record {key} action length {len(ga)}, "
                                  f"header says {action_dim}")
            skipped += 1
            continue
        rec = InferenceRecord(
            trajectory_id=row["trajectory_id"], step_index=key[1],
            generated_action=ga,
            token_logprob_rows=decode_rows(row.get("token_logprob_rows")),
            gt_token_logprobs=row.get("gt_token_logprobs"),
            prompt_mode=row.get("prompt_mode", head.get("prompt_mode", PROMPT_ORIGINAL)))
        if strict:
            rec.check_normalized()
        records.append(rec)
    if skipped:
        logger.warning("skipped %d malformed inference records", skipped)
    return InferenceLog(header=head, records=records)


def read_inference_log(path: str | Path, strict: bool = True) -> list[InferenceRecord]:
    return load_inference_log(path, strict=strict).records
