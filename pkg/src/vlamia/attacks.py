"""Membership scores computed from inference logs.

Every score follows the convention *higher means more likely a member*.
Sample-level scores read one :class:`InferenceRecord`; trajectory-level
scores read the records of every step of a trajectory.  Which record fields
an attack may read is fixed by its access regime (see ``REGIMES``); the
router in :func:`run_attack` checks them before scoring and the scoring
functions never touch anything else.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .core import (LOGPROB_FLOOR, PROMPT_FIXED, PROMPT_ORIGINAL, AccessRegimeViolation,
                   InferenceRecord, MissingRecord, PromptModeMismatch, SchemaError,
                   ScoredExample, Trajectory, TrajectoryTooShort, _read_lines,
                   sample_unit_id, write_ndjson)
from .corpus import EvalManifest

logger = logging.getLogger(__name__)


class AttackName(str, enum.Enum):
    NLL = "NLL"
    CONF = "Conf"
    CONF_FIX = "ConfFix"
    ACTION_L1 = "ActionL1"
    ACTION_MSE = "ActionMSE"
    AGG_NLL = "AggNLL"
    AGG_CONF = "AggConf"
    AGG_CONF_FIX = "AggConfFix"
    AGG_ACTION_L1 = "AggActionL1"
    AGG_ACTION_MSE = "AggActionMSE"
    TEMP_SMOOTH = "TempSmooth"
    TEMP_CURV = "TempCurv"

    def __str__(self):
        return self.value


GENERATED = "generated_action"
ROWS = "token_logprob_rows"
GT_LOGPROBS = "gt_token_logprobs"
RECORD_FIELDS = (GENERATED, ROWS, GT_LOGPROBS)


@dataclasses.dataclass(frozen=True)
class Regime:
    """Signals an attack consumes.

    ``prompt`` is the prompt mode the log must have been produced under;
    ``record_fields`` are the record fields read; ``gt_action`` marks attacks
    that also need the candidate's ground-truth action from the corpus.
    """

    granularity: str
    prompt: str
    record_fields: frozenset[str]
    gt_action: bool
    black_box: bool


def _regime(gran, prompt, fields, gt_action):
    return Regime(gran, prompt, frozenset(fields), gt_action,
                  black_box=set(fields) <= {GENERATED})


_SAMPLE_REGIMES = {
    AttackName.NLL: _regime("sample", PROMPT_ORIGINAL, [GT_LOGPROBS], True),
    AttackName.CONF: _regime("sample", PROMPT_ORIGINAL, [ROWS, GENERATED], False),
    AttackName.CONF_FIX: _regime("sample", PROMPT_FIXED, [ROWS, GENERATED], False),
    AttackName.ACTION_L1: _regime("sample", PROMPT_ORIGINAL, [GENERATED], True),
    AttackName.ACTION_MSE: _regime("sample", PROMPT_ORIGINAL, [GENERATED], True),
}
AGGREGATES = {
    AttackName.AGG_NLL: AttackName.NLL,
    AttackName.AGG_CONF: AttackName.CONF,
    AttackName.AGG_CONF_FIX: AttackName.CONF_FIX,
    AttackName.AGG_ACTION_L1: AttackName.ACTION_L1,
    AttackName.AGG_ACTION_MSE: AttackName.ACTION_MSE,
}
REGIMES: dict[AttackName, Regime] = {
    **_SAMPLE_REGIMES,
    **{agg: dataclasses.replace(_SAMPLE_REGIMES[base], granularity="trajectory")
       for agg, base in AGGREGATES.items()},
    AttackName.TEMP_SMOOTH: _regime("trajectory", PROMPT_ORIGINAL, [GENERATED], False),
    AttackName.TEMP_CURV: _regime("trajectory", PROMPT_ORIGINAL, [GENERATED], False),
}


# --------------------------------------------------------------------------
# sample-level scores

def _require(record: InferenceRecord, field: str):
    value = getattr(record, field)
    if value is None:
        raise AccessRegimeViolation(f"record {record.key} does not expose {field}")
    return value


def score_nll(record: InferenceRecord) -> float:
    """Mean teacher-forced log-likelihood of the ground-truth tokens."""
    gt = _require(record, GT_LOGPROBS)
    if gt.size == 0:
        raise AccessRegimeViolation(f"record {record.key} has no teacher-forced tokens")
    return float(np.mean(np.maximum(gt, LOGPROB_FLOOR)))


def _mean_max_logprob(record: InferenceRecord) -> float:
    rows = _require(record, ROWS)
    if rows.shape[0] == 0:
        raise AccessRegimeViolation(f"record {record.key} has no probability rows")
    return float(np.mean(np.maximum(rows.max(axis=1), LOGPROB_FLOOR)))


def score_conf(record: InferenceRecord) -> float:
    """Mean over decoding steps of the largest log-probability in the row."""
    if record.prompt_mode != PROMPT_ORIGINAL:
        raise PromptModeMismatch(f"Conf needs an original-prompt log, record {record.key} "
                                 f"is {record.prompt_mode}")
    return _mean_max_logprob(record)


def score_conf_fix(record: InferenceRecord) -> float:
    if record.prompt_mode != PROMPT_FIXED:
        raise PromptModeMismatch(f"ConfFix needs a fixed-prompt log, record {record.key} "
                                 f"is {record.prompt_mode}")
    return _mean_max_logprob(record)


def _action_error(record: InferenceRecord, gt) -> np.ndarray:
    generated = _require(record, GENERATED)
    gt = np.asarray(gt, dtype=np.float64)
    if generated.shape != gt.shape:
        raise ValueError(f"action dimension mismatch: generated {generated.shape}, "
                         f"ground truth {gt.shape}")
    return generated - gt


def score_action_l1(record: InferenceRecord, gt) -> float:
    return -float(np.sum(np.abs(_action_error(record, gt))))


def score_action_mse(record: InferenceRecord, gt) -> float:
    diff = _action_error(record, gt)
    return -float(np.dot(diff, diff)) / diff.size


# --------------------------------------------------------------------------
# trajectory-level scores

def score_traj_agg(sample_scores: Sequence[float]) -> float:
    scores = np.asarray(sample_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot aggregate an empty list of scores")
    return float(np.mean(scores))


def _stack_actions(generated) -> np.ndarray:
    a = np.asarray(generated, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def score_temp_smooth(generated) -> float:
    """Negative mean L2 norm of first differences of the generated actions."""
    a = _stack_actions(generated)
    if a.shape[0] < 2:
        raise TrajectoryTooShort("smoothness needs at least 2 steps")
    return -float(np.mean(np.linalg.norm(np.diff(a, axis=0), axis=1)))


def score_temp_curv(generated) -> float:
    """Negative mean L2 norm of second differences of the generated actions."""
    a = _stack_actions(generated)
    if a.shape[0] < 3:
        raise TrajectoryTooShort("curvature needs at least 3 steps")
    second = a[2:] - 2 * a[1:-1] + a[:-2]
    return -float(np.mean(np.linalg.norm(second, axis=1)))


# --------------------------------------------------------------------------
# routing

def check_regime(attack: AttackName, record: InferenceRecord) -> None:
    regime = REGIMES[attack]
    if record.prompt_mode != regime.prompt:
        raise PromptModeMismatch(f"{attack} needs a {regime.prompt}-prompt log, "
                                 f"record {record.key} is {record.prompt_mode}")
    for field in sorted(regime.record_fields):
        if getattr(record, field) is None:
            raise AccessRegimeViolation(f"{attack} needs {field}, which record "
                                        f"{record.key} does not expose")


def _sample_score(attack: AttackName, record: InferenceRecord, gt_action) -> float:
    if attack is AttackName.NLL:
        return score_nll(record)
    if attack is AttackName.CONF:
        return score_conf(record)
    if attack is AttackName.CONF_FIX:
        return score_conf_fix(record)
    if attack is AttackName.ACTION_L1:
        return score_action_l1(record, gt_action)
    if attack is AttackName.ACTION_MSE:
        return score_action_mse(record, gt_action)
    raise ValueError(f"{attack} is not a sample-level attack")


def strip_fields(records: Sequence[InferenceRecord], fields: Sequence[str]
                 ) -> list[InferenceRecord]:
    """Copies of ``records`` with the named fields removed (set to ``None``)."""
    unknown = set(fields) - set(RECORD_FIELDS)
    if unknown:
        raise ValueError(f"unknown record fields {sorted(unknown)}")
    blank = {f: None for f in fields}
    return [r.replace(**blank) for r in records]


def black_box_view(records: Sequence[InferenceRecord]) -> list[InferenceRecord]:
    """What a black-box client sees: generated actions only."""
    return strip_fields(records, [ROWS, GT_LOGPROBS])


def run_attack(attack: AttackName | str, trajectories: Sequence[Trajectory],
               records: Sequence[InferenceRecord], manifest: EvalManifest,
               workers: int = 1) -> list[ScoredExample]:
    """Score every manifest unit of the attack's granularity.

    Labels come from the corpus.  Units too short for a temporal score are
    dropped with a counted warning.  Output is sorted by ``unit_id``.
    """
    attack = AttackName(attack)
    regime = REGIMES[attack]
    by_traj = {t.trajectory_id: t for t in trajectories}
    by_key = {r.key: r for r in records}

    def fetch(tid, step):
        try:
            rec = by_key[(tid, step)]
        except KeyError:
            raise MissingRecord(f"no inference record for {tid} step {step}") from None
        check_regime(attack, rec)
        return rec

    def traj(tid):
        try:
            return by_traj[tid]
        except KeyError:
            raise MissingRecord(f"trajectory {tid} is not in the corpus") from None

    if regime.granularity == "sample":
        def score_unit(unit):
            tid, step = unit
            t = traj(tid)
            rec = fetch(tid, step)
            gt = t.samples[step].action if regime.gt_action else None
            return ScoredExample(sample_unit_id(tid, step), attack.value,
                                 _sample_score(attack, rec, gt), t.member)
        units = manifest.sample_units
    else:
        def score_unit(tid):
            t = traj(tid)
            recs = [fetch(tid, s.step_index) for s in t.samples]
            if attack in AGGREGATES:
                base = AGGREGATES[attack]
                value = score_traj_agg([
                    _sample_score(base, r, s.action if regime.gt_action else None)
                    for r, s in zip(recs, t.samples)])
            else:
                generated = [r.generated_action for r in recs]
                fn = score_temp_smooth if attack is AttackName.TEMP_SMOOTH else score_temp_curv
                try:
                    value = fn(generated)
                except TrajectoryTooShort:
                    return None
            return ScoredExample(tid, attack.value, value, t.member)
        units = manifest.traj_units

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score_unit, units))
    else:
        results = [score_unit(u) for u in units]
    dropped = sum(r is None for r in results)
    if dropped:
        logger.warning("%s: skipped %d trajectories too short to score", attack, dropped)
    return sorted((r for r in results if r is not None), key=lambda r: r.unit_id)


def write_scores(scored: Sequence[ScoredExample], path: str | Path) -> None:
    write_ndjson(path, None, (s.to_json() for s in scored))


def read_scores(path: str | Path) -> list[ScoredExample]:
    out = []
    for row in _read_lines(path):
        try:
            out.append(ScoredExample(row["unit_id"], AttackName(row["attack"]).value,
                                     float(row["score"]), bool(row["member"])))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{path}: malformed score record ({exc})") from None
    return out
