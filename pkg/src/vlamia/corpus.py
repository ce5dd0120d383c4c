"""Synthetic embodied-trajectory corpus with member / non-member splits.

Each task moves a point in ``d - 1`` motion dimensions from a task start to a
task goal along a cubic ease-in/ease-out path.  Every demonstration perturbs
its task in two ways: the goal is displaced (the displaced goal is part of
the observation), and the recorded motion commands carry a constant bias
that never shows up in the observation.  A policy can only reproduce the bias
of a trajectory it has memorised.  The last action dimension is a binary
gripper channel.
"""
from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence

import numpy as np

from .core import (CorpusMetadata, InsufficientPopulation, Trajectory, TransitionSample,
                   VectorObs, substream, write_ndjson, _read_lines, SchemaError,
                   MissingHeader)

MANIFEST_SCHEMA = "manifest/1"

DEFAULT_TASKS = 4
DEFAULT_TRAJS_PER_TASK = 50
DEFAULT_HORIZON = 60
DEFAULT_ACTION_DIM = 7
DEFAULT_SIGMA_DEMO = 0.1
DEFAULT_SIGMA_OBS = 0.01
DEFAULT_BINS = 256
# Per-trajectory goal displacement, in position units per unit of sigma_demo.
DEFAULT_GOAL_SPREAD = 60.0


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    task_id: int
    start: np.ndarray
    goal: np.ndarray
    horizon: int
    sigma_demo: float
    sigma_obs: float
    gripper_step: int

    def __post_init__(self):
        if self.horizon < 8:
            raise ValueError("horizon must be >= 8")
        if self.sigma_demo < 0 or self.sigma_obs < 0:
            raise ValueError("noise scales must be non-negative")

    def reference_deltas(self) -> np.ndarray:
        """Per-step motion deltas of the noise-free path, shape ``(T, d - 1)``."""
        s = np.arange(self.horizon + 1) / self.horizon
        ease = 3 * s**2 - 2 * s**3
        return np.diff(ease)[:, None] * (self.goal - self.start)[None, :]


def _ease_peak(horizon: int) -> float:
    s = np.arange(horizon + 1) / horizon
    return float(np.max(np.diff(3 * s**2 - 2 * s**3)))


def make_tasks(n_tasks: int, d: int, horizon: int, sigma_demo: float, sigma_obs: float,
               seed: int) -> list[TaskSpec]:
    rng = substream(seed, "corpus/tasks")
    peak = _ease_peak(horizon)
    tasks = []
    for k in range(n_tasks):
        # Peak reference delta per dimension lands in [0.2, 0.6] of the action range.
        peak_delta = rng.uniform(0.2, 0.6, size=d - 1) * rng.choice([-1.0, 1.0], size=d - 1)
        disp = peak_delta / peak
        start = rng.uniform(-1.0, 1.0, size=d - 1) * horizon * 0.2
        quarter = max(1, horizon // 4)
        gripper_step = horizon - quarter + int(rng.integers(0, quarter))
        tasks.append(TaskSpec(k, start, start + disp, horizon, sigma_demo, sigma_obs,
                              gripper_step))
    return tasks


def _demonstration(task: TaskSpec, rng: np.random.Generator, goal_spread: float
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Roll one demonstration; returns ``(observations, actions)``.

    The executed path eases from the task start to a displaced goal.  The
    recorded commands add a constant bias drawn from ``sigma_demo``; the
    observed positions follow the path itself, so the bias cannot be read off
    the observations.
    """
    T, dp = task.horizon, task.start.size
    sd = task.sigma_demo
    goal = task.goal + sd * goal_spread * rng.standard_normal(dp)
    bias = sd * rng.standard_normal(dp)
    s = np.arange(T + 1) / T
    ease = 3 * s**2 - 2 * s**3
    reference = np.diff(ease)[:, None] * (goal - task.start)[None, :]
    motion = np.clip(reference + bias, -1.0, 1.0)
    gripper = np.where(np.arange(T) >= task.gripper_step, 1.0, -1.0)
    actions = np.column_stack([motion, gripper])

    positions = task.start + ease[:-1, None] * (goal - task.start)[None, :]
    positions = positions + task.sigma_obs * rng.standard_normal(positions.shape)
    phase = np.arange(T) / (T - 1)
    obs = np.column_stack([positions, np.broadcast_to(goal, positions.shape), phase])
    return obs, actions


def generate_corpus(n_tasks: int = DEFAULT_TASKS,
                    trajs_per_task: int = DEFAULT_TRAJS_PER_TASK,
                    d: int = DEFAULT_ACTION_DIM, T: int = DEFAULT_HORIZON, seed: int = 7,
                    sigma_demo: float = DEFAULT_SIGMA_DEMO,
                    sigma_obs: float = DEFAULT_SIGMA_OBS, bins: int = DEFAULT_BINS,
                    goal_spread: float = DEFAULT_GOAL_SPREAD
                    ) -> tuple[CorpusMetadata, list[Trajectory]]:
    """Generate an unlabelled corpus; every trajectory has ``member=False``.

    Use :func:`split_corpus` and :func:`apply_split` to assign membership.
    """
    if d < 2:
        raise ValueError("action_dim must be >= 2 (one motion dimension plus gripper)")
    if n_tasks < 2 or trajs_per_task < 2:
        raise ValueError("need at least 2 tasks and 2 trajectories per task")
    if goal_spread < 0:
        raise ValueError("goal_spread must be non-negative")
    tasks = make_tasks(n_tasks, d, T, sigma_demo, sigma_obs, seed)
    trajectories = []
    for task in tasks:
        for i in range(trajs_per_task):
            rng = substream(seed, "corpus/demo", task.task_id, i)
            obs, actions = _demonstration(task, rng, goal_spread)
            samples = tuple(TransitionSample(VectorObs(o), task.task_id, a, t)
                            for t, (o, a) in enumerate(zip(obs, actions)))
            tid = f"task{task.task_id:02d}-traj{i:03d}"
            trajectories.append(Trajectory(tid, samples, task.task_id, False))
    meta = CorpusMetadata(
        action_dim=d, bin_count=bins, action_bounds=[(-1.0, 1.0)] * d, vocab_size=bins,
        seed=seed,
        generator={"tasks": n_tasks, "trajs_per_task": trajs_per_task, "horizon": T,
                   "action_dim": d, "sigma_demo": sigma_demo, "sigma_obs": sigma_obs,
                   "goal_spread": goal_spread})
    return meta, trajectories


@dataclasses.dataclass(frozen=True)
class SplitPlan:
    members: tuple[str, ...]
    nonmembers: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if set(self.members) & set(self.nonmembers):
            raise ValueError("member and non-member sets overlap")


def split_corpus(trajectories: Sequence[Trajectory], fraction: float = 0.5,
                 seed: int = 7) -> SplitPlan:
    """Stratified per-task split.

    Each task contributes ``floor(n * fraction + 0.5)`` members, clamped so both
    sides keep at least one trajectory; with ``fraction=0.5`` an odd count puts
    the extra trajectory on the member side.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    by_task: dict[int, list[str]] = {}
    for traj in trajectories:
        by_task.setdefault(traj.instruction_id, []).append(traj.trajectory_id)
    members, nonmembers = [], []
    for task_id in sorted(by_task):
        ids = sorted(by_task[task_id])
        if len(ids) < 2:
            raise ValueError(f"task {task_id} has fewer than 2 trajectories")
        n_mem = min(max(math.floor(len(ids) * fraction + 0.5), 1), len(ids) - 1)
        order = substream(seed, "split", task_id).permutation(len(ids))
        members += [ids[i] for i in order[:n_mem]]
        nonmembers += [ids[i] for i in order[n_mem:]]
    return SplitPlan(tuple(sorted(members)), tuple(sorted(nonmembers)), seed)


def apply_split(trajectories: Sequence[Trajectory], plan: SplitPlan) -> list[Trajectory]:
    mem = set(plan.members)
    covered = mem | set(plan.nonmembers)
    ids = {t.trajectory_id for t in trajectories}
    if covered != ids:
        raise ValueError("split plan does not cover the corpus exactly")
    return [dataclasses.replace(t, member=t.trajectory_id in mem) for t in trajectories]


@dataclasses.dataclass(frozen=True)
class EvalManifest:
    """Units sampled for one evaluation.

    Sample units are ``(trajectory_id, step_index)`` pairs; trajectory units
    are trajectory ids.  The class fields only record which pool a unit was
    drawn from; attacks take their labels from the corpus.
    """

    member_samples: tuple[tuple[str, int], ...]
    nonmember_samples: tuple[tuple[str, int], ...]
    member_trajs: tuple[str, ...]
    nonmember_trajs: tuple[str, ...]
    seed: int = 0
    disjoint: bool = False

    @property
    def sample_units(self) -> list[tuple[str, int]]:
        return sorted(self.member_samples + self.nonmember_samples)

    @property
    def traj_units(self) -> list[str]:
        return sorted(self.member_trajs + self.nonmember_trajs)

    def query_keys(self, trajectories: Sequence[Trajectory]) -> list[tuple[str, int]]:
        """Every transition the model must be queried on, sorted."""
        lengths = {t.trajectory_id: len(t) for t in trajectories}
        keys = set(self.sample_units)
        for tid in self.traj_units:
            keys.update((tid, s) for s in range(lengths[tid]))
        return sorted(keys)


def sample_eval_sets(trajectories: Sequence[Trajectory], n_samples_per_class: int,
                     n_trajs_per_class: int, seed: int = 7,
                     disjoint: bool = False) -> EvalManifest:
    """Uniform draws without replacement, separately per class.

    With ``disjoint`` set, trajectory units are drawn only from trajectories
    that contributed no sampled transition.
    """
    pools = {True: [t for t in trajectories if t.member],
             False: [t for t in trajectories if not t.member]}
    shortfalls = []
    picks: dict[bool, tuple[list, list]] = {}
    for cls, pool in pools.items():
        name = "member" if cls else "nonmember"
        keys = [(t.trajectory_id, s.step_index) for t in sorted(pool, key=lambda t: t.trajectory_id)
                for s in t.samples]
        if n_samples_per_class > len(keys):
            shortfalls.append(f"{name} samples: need {n_samples_per_class}, have {len(keys)}")
            continue
        rng = substream(seed, "eval/samples", int(cls))
        idx = np.sort(rng.choice(len(keys), size=n_samples_per_class, replace=False))
        samples = [keys[i] for i in idx]
        used = {k[0] for k in samples} if disjoint else set()
        tids = sorted(t.trajectory_id for t in pool if t.trajectory_id not in used)
        if n_trajs_per_class > len(tids):
            shortfalls.append(f"{name} trajectories: need {n_trajs_per_class}, have {len(tids)}")
            continue
        rng = substream(seed, "eval/trajs", int(cls))
        tidx = np.sort(rng.choice(len(tids), size=n_trajs_per_class, replace=False))
        picks[cls] = (samples, [tids[i] for i in tidx])
    if shortfalls:
        raise InsufficientPopulation("; ".join(shortfalls))
    return EvalManifest(tuple(picks[True][0]), tuple(picks[False][0]),
                        tuple(picks[True][1]), tuple(picks[False][1]), seed, disjoint)


def write_manifest(manifest: EvalManifest, path) -> None:
    rows = []
    for cls, samples, trajs in ((True, manifest.member_samples, manifest.member_trajs),
                                (False, manifest.nonmember_samples, manifest.nonmember_trajs)):
        rows += [{"unit": "sample", "class": "member" if cls else "nonmember",
                  "trajectory_id": tid, "step_index": step} for tid, step in samples]
        rows += [{"unit": "trajectory", "class": "member" if cls else "nonmember",
                  "trajectory_id": tid} for tid in trajs]
    header = {"schema": MANIFEST_SCHEMA, "seed": manifest.seed, "disjoint": manifest.disjoint}
    write_ndjson(path, header, rows)


def read_manifest(path) -> EvalManifest:
    lines = _read_lines(path)
    if not lines or "schema" not in lines[0]:
        raise MissingHeader(f"{path}: missing manifest header")
    head = lines[0]
    if head["schema"] != MANIFEST_SCHEMA:
        raise SchemaError(f"{path}: schema {head['schema']!r}, expected {MANIFEST_SCHEMA!r}")
    parts = {("sample", True): [], ("sample", False): [],
             ("trajectory", True): [], ("trajectory", False): []}
    for row in lines[1:]:
        cls = row["class"] == "member"
        if row["unit"] == "sample":
            parts["sample", cls].append((row["trajectory_id"], int(row["step_index"])))
        else:
            parts["trajectory", cls].append(row["trajectory_id"])
    return EvalManifest(tuple(parts["sample", True]), tuple(parts["sample", False]),
                        tuple(parts["trajectory", True]), tuple(parts["trajectory", False]),
                        head["seed"], head["disjoint"])
