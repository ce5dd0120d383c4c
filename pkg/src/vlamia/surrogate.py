"""A small autoregressive tokenized-action policy trained with manual backprop.

Architecture::

    h        = tanh(W_emb @ [standardised obs, instruction one-hot] + b_emb)
    h_drop   = h * mask                                  (dropout site)
    logits_j = U_j @ h_drop + c_j + sum_{k<j} P_{j,k}[y_k]

so each action-token head sees the shared embedding plus one-hot codes of the
previously decoded tokens (``P_{j,k}[y]`` is row ``y`` of a ``B x B`` table).
Instruction index ``n_tasks`` is reserved for the generic prompt and never
trained on.
"""
from __future__ import annotations

import base64
import dataclasses
import json
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from .core import (PROMPT_FIXED, PROMPT_ORIGINAL, CorpusMetadata, InferenceRecord,
                   NumericFailure, SchemaError, Trajectory, substream)

logger = logging.getLogger(__name__)

CKPT_SCHEMA = "ckpt/1"
HIDDEN = 128
LEARNING_RATE = 0.2
PARAM_NAMES = ("W_emb", "b_emb", "U", "c", "P")


@dataclasses.dataclass(frozen=True)
class ActionTokenizer:
    bin_count: int
    bounds: tuple[tuple[float, float], ...]

    @classmethod
    def from_metadata(cls, meta: CorpusMetadata, bins: int | None = None) -> ActionTokenizer:
        return cls(bins or meta.bin_count, meta.action_bounds)

    @property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    @property
    def width(self) -> np.ndarray:
        return (self.hi - self.lo) / self.bin_count

    def tokenize(self, actions) -> np.ndarray:
        """Uniform bins ``[lo + i w, lo + (i+1) w)``; ``hi`` lands in the last bin."""
        a = np.clip(np.asarray(actions, dtype=np.float64), self.lo, self.hi)
        idx = np.floor((a - self.lo) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.bin_count - 1)

    def detokenize(self, tokens) -> np.ndarray:
        return self.lo + (np.asarray(tokens) + 0.5) * self.width


def pair_index(j: int, k: int) -> int:
    """Flat index of the ``(position j, previous position k < j)`` table."""
    return j * (j - 1) // 2 + k


@dataclasses.dataclass
class PolicyParams:
    W_emb: np.ndarray  # (H, obs_dim + n_tasks + 1)
    b_emb: np.ndarray  # (H,)
    U: np.ndarray      # (d, B, H)
    c: np.ndarray      # (d, B)
    P: np.ndarray      # (d(d-1)/2, B, B), row = previous token
    obs_mean: np.ndarray
    obs_scale: np.ndarray
    n_tasks: int
    dropout_p: float = 0.0
    seed: int = 0

    @property
    def action_dim(self) -> int:
        return self.U.shape[0]

    @property
    def bins(self) -> int:
        return self.U.shape[1]

    @property
    def hidden(self) -> int:
        return self.U.shape[2]

    @property
    def obs_dim(self) -> int:
        return self.obs_mean.size

    @property
    def generic_instruction(self) -> int:
        return self.n_tasks

    def arch(self) -> dict:
        return {"d": self.action_dim, "B": self.bins, "obs_dim": self.obs_dim,
                "n_tasks": self.n_tasks, "hidden": self.hidden}

    def copy(self) -> PolicyParams:
        return dataclasses.replace(self, **{n: getattr(self, n).copy() for n in PARAM_NAMES})

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (self.arch() == other.arch() and self.dropout_p == other.dropout_p
                and all(np.array_equal(getattr(self, n), getattr(other, n))
                        for n in PARAM_NAMES + ("obs_mean", "obs_scale")))


def init_params(obs_dim: int, n_tasks: int, d: int, bins: int, *, hidden: int = HIDDEN,
                seed: int = 0, dropout_p: float = 0.0, obs_mean=None, obs_scale=None,
                zero: bool = False) -> PolicyParams:
    """Freshly seeded (or, with ``zero=True``, all-zero) parameters."""
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout_p must lie in [0, 1)")
    in_dim = obs_dim + n_tasks + 1
    n_pairs = d * (d - 1) // 2
    params = PolicyParams(
        W_emb=np.zeros((hidden, in_dim)), b_emb=np.zeros(hidden),
        U=np.zeros((d, bins, hidden)), c=np.zeros((d, bins)),
        P=np.zeros((n_pairs, bins, bins)),
        obs_mean=np.zeros(obs_dim) if obs_mean is None else np.asarray(obs_mean, float),
        obs_scale=np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, float),
        n_tasks=n_tasks, dropout_p=dropout_p, seed=seed)
    if not zero:
        rng = substream(seed, "init")
        params.W_emb = rng.standard_normal(params.W_emb.shape) * (1.5 / np.sqrt(in_dim))
        params.b_emb = rng.standard_normal(hidden) * 0.5
        params.U = rng.standard_normal(params.U.shape) * (0.1 / np.sqrt(hidden))
    return params


def observation_stats(trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    obs = np.stack([s.observation.values for t in trajectories for s in t.samples])
    scale = obs.std(axis=0)
    return obs.mean(axis=0), np.where(scale > 1e-8, scale, 1.0)


# --------------------------------------------------------------------------
# forward / backward

def _inputs(params: PolicyParams, obs: np.ndarray, instr: np.ndarray) -> np.ndarray:
    onehot = np.zeros((obs.shape[0], params.n_tasks + 1))
    onehot[np.arange(obs.shape[0]), instr] = 1.0
    return np.hstack([(obs - params.obs_mean) / params.obs_scale, onehot])


def _embed(params: PolicyParams, x: np.ndarray, mask: np.ndarray | None):
    h = np.tanh(x @ params.W_emb.T + params.b_emb)
    return h, (h if mask is None else h * mask)


def _position_logits(params: PolicyParams, h_drop: np.ndarray, j: int,
                     prev: np.ndarray) -> np.ndarray:
    logits = h_drop @ params.U[j].T + params.c[j]
    for k in range(j):
        logits = logits + params.P[pair_index(j, k)][prev[:, k]]
    return logits


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray | None:
    """Inverted-dropout keep mask, or ``None`` (identity) when ``p == 0``."""
    if p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def forward_logits(params: PolicyParams, observation, instruction_id: int,
                   prev_tokens: Sequence[int], dropout_mask: np.ndarray | None = None
                   ) -> np.ndarray:
    """Logits over the ``B`` tokens of position ``len(prev_tokens)``."""
    obs = np.asarray(observation, dtype=np.float64).reshape(1, -1)
    if obs.shape[1] != params.obs_dim:
        raise ValueError(f"observation has {obs.shape[1]} features, expected {params.obs_dim}")
    j = len(prev_tokens)
    if j >= params.action_dim:
        raise ValueError(f"prefix of length {j} leaves no position to predict")
    if not 0 <= instruction_id <= params.n_tasks:
        raise ValueError(f"instruction {instruction_id} out of range")
    mask = None if dropout_mask is None else np.asarray(dropout_mask).reshape(1, -1)
    _, h_drop = _embed(params, _inputs(params, obs, np.array([instruction_id])), mask)
    prev = np.asarray(prev_tokens, dtype=np.int64).reshape(1, -1)
    return _position_logits(params, h_drop, j, prev)[0]


def teacher_forced_logprobs(params: PolicyParams, obs: np.ndarray, instr: np.ndarray,
                            tokens: np.ndarray, mask: np.ndarray | None = None,
                            temperature: float = 1.0) -> np.ndarray:
    """``log p(y_j | o, x, y_<j)`` for the given tokens, shape ``(N, d)``."""
    _, h_drop = _embed(params, _inputs(params, obs, instr), mask)
    n = obs.shape[0]
    out = np.empty((n, params.action_dim))
    for j in range(params.action_dim):
        rows = log_softmax(_position_logits(params, h_drop, j, tokens) / temperature, axis=1)
        out[:, j] = rows[np.arange(n), tokens[:, j]]
    return out


def _row_sum(rows: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum the rows of ``g`` grouped by ``rows``; returns ``(unique rows, sums)``."""
    uniq, inv = np.unique(rows, return_inverse=True)
    onehot = (inv[None, :] == np.arange(uniq.size)[:, None]).astype(g.dtype)
    return uniq, onehot @ g


def _loss_and_sparse_grad(params: PolicyParams, obs, instr, tokens, mask):
    n, d = tokens.shape
    x = _inputs(params, obs, instr)
    h, h_drop = _embed(params, x, mask)
    grads = {"U": np.empty_like(params.U), "c": np.empty_like(params.c)}
    p_rows = {}
    dh_drop = np.zeros_like(h)
    loss = 0.0
    idx = np.arange(n)
    for j in range(d):
        logp = log_softmax(_position_logits(params, h_drop, j, tokens), axis=1)
        loss -= logp[idx, tokens[:, j]].sum()
        g = np.exp(logp)
        g[idx, tokens[:, j]] -= 1.0
        g /= n * d
        grads["U"][j] = g.T @ h_drop
        grads["c"][j] = g.sum(axis=0)
        for k in range(j):
            p_rows[pair_index(j, k)] = _row_sum(tokens[:, k], g)
        dh_drop += g @ params.U[j]
    dh = dh_drop if mask is None else dh_drop * mask
    dz = dh * (1.0 - h * h)
    grads["W_emb"] = dz.T @ x
    grads["b_emb"] = dz.sum(axis=0)
    return loss / (n * d), grads, p_rows


def loss_and_grad(params: PolicyParams, obs: np.ndarray, instr: np.ndarray,
                  tokens: np.ndarray, mask: np.ndarray | None = None
                  ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean teacher-forced cross-entropy per token and its exact gradient."""
    loss, grads, p_rows = _loss_and_sparse_grad(params, obs, instr, tokens, mask)
    grads["P"] = np.zeros_like(params.P)
    for pair, (rows, g) in p_rows.items():
        grads["P"][pair, rows] = g
    return loss, grads


class _MomentumSGD:
    """Heavy-ball SGD (``v <- mu v + g; theta <- theta - lr v``).

    The previous-token tables receive row-sparse gradients, so their rows are
    updated lazily: a row untouched for ``s`` steps is caught up in closed form
    (``theta -= lr v mu (1 - mu^s) / (1 - mu)``, ``v *= mu^s``) right before it
    is next read or written.
    """

    def __init__(self, params: PolicyParams, lr: float, momentum: float):
        self.params, self.lr, self.mu = params, lr, momentum
        self.velocity = {n: np.zeros_like(getattr(params, n)) for n in PARAM_NAMES}
        self.synced = np.zeros(params.P.shape[:2], dtype=np.int64)
        self.step = 0

    def _catch_up(self, pair: int, rows: np.ndarray, to_step: int) -> None:
        lag = to_step - self.synced[pair, rows]
        if not np.any(lag):
            return
        decay = self.mu ** lag
        drift = self.mu * (1.0 - decay) / (1.0 - self.mu)
        v = self.velocity["P"][pair, rows]
        self.params.P[pair, rows] -= self.lr * drift[:, None] * v
        self.velocity["P"][pair, rows] = decay[:, None] * v
        self.synced[pair, rows] = to_step

    def prepare(self, tokens: np.ndarray) -> None:
        """Bring every table row the coming batch reads up to date."""
        d = tokens.shape[1]
        for j in range(d):
            for k in range(j):
                self._catch_up(pair_index(j, k), np.unique(tokens[:, k]), self.step)

    def apply(self, grads: dict[str, np.ndarray], p_rows: dict) -> None:
        self.step += 1
        for name in ("W_emb", "b_emb", "U", "c"):
            v = self.velocity[name]
            v *= self.mu
            v += grads[name]
            getattr(self.params, name)[...] -= self.lr * v
        vp = self.velocity["P"]
        for pair, (rows, g) in p_rows.items():
            vp[pair, rows] = self.mu * vp[pair, rows] + g
            self.params.P[pair, rows] -= self.lr * vp[pair, rows]
            self.synced[pair, rows] = self.step

    def sync_all(self) -> None:
        all_rows = np.arange(self.params.bins)
        for pair in range(self.params.P.shape[0]):
            self._catch_up(pair, all_rows, self.step)


# --------------------------------------------------------------------------
# training

@dataclasses.dataclass
class Checkpoint:
    params: PolicyParams
    step: int
    train_loss: float
    heldout_error: float


@dataclasses.dataclass
class TransitionArrays:
    """Column-stacked view of a set of transitions."""

    keys: list[tuple[str, int]]
    obs: np.ndarray
    instr: np.ndarray
    actions: np.ndarray

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory],
                          keys: Sequence[tuple[str, int]] | None = None) -> TransitionArrays:
        by_id = {t.trajectory_id: t for t in trajectories}
        if keys is None:
            keys = [(t.trajectory_id, s.step_index) for t in trajectories for s in t.samples]
        samples = []
        for tid, step in keys:
            if tid not in by_id:
                raise KeyError(f"unknown trajectory id {tid!r}")
            samples.append(by_id[tid].samples[step])
        obs = np.stack([s.observation.values for s in samples]) if samples else np.zeros((0, 0))
        return cls(list(keys), obs, np.array([s.instruction_id for s in samples], dtype=np.int64),
                   np.stack([s.action for s in samples]) if samples else np.zeros((0, 0)))

    def __len__(self):
        return len(self.keys)


def _mean_ce(params, data: TransitionArrays, tokens: np.ndarray, chunk: int = 4096) -> float:
    total = 0.0
    for i in range(0, len(data), chunk):
        sl = slice(i, i + chunk)
        total -= teacher_forced_logprobs(params, data.obs[sl], data.instr[sl], tokens[sl]).sum()
    return float(total / (len(data) * tokens.shape[1]))


def heldout_action_error(params: PolicyParams, tokenizer: ActionTokenizer,
                         data: TransitionArrays) -> float:
    """Utility proxy: mean L1 error of greedy actions on held-out transitions."""
    if len(data) == 0:
        return float("nan")
    tokens, _ = decode(params, data.obs, data.instr)
    return float(np.abs(tokenizer.detokenize(tokens) - data.actions).sum(axis=1).mean())


def train(params: PolicyParams, trajectories: Sequence[Trajectory], *, steps: int = 3000,
          lr: float = LEARNING_RATE, batch_size: int = 64, momentum: float = 0.9, seed: int = 0,
          checkpoint_every: int = 500, tokenizer: ActionTokenizer | None = None,
          heldout_limit: int = 2000) -> list[Checkpoint]:
    """Momentum SGD on the member trajectories of a labelled corpus.

    Checkpoints are emitted at step 0, every ``checkpoint_every`` steps and at
    the final step.  ``train_loss`` is the full member-set cross-entropy in
    nats per token; ``heldout_error`` is measured on (at most
    ``heldout_limit``) transitions of the non-member trajectories.
    """
    members = [t for t in trajectories if t.member]
    if not members:
        raise ValueError("training needs a non-empty member split")
    if tokenizer is None:
        d = params.action_dim
        tokenizer = ActionTokenizer(params.bins, ((-1.0, 1.0),) * d)
    data = TransitionArrays.from_trajectories(members)
    tokens = tokenizer.tokenize(data.actions)
    heldout = TransitionArrays.from_trajectories([t for t in trajectories if not t.member])
    if len(heldout) > heldout_limit:
        pick = np.sort(substream(seed, "train/heldout").choice(len(heldout), heldout_limit,
                                                               replace=False))
        heldout = TransitionArrays([heldout.keys[i] for i in pick], heldout.obs[pick],
                                   heldout.instr[pick], heldout.actions[pick])

    params = params.copy()
    opt = _MomentumSGD(params, lr, momentum)
    rng = substream(seed, "train")

    def snapshot(step):
        opt.sync_all()
        ckpt = Checkpoint(params.copy(), step, _mean_ce(params, data, tokens),
                          heldout_action_error(params, tokenizer, heldout))
        logger.info("step %d  train CE %.4f  held-out L1 %.4f", step, ckpt.train_loss,
                    ckpt.heldout_error)
        return ckpt

    checkpoints = [snapshot(0)]
    n = len(data)
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, steps + 1):
        if cursor + batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        mask = dropout_mask(rng, (idx.size, params.hidden), params.dropout_p)
        opt.prepare(tokens[idx])
        loss, grads, p_rows = _loss_and_sparse_grad(params, data.obs[idx], data.instr[idx],
                                                    tokens[idx], mask)
        if not np.isfinite(loss):
            raise NumericFailure(f"non-finite training loss at step {step} (lr={lr}); "
                                 "lower the learning rate")
        opt.apply(grads, p_rows)
        if step % checkpoint_every == 0 or step == steps:
            checkpoints.append(snapshot(step))
    return checkpoints


# --------------------------------------------------------------------------
# decoding and inference

TokenSampler = Callable[[np.ndarray, np.ndarray], np.ndarray]


def decode(params: PolicyParams, obs: np.ndarray, instr: np.ndarray,
           mask: np.ndarray | None = None, temperature: float = 1.0,
           sampler: Callable[[np.ndarray, int], np.ndarray] | None = None
           ) -> tuple[np.ndarray, np.ndarray]:
    """Autoregressive decode; returns ``(tokens (N, d), logprob rows (N, d, B))``.

    Rows are the temperature-scaled distributions conditioned on the generated
    prefix.  ``sampler(rows_j, j)`` picks tokens; greedy argmax when ``None``.
    """
    _, h_drop = _embed(params, _inputs(params, obs, instr), mask)
    n, d = obs.shape[0], params.action_dim
    tokens = np.zeros((n, d), dtype=np.int64)
    rows = np.empty((n, d, params.bins))
    for j in range(d):
        logp = log_softmax(_position_logits(params, h_drop, j, tokens) / temperature, axis=1)
        rows[:, j] = logp
        tokens[:, j] = np.argmax(logp, axis=1) if sampler is None else sampler(logp, j)
    return tokens, rows


@dataclasses.dataclass(frozen=True)
class DecodeConfig:
    """How queries are answered.

    ``temperature=None`` means greedy decoding.  The hook fields let the
    mitigation layer perturb observations and actions and resample dropout
    masks; each query gets its own counter-based generator, keyed by
    ``(seed, tag, trajectory_id, step_index)``, so results do not depend on
    batching or worker count.
    """

    temperature: float | None = None
    top_p: float = 1.0
    mc_dropout_p: float = 0.0
    obs_hook: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None
    action_hook: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None
    token_sampler: Callable[[np.ndarray, float, np.ndarray], np.ndarray] | None = None
    seed: int = 0
    tag: str = "none"

    @property
    def stochastic(self) -> bool:
        return (self.temperature is not None or self.mc_dropout_p > 0
                or self.obs_hook is not None or self.action_hook is not None)


CHUNK = 512


def _infer_chunk(params, tokenizer, data: TransitionArrays, prompt_mode: str,
                 config: DecodeConfig) -> list[InferenceRecord]:
    n, d = len(data), params.action_dim
    obs = data.obs.copy()
    instr = data.instr.copy()
    if prompt_mode == PROMPT_FIXED:
        instr[:] = params.generic_instruction
    gens = ([substream(config.seed, "defense/" + config.tag, tid, step)
             for tid, step in data.keys] if config.stochastic else None)
    if config.obs_hook is not None:
        obs = np.stack([config.obs_hook(o, g) for o, g in zip(obs, gens)])
    mask = None
    if config.mc_dropout_p > 0:
        mask = np.stack([dropout_mask(g, params.hidden, config.mc_dropout_p) for g in gens])
    temperature = 1.0 if config.temperature is None else config.temperature
    sampler = None
    if config.temperature is not None:
        uniforms = np.stack([g.random(d) for g in gens])
        sample = config.token_sampler

        def sampler(rows, j):
            return sample(rows, config.top_p, uniforms[:, j])

    tokens, rows = decode(params, obs, instr, mask, temperature, sampler)
    gt_tokens = tokenizer.tokenize(data.actions)
    gt_logp = teacher_forced_logprobs(params, obs, instr, gt_tokens, mask, temperature)
    actions = tokenizer.detokenize(tokens)
    if config.action_hook is not None:
        actions = np.stack([config.action_hook(a, g) for a, g in zip(actions, gens)])
    return [InferenceRecord(tid, step, actions[i], rows[i], gt_logp[i], prompt_mode)
            for i, (tid, step) in enumerate(data.keys)]


def run_inference(params: PolicyParams, trajectories: Sequence[Trajectory],
                  keys: Sequence[tuple[str, int]], prompt_mode: str = PROMPT_ORIGINAL,
                  config: DecodeConfig | None = None, tokenizer: ActionTokenizer | None = None,
                  workers: int = 1) -> list[InferenceRecord]:
    """Query the policy on each ``(trajectory_id, step_index)`` key.

    Output is sorted by key.  Work is split into fixed-size chunks so the
    arithmetic, and therefore every record, is identical for any ``workers``.
    """
    if prompt_mode not in (PROMPT_ORIGINAL, PROMPT_FIXED):
        raise ValueError(f"unknown prompt mode {prompt_mode!r}")
    config = config or DecodeConfig()
    if tokenizer is None:
        tokenizer = ActionTokenizer(params.bins, ((-1.0, 1.0),) * params.action_dim)
    data = TransitionArrays.from_trajectories(trajectories, sorted(keys))
    chunks = [TransitionArrays(data.keys[i:i + CHUNK], data.obs[i:i + CHUNK],
                               data.instr[i:i + CHUNK], data.actions[i:i + CHUNK])
              for i in range(0, len(data), CHUNK)]

    def work(chunk):
        return _infer_chunk(params, tokenizer, chunk, prompt_mode, config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    return [r for part in parts for r in part]


# --------------------------------------------------------------------------
# checkpoint files

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Header line plus one line holding the flat float64 parameters (base64, little-endian)."""
    p = ckpt.params
    header = {"schema": CKPT_SCHEMA, "step": ckpt.step, "arch": p.arch(), "seed": p.seed,
              "dropout_p": p.dropout_p, "train_loss": ckpt.train_loss,
              "heldout_error": ckpt.heldout_error,
              "obs_mean": p.obs_mean.tolist(), "obs_scale": p.obs_scale.tolist()}
    flat = np.ascontiguousarray(p.flat(), dtype="<f8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, separators=(",", ":")) + "\n")
        f.write(json.dumps({"params": base64.b64encode(flat.tobytes()).decode("ascii")}) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    with Path(path).open("r", encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("schema") != CKPT_SCHEMA:
        raise SchemaError(f"{path}: not a {CKPT_SCHEMA} checkpoint")
    head = lines[0]
    arch = head["arch"]
    params = init_params(arch["obs_dim"], arch["n_tasks"], arch["d"], arch["B"],
                         hidden=arch["hidden"], seed=head["seed"], dropout_p=head["dropout_p"],
                         obs_mean=head["obs_mean"], obs_scale=head["obs_scale"], zero=True)
    flat = np.frombuffer(base64.b64decode(lines[1]["params"]), dtype="<f8")
    offset = 0
    for name in PARAM_NAMES:
        arr = getattr(params, name)
        if offset + arr.size > flat.size:
            raise SchemaError(f"{path}: parameter array too short for {arch}")
        arr[...] = flat[offset:offset + arr.size].reshape(arr.shape)
        offset += arr.size
    if offset != flat.size:
        raise SchemaError(f"{path}: parameter array length does not match {arch}")
    return Checkpoint(params, head["step"], head["train_loss"], head["heldout_error"])
