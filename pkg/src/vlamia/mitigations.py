"""Inference-time defenses against action-based membership inference.

Three hook points are available: the observation before the policy sees it
(jitter), the token distribution during decoding (temperature + nucleus
sampling, MC dropout), and the continuous action after detokenisation
(Gaussian noise, rounding).  Noise and rounding never touch the last action
dimension, which is the gripper.
"""
from __future__ import annotations

import dataclasses
from collections.abc import Sequence

import numpy as np
from scipy.special import log_softmax

from .core import (PROMPT_ORIGINAL, InferenceLog, Observation, PixelObs, Trajectory,
                   VectorObs)
from .surrogate import (ActionTokenizer, DecodeConfig, PolicyParams, decode, dropout_mask,
                        run_inference)

# Reference settings for the image-jitter strengths:
# (minimum crop area fraction, brightness/contrast range, pixel-noise sigma).
JITTER_STRENGTHS = {
    "light": (0.75, 0.20, 0.05),
    "medium": (0.60, 0.35, 0.10),
    "strong": (0.45, 0.50, 0.20),
}

GAUSSIAN_SIGMAS = (0.10, 0.20, 0.50)
ROUNDING_DELTAS = (0.50, 1.00, 2.00)
# Table-scale deltas flatten normalised [-1, 1] actions, so sweeps default to these.
NORMALISED_ROUNDING_DELTAS = (0.05, 0.10, 0.25)
TEMPERATURES = (1.10, 2.00, 3.00)
TOP_P = 0.95
DROPOUT_PS = (0.10, 0.20, 0.40)


@dataclasses.dataclass(frozen=True)
class JitterSpec:
    min_crop: float
    color_range: float
    noise_sigma: float
    vector_sigma: float | None = None

    @classmethod
    def named(cls, strength: str) -> JitterSpec:
        try:
            return cls(*JITTER_STRENGTHS[strength])
        except KeyError:
            raise ValueError(f"unknown jitter strength {strength!r}") from None


@dataclasses.dataclass(frozen=True)
class DefenseSpec:
    """One defense with its parameters.

    ``kind`` is one of ``none``, ``gaussian`` (``sigma``), ``round``
    (``delta``), ``decode`` (``temperature``, ``top_p``), ``jitter``
    (``jitter``), ``mcdropout`` (``p``).
    """

    kind: str = "none"
    sigma: float = 0.0
    delta: float = 0.0
    temperature: float = 1.0
    top_p: float = TOP_P
    jitter: JitterSpec | None = None
    strength: str | None = None
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "round", "decode", "jitter", "mcdropout"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.sigma < 0 or self.delta < 0:
            raise ValueError("sigma and delta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")
        if self.kind == "jitter" and self.jitter is None:
            raise ValueError("jitter defense needs a JitterSpec")

    @property
    def tag(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian:{self.sigma!r}"
        if self.kind == "round":
            return f"round:{self.delta!r}"
        if self.kind == "decode":
            return f"decode:T={self.temperature!r},p={self.top_p!r}"
        if self.kind == "jitter":
            if self.strength is not None:
                return f"jitter:{self.strength}"
            j = self.jitter
            return (f"jitter:crop={j.min_crop!r},color={j.color_range!r},"
                    f"noise={j.noise_sigma!r},vector={j.vector_sigma!r}")
        if self.kind == "mcdropout":
            return f"mcdropout:{self.p!r}"
        return "none"

    @property
    def label(self) -> str:
        """Name used in reports; jitter on vector observations is a stand-in, so it says so."""
        return f"vector-{self.tag}" if self.kind == "jitter" else self.tag

    def to_json(self) -> dict:
        return {"tag": self.tag, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> DefenseSpec:
        return parse_defense(obj["tag"], seed=obj.get("seed", 0))


def parse_defense(text: str, seed: int = 0) -> DefenseSpec:
    """Parse ``gaussian:0.2 | round:0.1 | decode:T=2.0,p=0.95 | jitter:light |
    mcdropout:0.2 | none``.

    Jitter also accepts a bare vector sigma (``jitter:0.1``) or explicit keys
    (``jitter:crop=0.6,color=0.35,noise=0.1,vector=0.05``).
    """
    kind, _, arg = text.strip().partition(":")
    try:
        if kind == "none":
            return DefenseSpec(seed=seed)
        if kind == "gaussian":
            return DefenseSpec("gaussian", sigma=float(arg), seed=seed)
        if kind == "round":
            return DefenseSpec("round", delta=float(arg), seed=seed)
        if kind == "mcdropout":
            return DefenseSpec("mcdropout", p=float(arg), seed=seed)
        if kind == "decode":
            kv = dict(part.split("=", 1) for part in arg.split(",") if part)
            return DefenseSpec("decode", temperature=float(kv.get("T", 1.0)),
                               top_p=float(kv.get("p", TOP_P)), seed=seed)
        if kind == "jitter":
            if arg in JITTER_STRENGTHS:
                return DefenseSpec("jitter", jitter=JitterSpec.named(arg), strength=arg,
                                   seed=seed)
            if "=" not in arg:
                sigma = float(arg)
                return DefenseSpec("jitter", jitter=JitterSpec(1.0, 0.0, sigma, sigma),
                                   seed=seed)
            kv = dict(part.split("=", 1) for part in arg.split(",") if part)
            vec = kv.get("vector")
            spec = JitterSpec(float(kv.get("crop", 1.0)), float(kv.get("color", 0.0)),
                              float(kv.get("noise", 0.0)),
                              None if vec in (None, "None") else float(vec))
            return DefenseSpec("jitter", jitter=spec, seed=seed)
    except ValueError as exc:
        raise ValueError(f"bad defense {text!r}: {exc}") from None
    raise ValueError(f"unknown defense {text!r}")


# --------------------------------------------------------------------------
# action-side transforms

def defend_gaussian(action, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add ``N(0, sigma^2)`` noise to every dimension except the last (gripper)."""
    a = np.array(action, dtype=np.float64)
    if a.size < 2:
        raise ValueError("need at least one motion dimension plus the gripper")
    if sigma > 0:
        a[:-1] += sigma * rng.standard_normal(a.size - 1)
    return a


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # floor(|x| + 0.5) would round 0.49999999999999994 up; the fraction is exact.
    whole = np.trunc(x)
    return whole + np.sign(x) * (np.abs(x - whole) >= 0.5)


def defend_round(action, delta: float) -> np.ndarray:
    """Snap motion dimensions to multiples of ``delta``, ties away from zero."""
    a = np.array(action, dtype=np.float64)
    if a.size < 2:
        raise ValueError("need at least one motion dimension plus the gripper")
    if delta > 0:
        a[:-1] = _round_half_away(a[:-1] / delta) * delta
    return a


# --------------------------------------------------------------------------
# decode-side transforms

def temperature_scale(logprob_rows: np.ndarray, temperature: float) -> np.ndarray:
    """Renormalised ``p^(1/T)`` in log space."""
    return log_softmax(np.asarray(logprob_rows, dtype=np.float64) / temperature, axis=-1)


def nucleus_sample(logprob_rows: np.ndarray, top_p: float, uniforms: np.ndarray
                   ) -> np.ndarray:
    """Sample one token per row from its top-p nucleus by inverse CDF.

    The nucleus is the shortest prefix of tokens, by descending probability,
    whose mass reaches ``top_p``; it always contains the argmax.
    """
    rows = np.atleast_2d(logprob_rows)
    probs = np.exp(rows - rows.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    size = np.argmax(cum >= top_p * (1.0 - 1e-12), axis=1) + 1
    kept = np.where(np.arange(rows.shape[1])[None, :] < size[:, None], sorted_p, 0.0)
    kept_cum = np.cumsum(kept, axis=1)
    u = np.asarray(uniforms, dtype=np.float64).reshape(-1) * kept_cum[np.arange(rows.shape[0]),
                                                                      size - 1]
    pick = np.minimum((kept_cum <= u[:, None]).sum(axis=1), size - 1)
    return order[np.arange(rows.shape[0]), pick]


def defend_decode(logprob_row, temperature: float, top_p: float,
                  rng: np.random.Generator) -> int:
    """Temperature-scaled nucleus sampling of a single token."""
    scaled = temperature_scale(logprob_row, temperature)
    return int(nucleus_sample(scaled[None, :], top_p, np.array([rng.random()]))[0])


# --------------------------------------------------------------------------
# observation-side transforms

def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize an ``(h, w, c)`` grid with pixel-centre aligned bilinear sampling."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def _random_crop(pixels: np.ndarray, min_area: float, rng: np.random.Generator) -> np.ndarray:
    H, W = pixels.shape[:2]
    if min_area >= 1.0:
        return pixels
    area = rng.uniform(min_area, 1.0)
    aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
    ch = int(np.clip(round(H * np.sqrt(area / aspect)), 1, H))
    cw = int(np.clip(round(W * np.sqrt(area * aspect)), 1, W))
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    return bilinear_resize(pixels[top:top + ch, left:left + cw], H, W)


def defend_obs_jitter(obs: Observation, spec: JitterSpec | str,
                      rng: np.random.Generator) -> Observation:
    """Randomly perturb an observation.

    Pixel grids get a random crop (area fraction at least ``min_crop``)
    resized back, a contrast factor and brightness offset drawn uniformly
    within ``+-color_range``, Gaussian pixel noise, and clipping to [0, 1].
    Vector observations get additive Gaussian noise of ``vector_sigma``
    (falling back to ``noise_sigma``) as a stand-in for image jitter.
    """
    if isinstance(spec, str):
        spec = JitterSpec.named(spec)
    if isinstance(obs, VectorObs):
        sigma = spec.noise_sigma if spec.vector_sigma is None else spec.vector_sigma
        if sigma <= 0:
            return obs
        return VectorObs(obs.values + sigma * rng.standard_normal(obs.values.size))
    if not isinstance(obs, PixelObs):
        raise TypeError(f"unsupported observation type {type(obs).__name__}")
    x = _random_crop(np.array(obs.pixels), spec.min_crop, rng)
    if spec.color_range > 0:
        contrast = rng.uniform(1 - spec.color_range, 1 + spec.color_range)
        brightness = rng.uniform(-spec.color_range, spec.color_range)
        x = x * contrast + brightness
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * rng.standard_normal(x.shape)
    return PixelObs(np.clip(x, 0.0, 1.0))


# --------------------------------------------------------------------------
# policy-level defenses

def defend_mc_dropout(params: PolicyParams, observation, instruction_id: int, p: float,
                      rng: np.random.Generator,
                      tokenizer: ActionTokenizer | None = None) -> np.ndarray:
    """Greedy action with a freshly sampled dropout mask on the embedding."""
    if tokenizer is None:
        tokenizer = ActionTokenizer(params.bins, ((-1.0, 1.0),) * params.action_dim)
    obs = np.asarray(observation, dtype=np.float64).reshape(1, -1)
    mask = dropout_mask(rng, (1, params.hidden), p)
    tokens, _ = decode(params, obs, np.array([instruction_id]), mask)
    return tokenizer.detokenize(tokens[0])


def decode_config(defense: DefenseSpec) -> DecodeConfig:
    """Translate a defense into surrogate inference hooks.

    Identity settings (zero sigma, delta, noise, or dropout) install no hook,
    so their logs are bit-identical to undefended ones.
    """
    kw = {"seed": defense.seed, "tag": defense.tag}
    if defense.kind == "gaussian" and defense.sigma > 0:
        return DecodeConfig(action_hook=lambda a, g: defend_gaussian(a, defense.sigma, g), **kw)
    if defense.kind == "round" and defense.delta > 0:
        return DecodeConfig(action_hook=lambda a, g: defend_round(a, defense.delta), **kw)
    if defense.kind == "decode":
        return DecodeConfig(temperature=defense.temperature, top_p=defense.top_p,
                            token_sampler=nucleus_sample, **kw)
    if defense.kind == "mcdropout" and defense.p > 0:
        return DecodeConfig(mc_dropout_p=defense.p, **kw)
    if defense.kind == "jitter":
        spec = defense.jitter
        sigma = spec.noise_sigma if spec.vector_sigma is None else spec.vector_sigma
        if sigma > 0:
            return DecodeConfig(
                obs_hook=lambda o, g: defend_obs_jitter(VectorObs(o), spec, g).values, **kw)
    return DecodeConfig(**kw)


def run_defended_inference(params: PolicyParams, trajectories: Sequence[Trajectory],
                           keys: Sequence[tuple[str, int]], defense: DefenseSpec,
                           tokenizer: ActionTokenizer | None = None,
                           prompt_mode: str = PROMPT_ORIGINAL, model_tag: str = "",
                           workers: int = 1) -> InferenceLog:
    """Undefended-schema log whose header records the defense.

    Probability rows are the (temperature-scaled) distributions the deployed
    system decodes from, so attacks only ever see the defended interface.
    """
    records = run_inference(params, trajectories, keys, prompt_mode,
                            decode_config(defense), tokenizer, workers)
    header = {"model_tag": model_tag, "prompt_mode": prompt_mode,
              "action_dim": params.action_dim, "vocab_size": params.bins,
              "defense": defense.to_json(), "defense_label": defense.label}
    return InferenceLog(header=header, records=records)
