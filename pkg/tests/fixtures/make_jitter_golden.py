"""Regenerate jitter_light_8x8.json (only when the jitter algorithm changes on purpose)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from vlamia.core import PixelObs, substream
from vlamia.mitigations import defend_obs_jitter


def synthetic_grid() -> np.ndarray:
    i, j, c = np.meshgrid(np.arange(8), np.arange(8), np.arange(3), indexing="ij")
    return ((i * 8 + j) * (c + 1) % 17) / 16.0


def golden() -> np.ndarray:
    out = defend_obs_jitter(PixelObs(synthetic_grid()), "light", substream(7, "golden/jitter"))
    return out.pixels


if __name__ == "__main__":
    path = Path(__file__).with_name("jitter_light_8x8.json")
    path.write_text(json.dumps({"strength": "light", "seed": 7, "shape": [8, 8, 3],
                                "pixels": golden().ravel().tolist()}) + "\n")
