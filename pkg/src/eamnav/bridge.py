"""Resampling bridge between the agent map and the completion model.

The completion model works at its training resolution; the agent map is
reduced to a known-category tensor plus an unknown mask (nearest-neighbor),
inpainted, and the samples are expanded back onto the map frame.
"""

from __future__ import annotations

import numpy as np

from .completion import repaint_inpaint
from .eam import Eam, Explore, Provenance, attribute_argmax_map
from .worldgen import N_CELL_CATEGORIES, N_ROOM_CATEGORIES, WALL


def _nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    return np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int)


def eam_to_known_tensor(eam: Eam, resolution: int = 32):
    """(known one-hot (C, res, res), mask (res, res)) from the current map.

    Occupied cells condition as walls; free cells with seeded or propagated
    attributes condition as their argmax room category; everything else is
    left for the model to fill (mask = 1).
    """
    cats = np.full((eam.height, eam.width), -1, dtype=np.int16)
    cats[eam.exploration == Explore.OCCUPIED] = WALL
    argmax = attribute_argmax_map(eam)
    grounded = (
        (eam.provenance >= Provenance.PROPAGATED)
        & eam.known_free()
        & (argmax >= 0)
        & (argmax < N_ROOM_CATEGORIES)
    )
    cats[grounded] = argmax[grounded]

    ys = _nearest_indices(resolution, eam.height)
    xs = _nearest_indices(resolution, eam.width)
    small = cats[np.ix_(ys, xs)]
    mask = (small < 0).astype(np.float64)
    known = np.zeros((N_CELL_CATEGORIES, resolution, resolution), dtype=np.float32)
    for c in range(N_CELL_CATEGORIES):
        known[c] = small == c
    return known, mask


def upsample_nearest(sample: np.ndarray, height: int, width: int) -> np.ndarray:
    ys = _nearest_indices(height, sample.shape[1])
    xs = _nearest_indices(width, sample.shape[2])
    return sample[:, ys[:, None], xs[None, :]]


def predict_completions(
    eam: Eam,
    denoiser,
    schedule,
    n_samples: int,
    rng: np.random.Generator,
    resolution: int = 32,
) -> list[np.ndarray]:
    """Inpaint the unobserved map regions; samples come back in map frame."""
    known, mask = eam_to_known_tensor(eam, resolution)
    samples = repaint_inpaint(denoiser, known, mask, schedule, n_samples, rng)
    return [upsample_nearest(s, eam.height, eam.width) for s in samples]
