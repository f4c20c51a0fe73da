"""Indexed-color raster output for plans, attribute maps and trajectories.

Every cell category maps to a fixed palette index equal to its code, so a
rendered ground-truth plan decodes back to category codes exactly. Extra
indices cover unknown space, unattributed free cells, frontier overlay and
trajectories. All output is deterministic: same input, same bytes.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image, ImageDraw

from .eam import Eam, Explore, Provenance, attribute_argmax_map
from .worldgen import N_CELL_CATEGORIES, FloorPlan

# palette index == cell category code for 0..15
CATEGORY_COLORS = [
    (141, 211, 199),  # bedroom
    (255, 179, 0),    # kitchen
    (128, 177, 211),  # bathroom
    (251, 128, 114),  # livingroom
    (253, 180, 98),   # diningroom
    (252, 205, 229),  # corridor
    (179, 222, 105),  # office
    (188, 128, 189),  # closet
    (204, 235, 197),  # laundry
    (255, 237, 111),  # garage
    (190, 186, 218),  # storage
    (217, 217, 217),  # lobby
    (166, 206, 227),  # balcony
    (178, 223, 138),  # gym
    (64, 64, 64),     # wall
    (20, 20, 30),     # outside
]
IDX_UNKNOWN = 16
IDX_FREE = 17
IDX_FRONTIER = 18
IDX_TRAJECTORY = 19
IDX_AGENT = 20
EXTRA_COLORS = {
    IDX_UNKNOWN: (90, 90, 100),
    IDX_FREE: (235, 235, 235),
    IDX_FRONTIER: (255, 0, 255),
    IDX_TRAJECTORY: (255, 40, 40),
    IDX_AGENT: (0, 255, 0),
}


def _palette() -> list[int]:
    flat = []
    for rgb in CATEGORY_COLORS:
        flat.extend(rgb)
    for i in range(16, 256):
        flat.extend(EXTRA_COLORS.get(i, (0, 0, 0)))
    return flat


def _indexed_png(indices: np.ndarray, scale: int) -> bytes:
    img = Image.fromarray(indices.astype(np.uint8), mode="P")
    img.putpalette(_palette())
    if scale > 1:
        img = img.resize((indices.shape[1] * scale, indices.shape[0] * scale), Image.NEAREST)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def decode_png_indices(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    return np.asarray(img)


def render_plan_png(plan: FloorPlan, scale: int = 8, objects: bool = False) -> bytes:
    indices = plan.cells.astype(np.uint8).copy()
    if objects:
        for obj in plan.objects:
            indices[obj.cell[1], obj.cell[0]] = IDX_TRAJECTORY
    return _indexed_png(indices, scale)


def eam_indices(eam: Eam) -> np.ndarray:
    """Per-cell palette indices: argmax class where observed, overlays on top."""
    out = np.full((eam.height, eam.width), IDX_UNKNOWN, dtype=np.uint8)
    argmax = attribute_argmax_map(eam)
    has_attr = (eam.provenance != Provenance.UNOBSERVED) & (argmax >= 0)
    out[has_attr] = np.clip(argmax[has_attr], 0, N_CELL_CATEGORIES - 1).astype(np.uint8)
    free_plain = eam.known_free() & ~has_attr
    out[free_plain] = IDX_FREE
    out[eam.exploration == Explore.OCCUPIED] = 14  # wall color
    out[eam.frontier_mask()] = IDX_FRONTIER
    return out


def render_eam_png(eam: Eam, scale: int = 8, trajectory=None) -> bytes:
    indices = eam_indices(eam)
    if trajectory:
        for cell in trajectory:
            indices[cell[1], cell[0]] = IDX_TRAJECTORY
        x, y = trajectory[-1]
        indices[y, x] = IDX_AGENT
    return _indexed_png(indices, scale)


def render_loss_curve_png(curve, width: int = 480, height: int = 320) -> bytes:
    """Train/validation loss polylines on a plain raster."""
    img = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    if curve:
        series = [
            ([row[1] for row in curve], (200, 60, 60)),
            ([row[2] for row in curve if len(row) > 2 and np.isfinite(row[2])], (60, 60, 200)),
        ]
        finite = [v for vals, _ in series for v in vals if np.isfinite(v)]
        if finite:
            lo, hi = min(finite), max(finite)
            span = (hi - lo) or 1.0
            for vals, color in series:
                if len(vals) < 2:
                    continue
                pts = [
                    (
                        int(i / (len(vals) - 1) * (width - 20)) + 10,
                        height - 10 - int((v - lo) / span * (height - 20)),
                    )
                    for i, v in enumerate(vals)
                ]
                draw.line(pts, fill=color, width=2)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
