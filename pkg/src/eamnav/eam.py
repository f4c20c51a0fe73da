"""Three-layer environmental attribute map built from agent observations.

Layers: per-cell object class distributions (exponentially averaged
detections), attribute embeddings with confidence and provenance (grounded
scene classifications spread by neighborhood aggregation and completed by
diffusion predictions), and exploration states with frontier bookkeeping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import simcore
from .grounding import (
    EmbeddingModel,
    SceneDescription,
    classify_scene,
    refine_description_indices,
)
from .worldgen import N_ENV_CLASSES, N_OBJECTS, N_ROOM_CATEGORIES

_EAM_MAGIC = b"eamnav-eam/1\n"


class Explore(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2
    FRONTIER = 3  # free cell 4-adjacent to unknown


class Provenance(IntEnum):
    # ordered by precedence: transitions only go up, except that
    # propagation freely rewrites propagated cells
    UNOBSERVED = 0
    PREDICTED = 1
    PROPAGATED = 2
    SEEDED = 3


@dataclass(frozen=True)
class PropagationConfig:
    decay: float = 0.5  # per-ring attenuation
    iterations: int = 8
    wall_attenuation: float = 0.0  # 0 = occupied cells block propagation
    renormalize: bool = True

    def validate(self) -> None:
        if not (0.0 < self.decay < 1.0):
            raise ValueError("decay must be in (0, 1)")
        if not (0.0 <= self.wall_attenuation <= 1.0):
            raise ValueError("wall_attenuation must be in [0, 1]")


@dataclass
class Eam:
    width: int
    height: int
    object_layer: np.ndarray  # (H, W, K) float32
    attribute_layer: np.ndarray  # (H, W, d) float32
    confidence: np.ndarray  # (H, W) float32
    provenance: np.ndarray  # (H, W) uint8
    exploration: np.ndarray  # (H, W) uint8
    anchors: np.ndarray  # (R, d) unit rows for attribute decoding

    @property
    def dim(self) -> int:
        return self.attribute_layer.shape[2]

    def known_free(self) -> np.ndarray:
        return (self.exploration == Explore.FREE) | (self.exploration == Explore.FRONTIER)

    def frontier_mask(self) -> np.ndarray:
        return self.exploration == Explore.FRONTIER

    def copy(self) -> "Eam":
        return Eam(
            self.width,
            self.height,
            self.object_layer.copy(),
            self.attribute_layer.copy(),
            self.confidence.copy(),
            self.provenance.copy(),
            self.exploration.copy(),
            self.anchors.copy(),
        )


def make_eam(
    width: int,
    height: int,
    anchors: np.ndarray,
    n_objects: int = N_OBJECTS,
) -> Eam:
    dim = anchors.shape[1]
    unit = anchors / np.maximum(np.linalg.norm(anchors, axis=1, keepdims=True), 1e-12)
    return Eam(
        width,
        height,
        np.zeros((height, width, n_objects), dtype=np.float32),
        np.zeros((height, width, dim), dtype=np.float32),
        np.zeros((height, width), dtype=np.float32),
        np.zeros((height, width), dtype=np.uint8),
        np.zeros((height, width), dtype=np.uint8),
        unit.astype(np.float32),
    )


def eam_for_model(width: int, height: int, model: EmbeddingModel) -> Eam:
    return make_eam(width, height, model.unit_anchors())


def _shifted(arr: np.ndarray, dy: int, dx: int, fill=0):
    """Array shifted by (dy, dx) with constant fill, no wraparound."""
    out = np.full_like(arr, fill)
    h, w = arr.shape[:2]
    ys = slice(max(0, dy), h + min(0, dy))
    xs = slice(max(0, dx), w + min(0, dx))
    ys_src = slice(max(0, -dy), h + min(0, -dy))
    xs_src = slice(max(0, -dx), w + min(0, -dx))
    out[ys, xs] = arr[ys_src, xs_src]
    return out


_OFFSETS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
_OFFSETS_4 = [(-1, 0), (1, 0), (0, -1), (0, 1)]


def recompute_frontiers(eam: Eam) -> None:
    """Frontier cells = free cells 4-adjacent to at least one unknown cell."""
    free = (eam.exploration == Explore.FREE) | (eam.exploration == Explore.FRONTIER)
    unknown = eam.exploration == Explore.UNKNOWN
    adj_unknown = np.zeros_like(unknown)
    for dy, dx in _OFFSETS_4:
        adj_unknown |= _shifted(unknown, dy, dx, fill=False)
    eam.exploration[free & adj_unknown] = Explore.FRONTIER
    eam.exploration[free & ~adj_unknown] = Explore.FREE


def integrate_observation(
    eam: Eam, obs: simcore.Observation, ema_rate: float = 0.5
) -> Eam:
    """Project depth rays into exploration states and detections into the
    object layer, then refresh the frontier set. Mutates and returns `eam`."""
    free_cells, occ_cells = simcore.replay_rays(obs)
    exp = eam.exploration
    if len(free_cells):
        fx = free_cells[:, 0]
        fy = free_cells[:, 1]
        ok = (fx >= 0) & (fx < eam.width) & (fy >= 0) & (fy < eam.height)
        fx, fy = fx[ok], fy[ok]
        keep = exp[fy, fx] != Explore.OCCUPIED
        exp[fy[keep], fx[keep]] = np.maximum(
            exp[fy[keep], fx[keep]], np.uint8(Explore.FREE)
        )
    if len(occ_cells):
        ox = occ_cells[:, 0]
        oy = occ_cells[:, 1]
        ok = (ox >= 0) & (ox < eam.width) & (oy >= 0) & (oy < eam.height)
        exp[oy[ok], ox[ok]] = Explore.OCCUPIED
    for det in obs.detections:
        x, y = det.cell
        if exp[y, x] != Explore.OCCUPIED:
            exp[y, x] = max(exp[y, x], np.uint8(Explore.FREE))
        vec = eam.object_layer[y, x]
        target = np.zeros_like(vec)
        target[det.class_id] = 1.0
        rate = ema_rate * det.confidence
        eam.object_layer[y, x] = vec + rate * (target - vec)
    recompute_frontiers(eam)
    return eam


def ground_attributes(
    eam: Eam,
    model: EmbeddingModel,
    obs: simcore.Observation,
    min_objects: int = 3,
) -> bool:
    """Classify the refined scene description and seed attribute embeddings
    at the retained detection cells. Frames with fewer than `min_objects`
    detections are skipped. Returns True when anything was seeded."""
    dets = obs.detections
    if len(dets) < min_objects:
        return False
    desc = SceneDescription(tuple(d.class_id for d in dets))
    kept = refine_description_indices(desc, model)
    refined = SceneDescription(tuple(desc.object_ids[i] for i in kept))
    probs = classify_scene(model, refined)
    mix = probs.astype(np.float32) @ eam.anchors
    norm = float(np.linalg.norm(mix))
    if norm < 1e-12:
        return False
    embedding = mix / norm
    conf = float(probs.max())
    seeded = False
    for i in kept:
        x, y = dets[i].cell
        if eam.provenance[y, x] == Provenance.SEEDED and eam.confidence[y, x] >= conf:
            continue
        eam.attribute_layer[y, x] = embedding
        eam.confidence[y, x] = conf
        eam.provenance[y, x] = Provenance.SEEDED
        seeded = True
    return seeded


def propagate_attributes(eam: Eam, cfg: PropagationConfig) -> Eam:
    """Iterative neighborhood aggregation of attribute embeddings.

    Each iteration adds eta/8-weighted donations from 8-connected neighbors
    that carry observed attributes (seeded or propagated, on non-unknown
    cells). Edges touching occupied cells are scaled by wall_attenuation;
    unknown cells receive only within one ring of explored space. Nonzero
    vectors are renormalized per iteration, seeded cells stay clamped, and
    confidence decays by eta per ring. Mutates and returns `eam`."""
    cfg.validate()
    seeded = eam.provenance == Provenance.SEEDED
    if not seeded.any():
        return eam
    seed_vecs = eam.attribute_layer[seeded].copy()
    seed_conf = eam.confidence[seeded].copy()

    unknown = eam.exploration == Explore.UNKNOWN
    occupied = eam.exploration == Explore.OCCUPIED
    ring1 = np.zeros_like(unknown)
    for dy, dx in _OFFSETS_8:
        ring1 |= _shifted(~unknown, dy, dx, fill=False)
    receiver_gate = np.where(
        unknown,
        np.where(ring1, 1.0, 0.0),
        np.where(occupied, cfg.wall_attenuation, 1.0),
    ).astype(np.float32)

    w_base = cfg.decay / 8.0
    for _ in range(cfg.iterations):
        donor = (eam.provenance >= Provenance.PROPAGATED) & ~unknown
        donor_gate = np.where(occupied, cfg.wall_attenuation, 1.0) * donor
        contrib = np.zeros_like(eam.attribute_layer)
        best_nb_conf = np.zeros_like(eam.confidence)
        for dy, dx in _OFFSETS_8:
            gate = _shifted((donor_gate).astype(np.float32), dy, dx)
            vecs = _shifted(eam.attribute_layer, dy, dx)
            confs = _shifted(eam.confidence * donor, dy, dx)
            w = (w_base * gate * receiver_gate).astype(np.float32)
            contrib += vecs * w[:, :, None]
            best_nb_conf = np.maximum(best_nb_conf, confs * (gate > 0) * (receiver_gate > 0))
        eam.attribute_layer += contrib
        touched = (np.abs(contrib).sum(axis=2) > 0) & ~seeded
        if cfg.renormalize:
            norms = np.linalg.norm(eam.attribute_layer, axis=2, keepdims=True)
            nz = norms[:, :, 0] > 1e-12
            eam.attribute_layer[nz] /= norms[nz]
        cand_conf = (cfg.decay * best_nb_conf).astype(np.float32)
        gain = touched & (cand_conf > eam.confidence)
        eam.confidence[gain] = cand_conf[gain]
        upgrade = touched & (eam.provenance < Provenance.PROPAGATED)
        eam.provenance[upgrade] = Provenance.PROPAGATED
        # seeded cells clamp to their seed value
        eam.attribute_layer[seeded] = seed_vecs
        eam.confidence[seeded] = seed_conf
    return eam


def fuse_prediction(
    eam: Eam,
    samples: list[np.ndarray],
    category_to_anchor: np.ndarray | None = None,
) -> Eam:
    """Write ensemble room-category frequencies into unexplored cells.

    Only cells that are unknown in the exploration layer and not already
    seeded or propagated are touched: their embedding becomes the
    frequency-weighted anchor mix, confidence the top-category frequency,
    provenance `predicted`. Cells whose samples are all wall/outside get no
    attribute. Mutates and returns `eam`."""
    if not samples:
        raise ValueError("need at least one completed sample")
    for s in samples:
        if s.shape[1] != eam.height or s.shape[2] != eam.width:
            raise ValueError(
                f"sample frame {s.shape[1:]} does not match eam {(eam.height, eam.width)}"
            )
    if category_to_anchor is None:
        category_to_anchor = np.arange(N_ROOM_CATEGORIES)
    S = len(samples)
    counts = np.zeros_like(samples[0])
    for s in samples:
        one_hot = np.zeros_like(s)
        idx = s.argmax(axis=0)
        one_hot[idx, np.arange(s.shape[1])[:, None], np.arange(s.shape[2])[None, :]] = 1.0
        counts += one_hot
    room_counts = counts[: len(category_to_anchor)]  # (n_room, H, W)
    room_mass = room_counts.sum(axis=0)
    writable = (
        (eam.exploration == Explore.UNKNOWN)
        & (eam.provenance <= Provenance.PREDICTED)
        & (room_mass > 0)
    )
    anchors = eam.anchors[category_to_anchor]  # (n_room, d)
    mix = np.einsum("chw,cd->hwd", room_counts, anchors)
    norms = np.linalg.norm(mix, axis=2, keepdims=True)
    nz = norms[:, :, 0] > 1e-12
    write = writable & nz
    eam.attribute_layer[write] = (mix / np.maximum(norms, 1e-12))[write]
    eam.confidence[write] = (room_counts.max(axis=0) / S)[write]
    eam.provenance[write] = Provenance.PREDICTED
    return eam


def attribute_argmax_map(eam: Eam) -> np.ndarray:
    """Nearest anchor per observed cell by cosine; -1 where unobserved.

    Ties break to the lowest class id."""
    out = np.full((eam.height, eam.width), -1, dtype=np.int16)
    has = eam.provenance != Provenance.UNOBSERVED
    vecs = eam.attribute_layer[has]
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    ok = norms[:, 0] > 1e-12
    cos = (vecs / np.maximum(norms, 1e-12)) @ eam.anchors.T
    best = cos.argmax(axis=1).astype(np.int16)
    best[~ok] = -1
    out[has] = best
    return out


# -- snapshots -----------------------------------------------------------------

def save_eam_bytes(eam: Eam) -> bytes:
    k = eam.object_layer.shape[2]
    r = eam.anchors.shape[0]
    head = _EAM_MAGIC + struct.pack("<IIIII", eam.width, eam.height, k, eam.dim, r)
    parts = [
        eam.exploration.astype("<u1").tobytes(),
        eam.provenance.astype("<u1").tobytes(),
        eam.confidence.astype("<f4").tobytes(),
        eam.attribute_layer.astype("<f4").tobytes(),
        eam.object_layer.astype("<f4").tobytes(),
        eam.anchors.astype("<f4").tobytes(),
    ]
    return head + b"".join(parts)


def load_eam_bytes(data: bytes) -> Eam:
    if not data.startswith(_EAM_MAGIC):
        raise ValueError("not an eamnav-eam/1 snapshot")
    off = len(_EAM_MAGIC)
    w, h, k, d, r = struct.unpack_from("<IIIII", data, off)
    off += struct.calcsize("<IIIII")

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.copy()

    exploration = take("<u1", h * w, (h, w))
    provenance = take("<u1", h * w, (h, w))
    confidence = take("<f4", h * w, (h, w))
    attribute = take("<f4", h * w * d, (h, w, d))
    objects = take("<f4", h * w * k, (h, w, k))
    anchors = take("<f4", r * d, (r, d))
    return Eam(w, h, objects, attribute, confidence, provenance, exploration, anchors)


def save_eam(eam: Eam, path) -> None:
    with open(path, "wb") as f:
        f.write(save_eam_bytes(eam))


def load_eam(path) -> Eam:
    with open(path, "rb") as f:
        return load_eam_bytes(f.read())
