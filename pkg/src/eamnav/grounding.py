"""Trainable scene-description embedder for environmental attribute grounding.

A bag-of-objects stand-in for a fine-tuned sentence encoder: object rows are
mean-pooled and L2-normalized into a description embedding, classified by
cosine against one learned anchor row per environment class. Training uses
the multiple-negatives ranking loss over (anchor class, positive description)
batches with in-batch negatives; triplets are mined from labeled scenes by
thresholding per-object accuracy of the untrained base model. All gradients
are analytic and checked against finite differences in the test suite.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .worldgen import ENV_CLASSES, N_ENV_CLASSES, N_OBJECTS, OBJECT_VOCAB, PriorTable

log = logging.getLogger(__name__)

_EMBED_MAGIC = b"eamnav-embed/1\n"


@dataclass(frozen=True)
class SceneDescription:
    """Ordered multiset of object class ids, concatenated in detection order."""

    object_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.object_ids)


@dataclass(frozen=True)
class LabeledScene:
    """A scene description with per-object ground-truth attributes."""

    object_ids: tuple[int, ...]
    labels: tuple[int, ...]  # true environment class per object
    region: int  # environment class of the observing pose's room

    def description(self) -> SceneDescription:
        return SceneDescription(self.object_ids)


@dataclass(frozen=True)
class Triplet:
    anchor: int  # environment class id
    positive: SceneDescription
    negatives: tuple[SceneDescription, ...]


@dataclass
class EmbeddingModel:
    obj_table: np.ndarray  # (K, d) float64
    anchor_table: np.ndarray  # (R, d) float64
    temperature: float = 1.0

    @property
    def dim(self) -> int:
        return self.obj_table.shape[1]

    @property
    def n_classes(self) -> int:
        return self.anchor_table.shape[0]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.obj_table.copy(), self.anchor_table.copy(), self.temperature)

    def unit_anchors(self) -> np.ndarray:
        norms = np.linalg.norm(self.anchor_table, axis=1, keepdims=True)
        return self.anchor_table / np.maximum(norms, 1e-12)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3  # table model; 100x the transformer-scale value
    warmup_fraction: float = 0.1
    batch_size: int = 16
    epochs: int = 50
    grad_clip: float = 0.2
    betas: tuple[float, float] = (0.9, 0.999)
    loss_scale: float = 20.0
    val_fraction: float = 0.15
    patience: int = 8

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError("warmup fraction must be in [0, 1)")


def make_random_model(seed: int, dim: int = 16, n_objects: int = N_OBJECTS,
                      n_classes: int = N_ENV_CLASSES) -> EmbeddingModel:
    """Random tables: the 'untrained random embedding' baseline."""
    rng = np.random.default_rng(seed)
    obj = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_objects, dim))
    anchors = rng.normal(0.0, 1.0, size=(n_classes, dim))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    return EmbeddingModel(obj, anchors)


def make_base_model(seed: int, priors: PriorTable, dim: int = 16,
                    prior_strength: float = 1.0, noise: float = 1.5) -> EmbeddingModel:
    """Base model with partial knowledge, standing in for a pretrained encoder.

    Anchor rows are seeded orthonormal directions; each object row mixes its
    room-affinity-weighted anchors with Gaussian noise, so per-object
    classification lands at moderate accuracy. Mining needs such a model:
    thresholding description accuracy against a purely random model would
    yield no positives at all.
    """
    rng = np.random.default_rng(seed)
    n_classes, n_objects = priors.p_room_given_obj.shape[1], priors.p_room_given_obj.shape[0]
    if n_classes > dim:
        raise ValueError("need dim >= number of classes for orthonormal anchors")
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    anchors = q[:n_classes]
    obj = prior_strength * priors.p_room_given_obj @ anchors
    obj += noise * rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_objects, dim))
    return EmbeddingModel(obj, anchors.copy())


def embed_description(model: EmbeddingModel, desc: SceneDescription) -> np.ndarray:
    """Mean of the description's object rows, L2-normalized."""
    if len(desc) == 0:
        raise ValueError("cannot embed an empty description")
    u = model.obj_table[list(desc.object_ids)].mean(axis=0)
    return u / max(np.linalg.norm(u), 1e-12)


def classify_scene(model: EmbeddingModel, desc: SceneDescription) -> np.ndarray:
    """Probability vector over environment classes: softmax(cos / temperature)."""
    p = embed_description(model, desc)
    cos = model.unit_anchors() @ p
    z = cos / model.temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def description_accuracy(scene: LabeledScene, model: EmbeddingModel) -> float:
    """Fraction of objects whose singleton classification matches their label."""
    correct = 0
    for obj_id, label in zip(scene.object_ids, scene.labels):
        probs = classify_scene(model, SceneDescription((obj_id,)))
        if int(probs.argmax()) == label:
            correct += 1
    return correct / len(scene.object_ids)


def mnr_loss(
    model: EmbeddingModel,
    batch: list[tuple[int, SceneDescription]],
    scale: float = 20.0,
):
    """Multiple-negatives ranking loss with in-batch negatives.

    L = -(1/n) sum_i log softmax_j(scale * cos(a_i, p_j))_i, where the
    other positives in the batch serve as negatives for pair i. Returns
    (loss, grad_obj_table, grad_anchor_table) with analytic gradients.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    d = model.dim
    anchors = model.anchor_table
    a_norms = np.linalg.norm(anchors, axis=1)

    classes = np.array([c for c, _ in batch])
    a_hat = anchors[classes] / np.maximum(a_norms[classes], 1e-12)[:, None]

    means = np.zeros((n, d))
    inv_norms = np.zeros(n)
    for j, (_, desc) in enumerate(batch):
        if len(desc) == 0:
            raise ValueError("empty description in batch")
        u = model.obj_table[list(desc.object_ids)].mean(axis=0)
        nu = max(np.linalg.norm(u), 1e-12)
        means[j] = u
        inv_norms[j] = 1.0 / nu
    p = means * inv_norms[:, None]  # (n, d) unit embeddings

    s = scale * (a_hat @ p.T)  # (n, n)
    s_shift = s - s.max(axis=1, keepdims=True)
    exp_s = np.exp(s_shift)
    sigma = exp_s / exp_s.sum(axis=1, keepdims=True)
    loss = float(-(np.log(sigma[np.arange(n), np.arange(n)])).mean())

    # dL/ds_ij = (sigma_ij - delta_ij) / n
    g_s = (sigma - np.eye(n)) / n
    g_ahat = scale * (g_s @ p)  # (n, d)
    g_p = scale * (g_s.T @ a_hat)  # (n, d)

    grad_anchor = np.zeros_like(anchors)
    for i, c in enumerate(classes):
        a = anchors[c]
        na = max(a_norms[c], 1e-12)
        ah = a_hat[i]
        grad_anchor[c] += (g_ahat[i] - ah * (ah @ g_ahat[i])) / na

    grad_obj = np.zeros_like(model.obj_table)
    for j, (_, desc) in enumerate(batch):
        gu = (g_p[j] - p[j] * (p[j] @ g_p[j])) * inv_norms[j]
        share = gu / len(desc)
        for obj_id in desc.object_ids:
            grad_obj[obj_id] += share
    return loss, grad_obj, grad_anchor


def mine_triplets(
    scenes: list[LabeledScene],
    base_model: EmbeddingModel,
    n_negatives: int = 3,
    seed: int = 0,
    pos_threshold: float = 0.8,
    neg_threshold: float = 0.2,
    max_per_class: int = 200,
) -> list[Triplet]:
    """Select triplets by base-model description accuracy.

    Positives are canonical scenes of the anchor's region: accuracy >= 0.8
    against the base model and a majority of their objects truly belonging
    to the region (frames dominated by a neighboring room seen through a
    doorway are not representative anchors). Negatives come from the pool of
    scenes with accuracy <= 0.2 whose region differs from the anchor.
    Classes without positives are skipped with a warning.
    """
    rng = np.random.default_rng(seed)
    alphas = [description_accuracy(s, base_model) for s in scenes]

    def canonical(s: LabeledScene) -> bool:
        return sum(l == s.region for l in s.labels) * 2 >= len(s.labels)

    triplets: list[Triplet] = []
    n_classes = base_model.n_classes
    for r in range(n_classes):
        positives = [
            s for s, a in zip(scenes, alphas)
            if s.region == r and a >= pos_threshold and canonical(s)
        ]
        negatives = [s for s, a in zip(scenes, alphas) if s.region != r and a <= neg_threshold]
        if not positives:
            log.warning("mine_triplets: class %s has no positives, skipped", ENV_CLASSES[r] if r < len(ENV_CLASSES) else r)
            continue
        if not negatives:
            log.warning("mine_triplets: class %s has no negatives, skipped", ENV_CLASSES[r] if r < len(ENV_CLASSES) else r)
            continue
        if len(positives) > max_per_class:
            idx = rng.choice(len(positives), size=max_per_class, replace=False)
            positives = [positives[i] for i in idx]
        for pos in positives:
            neg_idx = rng.choice(len(negatives), size=min(n_negatives, len(negatives)), replace=False)
            triplets.append(
                Triplet(
                    r,
                    pos.description(),
                    tuple(negatives[i].description() for i in neg_idx),
                )
            )
    return triplets


def _max_anchor_cosine(model: EmbeddingModel, desc: SceneDescription) -> float:
    p = embed_description(model, desc)
    return float((model.unit_anchors() @ p).max())


def refine_description_greedy(desc: SceneDescription, model: EmbeddingModel) -> SceneDescription:
    """Drop objects whose removal most increases the best anchor similarity.

    One object is removed per iteration while a removal strictly improves
    max_r cos(embedding, anchor_r); stops at a fixpoint or a single object.
    """
    kept = refine_description_indices(desc, model)
    return SceneDescription(tuple(desc.object_ids[i] for i in kept))


def refine_description_indices(desc: SceneDescription, model: EmbeddingModel) -> list[int]:
    """Index-tracking variant of the greedy refiner (positions kept)."""
    if len(desc) == 0:
        raise ValueError("cannot refine an empty description")
    kept = list(range(len(desc)))
    ids = list(desc.object_ids)
    score = _max_anchor_cosine(model, SceneDescription(tuple(ids)))
    while len(kept) > 1:
        best_gain, best_pos = 0.0, None
        for pos in range(len(kept)):
            trial = tuple(ids[k] for t, k in enumerate(kept) if t != pos)
            trial_score = _max_anchor_cosine(model, SceneDescription(trial))
            gain = trial_score - score
            if gain > best_gain + 1e-12:
                best_gain, best_pos = gain, pos
        if best_pos is None:
            break
        kept.pop(best_pos)
        score += best_gain
    return kept


def triplet_evaluation(model: EmbeddingModel, triplets: list[Triplet]):
    """Mean anchor-positive cosine, mean anchor-negative cosine, and margin."""
    anchors = model.unit_anchors()
    ap, an = [], []
    for t in triplets:
        a = anchors[t.anchor]
        ap.append(float(a @ embed_description(model, t.positive)))
        for neg in t.negatives:
            an.append(float(a @ embed_description(model, neg)))
    ap_mean = float(np.mean(ap))
    an_mean = float(np.mean(an)) if an else 0.0
    return ap_mean, an_mean, ap_mean - an_mean


def _spread_batches(items: list, key, batch_size: int, rng: np.random.Generator):
    """Duplicate-free batches: no anchor class appears twice in one batch.

    Same-class pairs in a batch would act as false in-batch negatives, so a
    batch drains at most one item per class; cycles longer than batch_size
    are split.
    """
    groups: dict[int, list] = {}
    order = list(rng.permutation(len(items)))
    for i in order:
        groups.setdefault(key(items[i]), []).append(items[i])
    batches = []
    buckets = list(groups.values())
    while any(buckets):
        cycle = [b.pop() for b in buckets if b]
        for i in range(0, len(cycle), batch_size):
            batches.append(cycle[i:i + batch_size])
    return batches


def train_embedder(
    triplets: list[Triplet],
    config: TrainConfig,
    seed: int,
    init: EmbeddingModel | None = None,
    dim: int = 16,
):
    """Adam training with linear warmup, global-norm clipping, early stopping.

    Returns (model, curve) where curve is a list of (epoch, train_loss,
    val_loss) rows. Deterministic in (triplets, config, seed).
    """
    config.validate()
    if not triplets:
        raise ValueError("no triplets to train on")
    rng = np.random.default_rng(seed)
    model = init.copy() if init is not None else make_random_model(seed, dim=dim)

    pairs = [(t.anchor, t.positive) for t in triplets]
    n_val = max(1, int(len(pairs) * config.val_fraction)) if len(pairs) > 4 else 0
    perm = rng.permutation(len(pairs))
    val_pairs = [pairs[i] for i in perm[:n_val]]
    train_pairs = [pairs[i] for i in perm[n_val:]]
    if not train_pairs:
        train_pairs, val_pairs = val_pairs, []

    steps_per_epoch = max(1, (len(train_pairs) + config.batch_size - 1) // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup = max(1, int(total_steps * config.warmup_fraction))
    b1, b2 = config.betas
    m_obj = np.zeros_like(model.obj_table)
    v_obj = np.zeros_like(model.obj_table)
    m_anc = np.zeros_like(model.anchor_table)
    v_anc = np.zeros_like(model.anchor_table)

    def val_loss() -> float:
        if not val_pairs:
            return float("nan")
        loss, _, _ = mnr_loss(model, val_pairs, scale=config.loss_scale)
        return loss

    best = (np.inf, model.copy())
    bad_epochs = 0
    curve = []
    step = 0
    for epoch in range(config.epochs):
        batches = _spread_batches(train_pairs, key=lambda p: p[0], batch_size=config.batch_size, rng=rng)
        epoch_losses = []
        for batch in batches:
            step += 1
            if step <= warmup:
                lr = config.learning_rate * step / warmup
            else:
                frac = (step - warmup) / max(1, total_steps - warmup)
                lr = config.learning_rate * max(0.0, 1.0 - frac)
            loss, g_obj, g_anc = mnr_loss(model, batch, scale=config.loss_scale)
            epoch_losses.append(loss)
            gnorm = float(np.sqrt((g_obj ** 2).sum() + (g_anc ** 2).sum()))
            if gnorm > config.grad_clip:
                scale = config.grad_clip / gnorm
                g_obj = g_obj * scale
                g_anc = g_anc * scale
            m_obj = b1 * m_obj + (1 - b1) * g_obj
            v_obj = b2 * v_obj + (1 - b2) * g_obj ** 2
            m_anc = b1 * m_anc + (1 - b1) * g_anc
            v_anc = b2 * v_anc + (1 - b2) * g_anc ** 2
            mh_o = m_obj / (1 - b1 ** step)
            vh_o = v_obj / (1 - b2 ** step)
            mh_a = m_anc / (1 - b1 ** step)
            vh_a = v_anc / (1 - b2 ** step)
            model.obj_table -= lr * mh_o / (np.sqrt(vh_o) + 1e-8)
            model.anchor_table -= lr * mh_a / (np.sqrt(vh_a) + 1e-8)
        # anchors end every epoch unit-norm
        norms = np.linalg.norm(model.anchor_table, axis=1, keepdims=True)
        model.anchor_table /= np.maximum(norms, 1e-12)
        vl = val_loss()
        curve.append((epoch, float(np.mean(epoch_losses)), vl))
        monitored = vl if val_pairs else float(np.mean(epoch_losses))
        if monitored < best[0] - 1e-6:
            best = (monitored, model.copy())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break
    final = best[1] if np.isfinite(best[0]) else model
    return final, curve


# -- persistence ---------------------------------------------------------------

def save_model_bytes(model: EmbeddingModel) -> bytes:
    k, d = model.obj_table.shape
    r = model.anchor_table.shape[0]
    head = _EMBED_MAGIC + struct.pack("<IIIf", k, r, d, model.temperature)
    body = (
        model.obj_table.astype("<f4").tobytes()
        + model.anchor_table.astype("<f4").tobytes()
    )
    return head + body


def load_model_bytes(data: bytes) -> EmbeddingModel:
    if not data.startswith(_EMBED_MAGIC):
        raise ValueError("not an eamnav-embed/1 checkpoint")
    off = len(_EMBED_MAGIC)
    k, r, d, tau = struct.unpack_from("<IIIf", data, off)
    off += struct.calcsize("<IIIf")
    obj = np.frombuffer(data, dtype="<f4", count=k * d, offset=off).reshape(k, d)
    off += k * d * 4
    anc = np.frombuffer(data, dtype="<f4", count=r * d, offset=off).reshape(r, d)
    return EmbeddingModel(obj.astype(np.float64), anc.astype(np.float64), float(tau))


def save_model(model: EmbeddingModel, path) -> None:
    with open(path, "wb") as f:
        f.write(save_model_bytes(model))


def load_model(path) -> EmbeddingModel:
    with open(path, "rb") as f:
        return load_model_bytes(f.read())


# -- corpus files ---------------------------------------------------------------

def save_scenes_text(scenes: list[LabeledScene]) -> str:
    lines = ["eamnav-scenes/1"]
    for s in scenes:
        objs = " ".join(
            f"{OBJECT_VOCAB[o]}:{ENV_CLASSES[l]}" for o, l in zip(s.object_ids, s.labels)
        )
        lines.append(f"scene {ENV_CLASSES[s.region]} {objs}")
    return "\n".join(lines) + "\n"


def load_scenes_text(text: str) -> list[LabeledScene]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "eamnav-scenes/1":
        raise ValueError("not an eamnav-scenes/1 file")
    obj_id = {name: i for i, name in enumerate(OBJECT_VOCAB)}
    cls_id = {name: i for i, name in enumerate(ENV_CLASSES)}
    scenes = []
    for ln in lines[1:]:
        parts = ln.split()
        region = cls_id[parts[1]]
        ids, labels = [], []
        for tok in parts[2:]:
            name, label = tok.split(":")
            ids.append(obj_id[name])
            labels.append(cls_id[label])
        scenes.append(LabeledScene(tuple(ids), tuple(labels), region))
    return scenes


def save_triplets_text(triplets: list[Triplet]) -> str:
    lines = ["eamnav-triplets/1"]
    for t in triplets:
        lines.append(f"triplet {ENV_CLASSES[t.anchor]}")
        lines.append("pos " + " ".join(OBJECT_VOCAB[o] for o in t.positive.object_ids))
        for neg in t.negatives:
            lines.append("neg " + " ".join(OBJECT_VOCAB[o] for o in neg.object_ids))
    return "\n".join(lines) + "\n"


def load_triplets_text(text: str) -> list[Triplet]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "eamnav-triplets/1":
        raise ValueError("not an eamnav-triplets/1 file")
    obj_id = {name: i for i, name in enumerate(OBJECT_VOCAB)}
    cls_id = {name: i for i, name in enumerate(ENV_CLASSES)}
    triplets: list[Triplet] = []
    anchor, pos, negs = None, None, []
    def flush():
        if anchor is not None:
            triplets.append(Triplet(anchor, pos, tuple(negs)))
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "triplet":
            flush()
            anchor, pos, negs = cls_id[parts[1]], None, []
        elif parts[0] == "pos":
            pos = SceneDescription(tuple(obj_id[p] for p in parts[1:]))
        elif parts[0] == "neg":
            negs.append(SceneDescription(tuple(obj_id[p] for p in parts[1:])))
        else:
            raise ValueError(f"unexpected line in triplet file: {ln}")
    flush()
    return triplets


def build_scene_corpus(plans, sensors, frames_per_plan: int, seed: int,
                       min_objects: int = 2) -> list[LabeledScene]:
    """Collect labeled scene descriptions by observing random in-room poses.

    Per-object labels come from the room category of the cell each detection
    sits on, mirroring pre-annotated environment attributes.
    """
    from . import simcore

    rng = np.random.default_rng(seed)
    scenes: list[LabeledScene] = []
    for plan in plans:
        free = plan.free_mask()
        ys, xs = np.nonzero(free)
        for _ in range(frames_per_plan):
            i = int(rng.integers(len(xs)))
            pose = simcore.AgentPose((int(xs[i]), int(ys[i])), int(rng.integers(8)))
            obs = simcore.observe(plan, pose, sensors, rng)
            if len(obs.detections) < min_objects:
                continue
            ids, labels = [], []
            for det in obs.detections:
                room = plan.room_at(det.cell)
                if room is None:
                    continue
                ids.append(det.class_id)
                labels.append(room.category)
            if len(ids) < min_objects:
                continue
            region_room = plan.room_at(pose.cell)
            if region_room is None:
                continue
            scenes.append(LabeledScene(tuple(ids), tuple(labels), region_room.category))
    return scenes
