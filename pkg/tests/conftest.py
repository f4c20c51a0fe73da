import numpy as np
import pytest

from eamnav import grounding as gr
from eamnav import worldgen as wg


def make_separable_scenes(seed: int, per_class: int = 30, n_classes: int = wg.N_ENV_CLASSES):
    """Scenes with disjoint two-object vocabularies per class: fully separable."""
    rng = np.random.default_rng(seed)
    scenes = []
    for r in range(n_classes):
        own = (2 * r, 2 * r + 1)
        for _ in range(per_class):
            n = int(rng.integers(3, 7))
            ids = tuple(int(own[rng.integers(2)]) for _ in range(n))
            scenes.append(gr.LabeledScene(ids, tuple([r] * n), r))
    return scenes


def make_separable_triplets(seed: int, per_class: int = 20, n_negatives: int = 3):
    """Direct triplet construction over the separable corpus."""
    rng = np.random.default_rng(seed)
    scenes = make_separable_scenes(seed + 1, per_class + 5)
    by_class: dict[int, list] = {}
    for s in scenes:
        by_class.setdefault(s.region, []).append(s)
    triplets = []
    classes = sorted(by_class)
    for r in classes:
        pool = by_class[r]
        others = [s for c in classes if c != r for s in by_class[c]]
        for i in range(per_class):
            pos = pool[i % len(pool)]
            neg_idx = rng.choice(len(others), size=n_negatives, replace=False)
            triplets.append(
                gr.Triplet(
                    r,
                    pos.description(),
                    tuple(others[j].description() for j in neg_idx),
                )
            )
    return triplets


@pytest.fixture(scope="session")
def default_priors():
    return wg.default_priors()
