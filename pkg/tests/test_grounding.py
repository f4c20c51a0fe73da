import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eamnav import grounding as gr
from eamnav import worldgen as wg
from eamnav.grounding import (
    EmbeddingModel,
    LabeledScene,
    SceneDescription,
    TrainConfig,
)

from conftest import make_separable_scenes, make_separable_triplets


def toy_model(obj_rows, anchor_rows, tau=1.0):
    return EmbeddingModel(
        np.array(obj_rows, dtype=np.float64),
        np.array(anchor_rows, dtype=np.float64),
        tau,
    )


class TestEmbed:
    def test_single_object_is_normalized_row(self):
        m = toy_model([[3.0, 4.0]], [[1.0, 0.0]])
        e = gr.embed_description(m, SceneDescription((0,)))
        assert np.allclose(e, [0.6, 0.8])

    def test_duplicated_multiset_same_embedding(self):
        m = gr.make_random_model(0, dim=8, n_objects=10, n_classes=4)
        d1 = SceneDescription((1, 4, 7))
        d2 = SceneDescription((1, 4, 7, 1, 4, 7))
        assert np.allclose(
            gr.embed_description(m, d1), gr.embed_description(m, d2)
        )

    def test_two_orthogonal_unit_rows(self):
        u = np.array([1.0, 0.0])
        v = np.array([0.0, 1.0])
        m = toy_model([u, v], [[1.0, 0.0]])
        e = gr.embed_description(m, SceneDescription((0, 1)))
        expected = (u + v) / np.linalg.norm(u + v)
        assert np.allclose(e, expected)
        assert np.linalg.norm(e) == pytest.approx(1.0)

    def test_empty_description_rejected(self):
        m = gr.make_random_model(0)
        with pytest.raises(ValueError):
            gr.embed_description(m, SceneDescription(()))


class TestClassify:
    def test_low_temperature_concentrates_on_matching_anchor(self):
        anchors = np.eye(3)
        m = toy_model([anchors[1]], anchors, tau=1e-6)
        probs = gr.classify_scene(m, SceneDescription((0,)))
        assert probs.argmax() == 1
        assert probs[1] > 0.999999

    def test_identical_anchors_uniform(self):
        anchors = np.tile([1.0, 0.0], (5, 1))
        m = toy_model([[0.3, 0.7]], anchors)
        probs = gr.classify_scene(m, SceneDescription((0,)))
        assert np.allclose(probs, 0.2)

    def test_thirty_degree_two_anchor_case(self):
        # anchors at 0 and 90 degrees, embedding at 30: softmax([cos30, cos60])
        ang = math.radians(30)
        m = toy_model([[math.cos(ang), math.sin(ang)]], [[1, 0], [0, 1]], tau=1.0)
        probs = gr.classify_scene(m, SceneDescription((0,)))
        assert probs[0] == pytest.approx(0.5897, abs=1e-3)
        assert probs[1] == pytest.approx(0.4103, abs=1e-3)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
    def test_output_is_probability_simplex(self, seed, n):
        m = gr.make_random_model(seed)
        rng = np.random.default_rng(seed + 1)
        desc = SceneDescription(tuple(int(v) for v in rng.integers(0, 40, size=n)))
        probs = gr.classify_scene(m, desc)
        assert abs(probs.sum() - 1.0) < 1e-9
        assert np.all(probs >= 0)


class TestMnrLoss:
    def test_single_pair_loss_zero(self):
        m = gr.make_random_model(3, dim=6, n_objects=8, n_classes=4)
        loss, _, _ = gr.mnr_loss(m, [(2, SceneDescription((1, 5)))], scale=20.0)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_two_pair_orthogonal_closed_form(self):
        # cos(a_i, p_i) = 1, cos(a_i, p_j) = 0, scale 1:
        # loss = -log(e / (e + 1)) ~ 0.31326
        anchors = np.eye(2)
        m = toy_model(np.eye(2), anchors)
        batch = [(0, SceneDescription((0,))), (1, SceneDescription((1,)))]
        loss, _, _ = gr.mnr_loss(m, batch, scale=1.0)
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1.0)), abs=1e-9)

    def test_empty_batch_rejected(self):
        m = gr.make_random_model(0)
        with pytest.raises(ValueError):
            gr.mnr_loss(m, [])

    def test_gradients_match_central_differences(self):
        # 50 random small models; |analytic - fd| <= 1e-4 * |fd| + 1e-8 so the
        # relative bound applies wherever the gradient is meaningfully nonzero
        h = 1e-6
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            m = gr.make_random_model(seed, dim=5, n_objects=6, n_classes=4)
            batch = []
            for _ in range(3):
                c = int(rng.integers(4))
                n = int(rng.integers(1, 4))
                desc = SceneDescription(tuple(int(v) for v in rng.integers(0, 6, size=n)))
                batch.append((c, desc))
            scale = float(rng.uniform(0.5, 25.0))
            _, g_obj, g_anc = gr.mnr_loss(m, batch, scale=scale)
            for table, grad in ((m.obj_table, g_obj), (m.anchor_table, g_anc)):
                it = np.nditer(table, flags=["multi_index"])
                for _ in it:
                    ij = it.multi_index
                    orig = table[ij]
                    table[ij] = orig + h
                    lp, _, _ = gr.mnr_loss(m, batch, scale=scale)
                    table[ij] = orig - h
                    lm, _, _ = gr.mnr_loss(m, batch, scale=scale)
                    table[ij] = orig
                    fd = (lp - lm) / (2 * h)
                    rel = abs(grad[ij] - fd) / (max(abs(grad[ij]), abs(fd)) + 1e-4)
                    worst = max(worst, rel)
                    assert abs(grad[ij] - fd) <= 1e-4 * max(abs(grad[ij]), abs(fd)) + 1e-8
        assert worst < 1e-4, f"worst relative gradient error {worst:.2e}"


class TestDescriptionAccuracy:
    def _identity_model(self):
        # object k maps straight onto anchor k
        anchors = np.eye(4)
        return toy_model(anchors, anchors)

    def test_all_correct(self):
        m = self._identity_model()
        s = LabeledScene((0, 1, 2), (0, 1, 2), region=0)
        assert gr.description_accuracy(s, m) == 1.0

    def test_none_correct(self):
        m = self._identity_model()
        s = LabeledScene((0, 1), (1, 0), region=0)
        assert gr.description_accuracy(s, m) == 0.0

    def test_four_of_five(self):
        m = self._identity_model()
        s = LabeledScene((0, 1, 2, 3, 0), (0, 1, 2, 3, 1), region=0)
        assert gr.description_accuracy(s, m) == pytest.approx(0.8)


class TestMineTriplets:
    def test_thresholds_inclusive(self):
        # alpha = 1 eligible positive; alpha = 0.2 (1 of 5) eligible negative
        anchors = np.eye(4)
        m = toy_model(anchors, anchors)
        good = LabeledScene((0, 0, 0), (0, 0, 0), region=0)
        bad = LabeledScene((1, 0, 0, 0, 0), (1, 2, 2, 2, 2), region=1)
        assert gr.description_accuracy(good, m) >= 0.8
        assert gr.description_accuracy(bad, m) == pytest.approx(0.2)
        triplets = gr.mine_triplets([good, bad], m, n_negatives=1, seed=0)
        assert any(t.anchor == 0 for t in triplets)
        mined = [t for t in triplets if t.anchor == 0]
        assert mined[0].positive == good.description()
        assert mined[0].negatives[0] == bad.description()

    def test_posthoc_threshold_audit(self, default_priors):
        scenes = make_separable_scenes(5, per_class=8) + [
            # noisy scenes: wrong-label objects to populate the negative pool
            LabeledScene((2 * r, 2 * ((r + 1) % 15), 2 * ((r + 2) % 15)),
                         ((r + 5) % 15, (r + 6) % 15, (r + 7) % 15), r)
            for r in range(15)
            for _ in range(4)
        ]
        base = gr.make_base_model(0, default_priors)
        triplets = gr.mine_triplets(scenes, base, seed=1)
        desc_to_scene = {}
        for s in scenes:
            desc_to_scene.setdefault(s.object_ids, []).append(s)
        assert triplets, "mining produced no triplets"
        for t in triplets:
            pos_scenes = desc_to_scene[t.positive.object_ids]
            assert any(
                gr.description_accuracy(s, base) >= 0.8 and s.region == t.anchor
                for s in pos_scenes
            )
            for neg in t.negatives:
                neg_scenes = desc_to_scene[neg.object_ids]
                assert any(
                    gr.description_accuracy(s, base) <= 0.2 for s in neg_scenes
                )


class TestRefine:
    def _kitchen_toy(self):
        anchors = [[1.0, 0.0], [0.0, 1.0]]
        objs = [
            [0.9, 0.1],   # kitchen-ish
            [0.9, -0.1],  # kitchen-ish
            [-0.5, 0.5],  # adversarial bed: opposes the kitchen anchor
        ]
        return toy_model(objs, anchors)

    def test_adversarial_object_removed(self):
        m = self._kitchen_toy()
        refined = gr.refine_description_greedy(SceneDescription((0, 1, 2)), m)
        assert 2 not in refined.object_ids
        # exhaustive single-removal oracle from the original description
        base = gr._max_anchor_cosine(m, SceneDescription((0, 1, 2)))
        gains = {}
        for drop in range(3):
            rest = tuple(i for i in (0, 1, 2) if i != drop)
            gains[drop] = gr._max_anchor_cosine(m, SceneDescription(rest)) - base
        assert max(gains, key=gains.get) == 2

    def test_fixpoint_unchanged(self):
        m = self._kitchen_toy()
        desc = SceneDescription((0, 1))
        assert gr.refine_description_greedy(desc, m) == desc

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 5000), n=st.integers(1, 7))
    def test_monotone_and_terminates(self, seed, n):
        m = gr.make_random_model(seed)
        rng = np.random.default_rng(seed)
        desc = SceneDescription(tuple(int(v) for v in rng.integers(0, 40, size=n)))
        refined = gr.refine_description_greedy(desc, m)
        assert 1 <= len(refined) <= len(desc)
        assert gr._max_anchor_cosine(m, refined) >= gr._max_anchor_cosine(m, desc) - 1e-12


class TestTraining:
    def test_loss_decreases_on_separable_corpus(self):
        triplets = make_separable_triplets(0, per_class=12)
        model, curve = gr.train_embedder(triplets, TrainConfig(epochs=12), seed=1)
        assert curve[-1][1] <= curve[0][1]

    def test_positive_cosine_exceeds_negative_after_training(self):
        train = make_separable_triplets(0, per_class=12)
        held_out = make_separable_triplets(99, per_class=4)
        model, _ = gr.train_embedder(train, TrainConfig(epochs=12), seed=1)
        ap, an, margin = gr.triplet_evaluation(model, held_out)
        assert ap > an
        assert margin > 0.2

    def test_seeded_determinism(self):
        triplets = make_separable_triplets(0, per_class=6)
        cfg = TrainConfig(epochs=4)
        m1, c1 = gr.train_embedder(triplets, cfg, seed=7)
        m2, c2 = gr.train_embedder(triplets, cfg, seed=7)
        assert np.array_equal(m1.obj_table, m2.obj_table)
        assert np.array_equal(m1.anchor_table, m2.anchor_table)
        assert c1 == c2

    def test_anchor_rows_unit_norm(self):
        triplets = make_separable_triplets(0, per_class=6)
        model, _ = gr.train_embedder(triplets, TrainConfig(epochs=3), seed=2)
        norms = np.linalg.norm(model.anchor_table, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)

    def test_empty_triplets_rejected(self):
        with pytest.raises(ValueError):
            gr.train_embedder([], TrainConfig(), seed=0)


class TestPersistence:
    def test_checkpoint_roundtrip(self, tmp_path):
        m = gr.make_random_model(4)
        path = tmp_path / "embed.bin"
        gr.save_model(m, path)
        loaded = gr.load_model(path)
        assert np.allclose(loaded.obj_table, m.obj_table, atol=1e-6)
        assert np.allclose(loaded.anchor_table, m.anchor_table, atol=1e-6)
        assert loaded.temperature == pytest.approx(m.temperature)
        # float32 storage is exact on reload
        gr.save_model(loaded, path)
        again = gr.load_model(path)
        assert np.array_equal(again.obj_table, loaded.obj_table)

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            gr.load_model_bytes(b"eamnav-nonsense/9\x00\x00")

    def test_triplet_text_roundtrip(self):
        triplets = make_separable_triplets(0, per_class=2)
        text = gr.save_triplets_text(triplets)
        again = gr.load_triplets_text(text)
        assert again == triplets

    def test_scene_text_roundtrip(self):
        scenes = make_separable_scenes(3, per_class=2)
        text = gr.save_scenes_text(scenes)
        assert gr.load_scenes_text(text) == scenes


class TestSceneCorpus:
    def test_corpus_from_worlds(self):
        from eamnav import simcore

        plans = [
            wg.place_objects(
                wg.generate_floor_plan(wg.GenConfig(), seed=s), wg.default_priors(), 4, s
            )
            for s in range(2)
        ]
        scenes = gr.build_scene_corpus(
            plans, simcore.SensorConfig(p_detect=1.0, p_confuse=0.0),
            frames_per_plan=20, seed=0,
        )
        assert scenes
        for s in scenes:
            assert len(s.object_ids) == len(s.labels)
            assert all(0 <= l < wg.N_ENV_CLASSES for l in s.labels)
