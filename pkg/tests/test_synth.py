import json

import jsonschema
import numpy as np
import pytest

from tjstg import synth
from tjstg.tsg import question_contribution_scores, select_target


def same_scene(a, b):
    for f in ("audio", "visual_map", "question_words", "gt_spatial", "gt_temporal"):
        if getattr(a, f).tobytes() != getattr(b, f).tobytes():
            return False
    return (a.answer, a.target_word_index, a.target_concept) == (b.answer, b.target_word_index, b.target_concept)


class TestTaskConfig:
    @pytest.mark.parametrize("field", ["T", "N", "h", "w", "d", "C", "K"])
    def test_rejects_non_positive(self, field):
        with pytest.raises(ValueError, match=field):
            synth.TaskConfig(**{field: 0})

    def test_rejects_negative_noise(self):
        with pytest.raises(ValueError, match="noise_sigma"):
            synth.TaskConfig(noise_sigma=-0.1)

    def test_defaults(self):
        cfg = synth.TaskConfig()
        assert (cfg.T, cfg.N, cfg.h, cfg.w, cfg.d, cfg.C, cfg.K, cfg.noise_sigma) == (6, 8, 4, 4, 16, 4, 6, 0.1)


class TestWorld:
    def test_concepts_unit_and_orthogonal(self):
        w = synth.make_world(synth.TaskConfig())
        np.testing.assert_allclose(w.concepts @ w.concepts.T, np.eye(6), atol=1e-12)
        np.testing.assert_allclose(w.concepts @ w.fillers.T, 0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(w.fillers, axis=1), 1, atol=1e-12)

    def test_audio_map_orthogonal(self):
        a = synth.make_world(synth.TaskConfig()).audio_map
        np.testing.assert_allclose(a @ a.T, np.eye(16), atol=1e-12)

    def test_many_concepts_still_unit(self):
        w = synth.make_world(synth.TaskConfig(K=20, d=8))
        np.testing.assert_allclose(np.linalg.norm(w.concepts, axis=1), 1, atol=1e-12)


class TestGenScene:
    def test_deterministic(self):
        cfg = synth.TaskConfig(seed=3)
        assert same_scene(synth.gen_scene(cfg, 11), synth.gen_scene(cfg, 11))

    def test_order_independent(self):
        cfg = synth.TaskConfig(seed=3)
        world = synth.make_world(cfg)
        forward = [synth.gen_scene(cfg, i, world) for i in range(5)]
        backward = [synth.gen_scene(cfg, i, world) for i in reversed(range(5))][::-1]
        assert all(same_scene(a, b) for a, b in zip(forward, backward))

    def test_seed_changes_scene(self):
        a = synth.gen_scene(synth.TaskConfig(seed=1), 0)
        b = synth.gen_scene(synth.TaskConfig(seed=2), 0)
        assert not same_scene(a, b)

    def test_shapes(self):
        s = synth.gen_scene(synth.TaskConfig(), 0)
        assert s.audio.shape == (6, 16)
        assert s.visual_map.shape == (6, 4, 4, 16)
        assert s.question_words.shape == (8, 16)
        assert s.gt_spatial.shape == (6, 4, 4) and s.gt_temporal.shape == (6,)

    def test_two_active_segments_noise_free(self):
        cfg = synth.TaskConfig(noise_sigma=0.0)
        scene = next(s for s in (synth.gen_scene(cfg, i) for i in range(500)) if s.gt_temporal.sum() == 2)
        assert scene.answer == 2
        assert np.count_nonzero(scene.gt_temporal) == 2

    def test_invariants(self):
        cfg = synth.TaskConfig()
        for i in range(200):
            s = synth.gen_scene(cfg, i)
            n = int(s.gt_temporal.sum())
            assert s.answer == min(cfg.C - 1, n)
            for t in range(cfg.T):
                cells = s.gt_spatial[t].sum()
                assert cells == (1 if s.gt_temporal[t] else 0)

    def test_planted_content_noise_free(self):
        cfg = synth.TaskConfig(noise_sigma=0.0)
        world = synth.make_world(cfg)
        s = synth.gen_scene(cfg, 4, world)
        target = world.concepts[s.target_concept]
        np.testing.assert_allclose(s.question_words[s.target_word_index], target)
        for t in np.flatnonzero(s.gt_temporal):
            cell = np.argmax(s.gt_spatial[t].reshape(-1))
            np.testing.assert_allclose(s.visual_map[t].reshape(16, 16)[cell], target)
            np.testing.assert_allclose(s.audio[t], world.audio_map @ target)
        for t in np.flatnonzero(s.gt_temporal == 0):
            assert not np.any(np.all(np.isclose(s.visual_map[t].reshape(16, 16), target), axis=1))

    def test_nearest_concept_recovers_target(self):
        # separability sanity oracle on the planted cells
        cfg = synth.TaskConfig(noise_sigma=0.0)
        world = synth.make_world(cfg)
        for i in range(100):
            s = synth.gen_scene(cfg, i, world)
            for t in np.flatnonzero(s.gt_temporal):
                cell = s.visual_map[t].reshape(16, 16)[np.argmax(s.gt_spatial[t].reshape(-1))]
                assert int(np.argmax(world.concepts @ cell)) == s.target_concept

    def test_answer_histogram_matches_activation_distribution(self):
        cfg = synth.TaskConfig()
        world = synth.make_world(cfg)
        counts = np.bincount([int(synth.gen_scene(cfg, i, world).gt_temporal.sum()) for i in range(1000)],
                             minlength=cfg.T + 1)
        expected = 1000 * synth.activation_distribution(cfg)
        # chi-square with T dof; 22.46 is the 0.999 quantile for 6 dof
        chi2 = np.sum((counts - expected) ** 2 / expected)
        assert chi2 < 22.46

    def test_existential_answers(self):
        cfg = synth.TaskConfig(task="existential", noise_sigma=0.0)
        for i in range(100):
            s = synth.gen_scene(cfg, i)
            assert s.answer == int(s.gt_temporal.sum() > 0)
            assert s.question_type == "existential"

    def test_target_selected_on_noise_free_scene(self):
        # scoring raw words against the sum of concept vectors singles out the target word
        cfg = synth.TaskConfig(noise_sigma=0.0)
        world = synth.make_world(cfg)
        h_q = world.concepts.sum(axis=0, keepdims=True)
        for i in range(50):
            s = synth.gen_scene(cfg, i, world)
            idx, f_tgt = select_target(question_contribution_scores(h_q, s.question_words), s.question_words)
            assert idx == s.target_word_index


def test_activation_distribution_sums_to_one():
    for cfg in (synth.TaskConfig(), synth.TaskConfig(C=10), synth.TaskConfig(task="existential")):
        p = synth.activation_distribution(cfg)
        assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)


def test_split_sizes_follow_reference_proportions():
    train, val, test = synth.split_sizes(2500)
    assert train + val + test == 2500
    assert train > test > val


class TestSplits:
    def test_matching_labels_balanced(self):
        split = synth.make_split(synth.TaskConfig(), 400, 0, neg_fraction=0.5)
        k = int(split.match_label.sum())
        # 3 sigma of Binomial(400, 0.5)
        assert abs(k - 200) < 3 * 10

    def test_negatives_use_other_scenes(self):
        split = synth.make_split(synth.TaskConfig(), 50, 0)
        for i in range(50):
            same = np.array_equal(split.match_audio[i], split.audio[i])
            assert same == bool(split.match_label[i])

    def test_no_negatives(self):
        split = synth.make_split(synth.TaskConfig(), 20, 0, neg_fraction=0.0)
        assert split.match_label.all()

    def test_subset(self):
        split = synth.make_split(synth.TaskConfig(), 10, 0)
        sub = split.subset([3, 1])
        assert sub.ids == [split.ids[3], split.ids[1]]
        np.testing.assert_array_equal(sub.audio[0], split.audio[3])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cfg = synth.TaskConfig(seed=9)
    manifest = synth.gen_dataset(cfg, 6, 3, 3, out)
    return cfg, out, manifest


class TestDataset:
    def test_manifest_matches_schema(self, dataset):
        _, out, _ = dataset
        jsonschema.validate(json.loads((out / "manifest.json").read_text()), synth.MANIFEST_SCHEMA)

    def test_round_trip(self, dataset):
        cfg, out, _ = dataset
        data = synth.load_dataset(out)
        assert {k: len(v) for k, v in data.items()} == {"train": 6, "val": 3, "test": 3}
        ref = synth.make_split(cfg, 3, 6)
        np.testing.assert_array_equal(data["val"].audio, ref.audio)
        np.testing.assert_array_equal(data["val"].visual_map, ref.visual_map)
        np.testing.assert_array_equal(data["val"].match_label, ref.match_label)
        np.testing.assert_array_equal(data["val"].match_audio, ref.match_audio)
        assert synth.dataset_config(out) == cfg

    def test_identical_bytes_on_regeneration(self, dataset, tmp_path):
        cfg, out, _ = dataset
        synth.gen_dataset(cfg, 6, 3, 3, tmp_path)
        assert (tmp_path / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()
        for f in (out / "scenes").iterdir():
            assert (tmp_path / "scenes" / f.name).read_bytes() == f.read_bytes()

    def test_checksum_mismatch_detected(self, dataset, tmp_path):
        cfg, _, manifest = dataset
        synth.gen_dataset(cfg, 6, 3, 3, tmp_path)
        victim = tmp_path / manifest["scenes"][0]["files"]["audio"]
        raw = bytearray(victim.read_bytes())
        raw[-1] ^= 0xFF
        victim.write_bytes(bytes(raw))
        with pytest.raises(synth.ManifestError, match="checksum"):
            synth.load_dataset(tmp_path)

    def test_invalid_manifest_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"format": "nope"}))
        with pytest.raises(synth.ManifestError):
            synth.load_dataset(tmp_path)

    def test_empty_split_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            synth.gen_dataset(synth.TaskConfig(), 0, 1, 1, tmp_path)
