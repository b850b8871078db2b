import math

import numpy as np
import pytest

from babylearn.config import RunConfig, apply_overrides, dump_config, load_config, parse_config_text
from babylearn.core import BoundingBox
from babylearn.detector import DetectorModel, LinearModel
from babylearn.mining import MinedInstance
from babylearn.pipeline import (BACKGROUND, IterationRecord, KeyFrameCache, NegativePool, StateFileError,
                                assemble_negative_pool, bootstrap, bootstrap_corpus, center_errors,
                                detect_frames, evaluate, format_report, load_state, regression_top_k,
                                report_rows, run_iteration, run_loop, save_state, select_seeds, states_equal,
                                train_regressor_stage, video_batch, videos_per_iteration)
from babylearn.simulator import WorldConfig, generate_world

SMALL_WORLD = WorldConfig(n_classes=2, n_learned_classes=2, videos_per_class=8, frames_per_video=16,
                          test_frames=20, background_frames=6, learned_instances_per_class=4,
                          seed_pool_per_class=10, rng_seed=0)
SMALL_RUN = RunConfig(world=SMALL_WORLD, hn_batch=500)


@pytest.fixture(scope="module")
def world():
    return generate_world(SMALL_WORLD)


@pytest.fixture(scope="module")
def boot(world):
    return bootstrap_corpus(world, SMALL_RUN)


@pytest.fixture(scope="module")
def cache():
    return KeyFrameCache(SMALL_RUN.gist_threshold, SMALL_RUN.descriptor())


@pytest.fixture(scope="module")
def after_one(boot, world, cache):
    return run_iteration(boot, world.videos, SMALL_RUN, cache)


def instance(feature, video="s", frame=0):
    return MinedInstance(video, frame, BoundingBox(10, 10, 4, 4), np.asarray(feature, dtype=float), 0, 0.0)


class TestSelectSeeds:
    def test_two_blobs_and_outlier(self):
        rng = np.random.default_rng(0)
        a = rng.normal([0, 0], 0.1, size=(6, 2))
        b = rng.normal([5, 5], 0.1, size=(4, 2))
        X = np.vstack([a, b, [[20.0, -20.0]]])
        seeds = select_seeds(X, k=3, n_seeds=2, rng_seed=0)
        assert seeds[0] == int(np.argmin(np.sum((a - a.mean(0)) ** 2, 1)))
        assert seeds[1] == 6 + int(np.argmin(np.sum((b - b.mean(0)) ** 2, 1)))

    def test_identical_points(self):
        assert select_seeds(np.ones((5, 3)), k=3, n_seeds=2) == [0]

    def test_small_set_returned(self):
        assert select_seeds(np.eye(2), k=10, n_seeds=2) == [0, 1]

    def test_deterministic(self):
        X = np.random.default_rng(1).normal(size=(40, 4))
        assert select_seeds(X, rng_seed=3) == select_seeds(X, rng_seed=3)

    def test_empty(self):
        with pytest.raises(ValueError):
            select_seeds(np.zeros((0, 2)))


class TestNegativePool:
    def test_background_only(self):
        img = np.random.default_rng(2).uniform(size=(40, 40, 3))
        props = [BoundingBox(10 + i % 5 * 5, 10 + i // 5 * 2, 8, 8) for i in range(50)]
        pool = assemble_negative_pool([(img, props)], [], SMALL_RUN.descriptor())
        assert len(pool) == 50 and np.all(pool.class_ids == BACKGROUND)

    def test_instances_only(self):
        others = [(np.full(SMALL_RUN.descriptor().dim, i), 1) for i in range(20)]
        pool = assemble_negative_pool([], others, SMALL_RUN.descriptor())
        assert len(pool) == 20 and pool.for_concept(1).shape[0] == 0 and pool.for_concept(0).shape[0] == 20

    def test_no_negatives(self):
        with pytest.raises(ValueError, match="no negatives"):
            assemble_negative_pool([], [], SMALL_RUN.descriptor())

    def test_extended(self):
        pool = NegativePool(np.zeros((2, 3)), [BACKGROUND, BACKGROUND]).extended(np.ones((1, 3)), 4)
        assert list(pool.class_ids) == [BACKGROUND, BACKGROUND, 4]

    def test_world_pool_excludes_targets(self, world, boot):
        # the pool is built from backgrounds and learned-class stills only
        assert set(np.unique(boot.negatives.class_ids)) <= {BACKGROUND, *SMALL_WORLD.learned_classes}


class TestBootstrap:
    def test_ensemble_per_seed(self, boot):
        assert boot.iteration == 0
        assert boot.classes == [0, 1]
        for c in boot.classes:
            assert boot.detectors[c].variant == "ensemble"
            assert len(boot.detectors[c].models) == len(boot.positives[c]) == 2

    def test_single_seed(self):
        pool = NegativePool(np.random.default_rng(3).normal(size=(30, 4)), np.full(30, BACKGROUND))
        state = bootstrap({0: [instance(np.ones(4))]}, pool)
        assert len(state.detectors[0].models) == 1

    def test_missing_seed(self):
        pool = NegativePool(np.zeros((3, 2)), np.full(3, BACKGROUND))
        with pytest.raises(ValueError):
            bootstrap({0: []}, pool)


class TestIteration:
    def test_growth_and_ledger(self, boot, after_one):
        assert after_one.iteration == 1 and boot.iteration == 0
        assert boot.consumed == set()
        assert sum(h.mined for h in after_one.history) > 0
        for c in after_one.classes:
            rec = [h for h in after_one.history if h.iteration == 1 and h.class_id == c][0]
            assert len(after_one.positives[c]) == 2 + rec.mined
            assert rec.mined <= 2 * rec.videos_mined
            for m in after_one.positives[c][2:]:
                assert (m.video_id, m.frame_id) in after_one.consumed
                assert m.source_iteration == 1

    def test_no_mined_frame_reused(self, after_one, world, cache):
        after_two = run_iteration(after_one, world.videos, SMALL_RUN, cache)
        assert after_one.consumed <= after_two.consumed
        for c in after_two.classes:
            for m in after_two.positives[c]:
                if m.source_iteration == 2:
                    assert (m.video_id, m.frame_id) not in after_one.consumed

    def test_deterministic(self, boot, after_one, world, cache):
        again = run_iteration(boot, world.videos, SMALL_RUN, cache)
        assert states_equal(again, after_one)

    def test_noisy_batch_keeps_detectors(self, boot, world, cache):
        noisy = [v for v in world.videos if v.noisy]
        # a seed threshold nothing can reach stands in for a batch without targets
        cfg = RunConfig(world=SMALL_WORLD, exemplar_seed_threshold=1e9)
        out = run_iteration(boot, noisy, cfg, cache)
        assert out.iteration == 1
        assert out.detectors == boot.detectors
        assert {c: len(p) for c, p in out.positives.items()} == {c: len(p) for c, p in boot.positives.items()}

    def test_video_batch_schedule(self):
        vids = list(range(5))
        assert video_batch(vids, 0, 2) == [0, 1]
        assert video_batch(vids, 2, 2) == [4, 0]
        assert video_batch(vids, 1, 9) == vids
        assert video_batch([], 0, 3) == []
        assert videos_per_iteration(RunConfig(), 37) == 37
        assert videos_per_iteration(RunConfig(videos_per_iteration=4), 37) == 4


class TestRegressionAndEvaluation:
    def test_needs_an_iteration(self, boot, cache):
        with pytest.raises(ValueError):
            train_regressor_stage(boot, cache, SMALL_RUN)

    def test_regressor_stage(self, after_one, cache):
        state = train_regressor_stage(after_one, cache, SMALL_RUN)
        assert set(state.regressors) == set(state.classes)
        assert after_one.regressors == {c: None for c in after_one.classes}

    def test_top_k(self):
        assert regression_top_k(RunConfig(regression_fraction=0.3), 100) == 30
        assert regression_top_k(RunConfig(regression_top_k=5), 100) == 5
        assert regression_top_k(RunConfig(), 0) == 1

    def test_oracle_proposals_score_one(self, world, boot):
        # proposals are exactly the class-0 ground truth, so every detection is a hit
        images = []
        for img in world.test_images[:8]:
            own = [g.box for g in img.gts if g.class_id == 0]
            if own:
                images.append(type(img)(img.image, img.gts, own, img.frame_id))
        state = boot.copy()
        state.detectors = {0: boot.detectors[0]}
        assert evaluate(state, images, SMALL_RUN) == {0: 1.0}

    def test_random_detector_near_chance(self, world, boot):
        rng = np.random.default_rng(4)
        state = boot.copy()
        dim = boot.negatives.features.shape[1]
        state.detectors = {c: DetectorModel.single(LinearModel(rng.normal(size=dim), 0.0), c) for c in boot.classes}
        aps = evaluate(state, world.test_images, SMALL_RUN)
        assert np.mean(list(aps.values())) < 0.1

    def test_center_errors_identity_without_regression(self, boot, world):
        dets = detect_frames(boot, world.test_images[:5], SMALL_RUN)
        raw, ref = center_errors(dets[0], world.test_images[:5], 0)
        np.testing.assert_array_equal(raw, ref)

    def test_empty_test_set(self, boot):
        with pytest.raises(ValueError):
            evaluate(boot, [], SMALL_RUN)


class TestPersistence:
    def test_round_trip_bootstrap(self, boot, tmp_path):
        save_state(boot, tmp_path / "s.jsonl")
        assert states_equal(load_state(tmp_path / "s.jsonl"), boot)

    def test_round_trip_after_iteration(self, after_one, cache, tmp_path):
        state = train_regressor_stage(after_one, cache, SMALL_RUN)
        state.history[-1].ap = 0.25
        save_state(state, tmp_path / "s.jsonl")
        assert states_equal(load_state(tmp_path / "s.jsonl"), state)

    def test_truncated(self, boot, tmp_path):
        path = tmp_path / "s.jsonl"
        save_state(boot, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(StateFileError, match="truncated"):
            load_state(path)

    def test_corrupted(self, boot, tmp_path):
        path = tmp_path / "s.jsonl"
        save_state(boot, path)
        path.write_text(path.read_text()[:-40] + "{{{\n")
        with pytest.raises(StateFileError):
            load_state(path)

    def test_version_mismatch(self, boot, tmp_path):
        path = tmp_path / "s.jsonl"
        save_state(boot, path)
        text = path.read_text().replace('"version": 1', '"version": 99', 1)
        path.write_text(text)
        with pytest.raises(StateFileError, match="version"):
            load_state(path)

    def test_no_leftover_temp_files(self, boot, tmp_path):
        save_state(boot, tmp_path / "s.jsonl")
        save_state(boot, tmp_path / "s.jsonl")
        assert [p.name for p in tmp_path.iterdir()] == ["s.jsonl"]


class TestReport:
    def test_csv(self, boot):
        state = boot.copy()
        state.history = [IterationRecord(0, 0, 2, 0, 0, 0.5), IterationRecord(1, 0, 6, 2, 4)]
        text = format_report(report_rows(state))
        assert text == "iteration,class_id,ap,pool_size,videos_mined\n0,0,0.5,2,0\n1,0,,6,2\n"

    def test_loop_records_ap(self, boot, world, cache):
        seen = []
        state = run_loop(boot, world, SMALL_RUN, 1, cache, on_iteration=lambda s: seen.append(s.iteration))
        assert seen == [1]
        assert all(not math.isnan(h.ap) for h in state.history if h.iteration == 1)


class TestConfig:
    def test_parse(self):
        pairs = parse_config_text("# comment\nalpha = 0.5\n\nworld.videos_per_class = 3  # trailing\n")
        cfg = apply_overrides(RunConfig(), pairs)
        assert cfg.alpha == 0.5 and cfg.world.videos_per_class == 3

    def test_types(self):
        cfg = apply_overrides(RunConfig(), {"mined_as_negatives": "off", "ridge_lambda": "1",
                                            "world.image_size": "(64, 48)"})
        assert cfg.mined_as_negatives is False and cfg.ridge_lambda == 1.0 and isinstance(cfg.ridge_lambda, float)
        assert cfg.world.image_size == (64, 48)

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            apply_overrides(RunConfig(), {"nope": "1"})
        with pytest.raises(KeyError):
            apply_overrides(RunConfig(), {"world.nope": "1"})

    def test_bad_line(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_config_text("alpha = 1\njunk\n")

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            RunConfig(seed_count=0)
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), {"alpha": "'text'"})

    def test_dump_round_trip(self, tmp_path):
        cfg = RunConfig(alpha=0.7, world=WorldConfig(videos_per_class=9))
        path = tmp_path / "run.cfg"
        path.write_text(dump_config(cfg))
        assert load_config(path) == cfg
