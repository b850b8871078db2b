import numpy as np
import pytest

from babylearn.core import BoundingBox
from babylearn.detector import (BBoxRegressor, DetectorModel, LinearModel, TrainConfig, apply_bbox_regression,
                                decode_box, detect, encode_box, fit_linear_svm, hard_negative_mine,
                                svm_objective, train_bbox_regressor, train_detector, train_linear_svm)
from oracles import no_descent, svm_dataset as random_set, svm_reference


class TestLinearSVM:
    def test_separable_symmetry(self):
        e1 = np.array([[1.0, 0.0]])
        m = train_linear_svm(e1, -e1)
        assert m.score(e1)[0] > 0 > m.score(-e1)[0]

    def test_matches_reference_optimizer(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig()
        for _ in range(25):
            pos, neg = random_set(rng)
            fit = fit_linear_svm(pos, neg, cfg)
            ref = svm_reference(pos, neg, cfg)
            assert abs(fit.objective - ref) <= 1e-4 * abs(ref)

    def test_no_descent_direction(self):
        rng = np.random.default_rng(1)
        cfg = TrainConfig()
        for _ in range(10):
            pos, neg = random_set(rng)
            m = train_linear_svm(pos, neg, cfg)
            assert no_descent(m, pos, neg, cfg, rng) <= cfg.convergence_tol

    def test_dual_objective_monotone(self):
        rng = np.random.default_rng(2)
        pos, neg = random_set(rng)
        fit = fit_linear_svm(pos, neg)
        assert np.all(np.diff(fit.dual_history) <= 1e-10)
        assert fit.converged

    def test_duplicated_negatives_with_half_cost(self):
        rng = np.random.default_rng(3)
        pos, neg = random_set(rng)
        cfg = TrainConfig(convergence_tol=1e-9, max_epochs=20000)
        half = TrainConfig(c_negative=cfg.c_negative / 2, convergence_tol=1e-9, max_epochs=20000)
        a = fit_linear_svm(pos, neg, cfg).objective
        b = fit_linear_svm(pos, np.vstack([neg, neg]), half).objective
        assert b == pytest.approx(a, rel=1e-6)

    def test_objective_reported_matches_recomputed(self):
        rng = np.random.default_rng(4)
        pos, neg = random_set(rng)
        fit = fit_linear_svm(pos, neg)
        assert svm_objective(fit.model, pos, neg, TrainConfig()) == pytest.approx(fit.objective, rel=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        pos, neg = random_set(rng)
        assert train_linear_svm(pos, neg) == train_linear_svm(pos, neg)

    def test_errors(self):
        with pytest.raises(ValueError):
            train_linear_svm(np.zeros((0, 3)), np.ones((2, 3)))
        with pytest.raises(ValueError):
            train_linear_svm(np.ones((1, 3)), np.ones((2, 4)))
        with pytest.raises(ValueError):
            TrainConfig(c_positive=0)


class TestHardNegativeMining:
    def setup_method(self):
        rng = np.random.default_rng(6)
        self.pos = rng.normal(2.0, 0.3, size=(5, 2))
        self.neg = rng.normal(-2.0, 0.3, size=(5, 2))
        self.cfg = TrainConfig(hn_rounds=3)
        self.model = train_linear_svm(self.pos, self.neg, self.cfg)

    def test_no_violators_is_fixed_point(self):
        far = np.full((4, 2), -10.0)
        assert hard_negative_mine(self.model, self.pos, self.neg, [far], self.cfg) == self.model

    def test_zero_rounds_is_identity(self):
        cfg = TrainConfig(hn_rounds=0)
        hard = self.pos[:1] * 0.9
        assert hard_negative_mine(self.model, self.pos, self.neg, [hard], cfg) == self.model

    def test_strong_violator_scores_lower(self):
        violator = np.array([[1.5, 1.2]])
        before = self.model.score(violator)[0]
        assert before > -1
        after = hard_negative_mine(self.model, self.pos, self.neg, [violator], self.cfg).score(violator)[0]
        assert after < before

    def test_satisfied_constraints_do_not_decrease(self):
        rng = np.random.default_rng(7)
        source = rng.normal(0.0, 1.5, size=(60, 2))
        before = np.sum(self.model.score(source) <= -1)
        mined = hard_negative_mine(self.model, self.pos, self.neg, [source], self.cfg)
        assert np.sum(mined.score(source) <= -1) >= before

    def test_exhausted_source(self):
        assert hard_negative_mine(self.model, self.pos, self.neg, [], self.cfg) == self.model


class TestDetect:
    def test_single_svm_affine(self):
        m = LinearModel(np.array([0.5, -1.0, 2.0]), 0.25)
        x = np.array([1.0, 2.0, 3.0])
        out = detect([(BoundingBox(5, 5, 2, 2), x)], DetectorModel.single(m))
        assert out[0].score == pytest.approx(0.5 - 2.0 + 6.0 + 0.25, abs=1e-15)

    def test_ensemble_max(self):
        a = LinearModel(np.array([1.0]), -0.8)
        b = LinearModel(np.array([1.0]), -0.3)
        out = detect([(BoundingBox(0, 0, 1, 1), np.array([1.0]))], DetectorModel.ensemble([a, b]))
        assert out[0].score == pytest.approx(0.7)

    def test_duplicate_region_suppressed(self):
        m = DetectorModel.single(LinearModel(np.array([1.0]), 0.0))
        box = BoundingBox(3, 3, 4, 4)
        assert len(detect([(box, np.array([1.0])), (box, np.array([0.5]))], m)) == 1

    def test_empty(self):
        assert detect([], DetectorModel.single(LinearModel(np.zeros(2), 0.0))) == []

    def test_variants(self):
        rng = np.random.default_rng(8)
        pos, neg = rng.normal(1, 0.2, (3, 4)), rng.normal(-1, 0.2, (30, 4))
        assert len(train_detector(pos, neg, exemplar=True).models) == 3
        assert train_detector(pos, neg, exemplar=False).variant == "single"
        with pytest.raises(ValueError):
            DetectorModel("single", ())


class TestBoxRegression:
    def test_round_trip(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            p = BoundingBox(*rng.uniform(0, 50, 2), *rng.uniform(1, 20, 2))
            t = BoundingBox(*rng.uniform(0, 50, 2), *rng.uniform(1, 20, 2))
            back = decode_box(p, encode_box(p, t))
            np.testing.assert_allclose(back.as_array(), t.as_array(), rtol=1e-9, atol=1e-9)

    def test_transform_arithmetic(self):
        heads = tuple(LinearModel(np.zeros(1), v) for v in (1.0, 0.0, 0.0, 0.0))
        out = apply_bbox_regression(BBoxRegressor(heads), BoundingBox(0, 0, 10, 10), np.zeros(1))
        assert out == BoundingBox(10, 0, 10, 10)

    def test_zero_regressor_is_identity(self):
        heads = tuple(LinearModel(np.zeros(3), 0.0) for _ in range(4))
        box = BoundingBox(4, 5, 6, 7)
        assert apply_bbox_regression(BBoxRegressor(heads), box, np.ones(3)) == box

    def test_zero_targets(self):
        rng = np.random.default_rng(10)
        pairs = []
        for _ in range(10):
            b = BoundingBox(*rng.uniform(10, 40, 2), 8, 8)
            pairs.append(((b, rng.normal(size=5)), b))
        reg = train_bbox_regressor(pairs, 1.0)
        X = np.vstack([f for (_, f), _ in pairs])
        np.testing.assert_allclose(reg.predict(X), 0.0, atol=1e-12)

    def test_recovers_constant_shift(self):
        # constant feature plus bias column; ridge shrinks the fit by a known factor
        pairs = [((BoundingBox(20, 20, 10, 10), np.array([1.0])), BoundingBox(25, 20, 10, 10))
                 for _ in range(8)]
        lam = 1e-9
        reg = train_bbox_regressor(pairs, lam)
        assert reg.predict(np.array([1.0]))[0] == pytest.approx(5 / 10, abs=1e-6)

    def test_huge_lambda_predicts_zero(self):
        rng = np.random.default_rng(11)
        pairs = [((BoundingBox(20, 20, 10, 10), rng.normal(size=3)), BoundingBox(22, 21, 11, 9))
                 for _ in range(10)]
        reg = train_bbox_regressor(pairs, 1e12)
        np.testing.assert_allclose(reg.predict(rng.normal(size=(4, 3))), 0.0, atol=1e-9)

    def test_insufficient_pairs(self):
        pair = ((BoundingBox(1, 1, 1, 1), np.zeros(2)), BoundingBox(1, 1, 1, 1))
        with pytest.raises(ValueError, match="insufficient regression data"):
            train_bbox_regressor([pair] * 3)
