import json

import numpy as np
import pytest

from fedsim import evalmetrics, nnet
from fedsim.evalmetrics import METRIC_COLUMNS, MetricsLog
from fedsim.params import ParamVector

NET = nnet.NetworkSpec(input_dim=4, hidden_dims=(5,), feature_dim=4, num_classes=3)


def _model(seed=0):
    rng = np.random.default_rng(seed)
    return (nnet.init_extractor(NET, rng, std=0.4),
            nnet.init_head(NET, rng, std=0.4), None)


def _testset(n_per_class=20, seed=1):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(3), n_per_class)
    x = rng.standard_normal((len(y), 4))
    return x, y


class TestPredictAndGfl:
    def test_predict_uses_personal_logits_when_phi(self):
        theta, psi, _ = _model()
        x, _ = _testset()
        base = evalmetrics.predict(NET, (theta, psi, None), x)
        # a strong phi bias toward class 2 must change predictions
        phi = ParamVector.zeros(nnet.head_layout(NET))
        phi.view("b")[2] = 100.0
        forced = evalmetrics.predict(NET, (theta, psi, phi), x)
        assert (forced == 2).all()
        assert not (base == 2).all()

    def test_argmax_tie_lowest_index(self):
        theta = ParamVector.zeros(nnet.extractor_layout(NET))
        psi = ParamVector.zeros(nnet.head_layout(NET))
        pred = evalmetrics.predict(NET, (theta, psi, None), np.ones((2, 4)))
        assert (pred == 0).all()

    def test_gfl_counts_correct_fraction(self):
        theta = ParamVector.zeros(nnet.extractor_layout(NET))
        psi = ParamVector.zeros(nnet.head_layout(NET))
        x, y = _testset()
        # all-zero model predicts class 0 everywhere
        acc = evalmetrics.gfl_accuracy(NET, (theta, psi, None), x, y)
        assert acc == pytest.approx(np.mean(y == 0))

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError):
            evalmetrics.gfl_accuracy(NET, _model(), np.zeros((0, 4)), [])


class TestPflAccuracy:
    def test_uniform_distribution_equals_gfl_exactly(self):
        x, y = _testset()
        for seed in range(5):
            model = _model(seed)
            gfl = evalmetrics.gfl_accuracy(NET, model, x, y)
            uniform = np.full((7, 3), 1 / 3)
            pfl = evalmetrics.pfl_accuracy(NET, [model] * 7, uniform, x, y)
            assert pfl == gfl  # exact, not approximate

    def test_one_hot_distribution_is_class_recall(self):
        x, y = _testset()
        model = _model(3)
        recall = evalmetrics.per_class_recall(NET, model, x, y)
        dist = np.array([[0.0, 1.0, 0.0]])
        pfl = evalmetrics.pfl_accuracy(NET, [model], dist, x, y)
        assert pfl == pytest.approx(recall[1])

    def test_mean_over_clients(self):
        x, y = _testset()
        models = [_model(0), _model(4)]
        dists = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        r0 = evalmetrics.per_class_recall(NET, models[0], x, y)[0]
        r1 = evalmetrics.per_class_recall(NET, models[1], x, y)[2]
        pfl = evalmetrics.pfl_accuracy(NET, models, dists, x, y)
        assert pfl == pytest.approx((r0 + r1) / 2)

    def test_zero_weight_client_excluded_with_warning(self):
        x, y = _testset()
        # weight only on a class absent from the test labels
        y2 = y.copy()
        y2[y2 == 2] = 0  # class 2 absent now
        models = [_model(0), _model(1)]
        dists = np.array([[0.0, 0.0, 1.0], [0.5, 0.5, 0.0]])
        with pytest.warns(UserWarning, match="zero weight"):
            pfl = evalmetrics.pfl_accuracy(NET, models, dists, x, y2)
        solo = evalmetrics.pfl_accuracy(NET, [models[1]], dists[1:], x, y2)
        assert pfl == solo


class TestRecallAndDrift:
    def test_recall_nan_for_absent_class(self):
        x, y = _testset()
        y = np.where(y == 2, 0, y)
        rec = evalmetrics.per_class_recall(NET, _model(), x, y)
        assert np.isnan(rec[2]) and not np.isnan(rec[0])

    def test_drift_stats_zero_for_identical(self):
        theta, psi, _ = _model()
        mean, var = evalmetrics.drift_stats([theta, theta.copy()], theta)
        assert mean == 0.0 and var == 0.0

    def test_drift_stats_values(self):
        lay = (("w", (2,)),)
        g = ParamVector(np.zeros(2), lay)
        a = ParamVector(np.array([3.0, 4.0]), lay)   # norm 5
        b = ParamVector(np.array([0.0, 1.0]), lay)   # norm 1
        mean, var = evalmetrics.drift_stats([a, b], g)
        assert mean == pytest.approx(3.0)
        assert var == pytest.approx(4.0)  # population variance of (5, 1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evalmetrics.drift_stats([], _model()[0])


class TestCrossClientMatrix:
    def test_shape_and_diagonal_semantics(self):
        x, y = _testset()
        models = [_model(s) for s in range(3)]
        dists = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        mat = evalmetrics.cross_client_matrix(NET, models, dists, x, y)
        assert mat.shape == (3, 3)
        for i in range(3):
            rec = evalmetrics.per_class_recall(NET, models[i], x, y)
            for j in range(3):
                assert mat[i, j] == pytest.approx(rec[j])


class TestMetricsLog:
    def _row(self, r=0, **kw):
        row = {c: 0.5 for c in METRIC_COLUMNS}
        row["round"] = r
        row.update(kw)
        return row

    def test_missing_column_rejected(self):
        log = MetricsLog()
        with pytest.raises(ValueError, match="missing"):
            log.append(round=0, gfl_global=0.5)

    def test_out_of_range_accuracy_rejected(self):
        log = MetricsLog()
        with pytest.raises(ValueError, match="outside"):
            log.append(**self._row(gfl_global=1.5))

    def test_csv_round_trip_bytes(self):
        log = MetricsLog()
        log.append(**self._row(0, gfl_global=1 / 3))
        log.append(**self._row(1, train_loss_mean=float("nan")))
        a = log.to_csv()
        b = log.to_csv()
        assert a == b
        lines = a.strip().split("\n")
        assert lines[0] == ",".join(METRIC_COLUMNS)
        assert lines[1].startswith("0,") and lines[2].startswith("1,")
        # repr-based floats survive exact parsing
        assert float(lines[1].split(",")[1]) == 1 / 3

    def test_json_keyed_by_round(self):
        log = MetricsLog()
        log.append(**self._row(0))
        log.append(**self._row(5))
        payload = json.loads(log.to_json())
        assert set(payload) == {"0", "5"}
        assert payload["5"]["gfl_global"] == 0.5

    def test_last(self):
        log = MetricsLog()
        log.append(**self._row(0))
        log.append(**self._row(1, gfl_global=0.25))
        assert log.last()["gfl_global"] == 0.25


def test_matrix_to_csv_parses_back():
    mat = np.array([[0.5, 1 / 3], [0.25, 1.0]])
    text = evalmetrics.matrix_to_csv(mat)
    back = np.array([[float(v) for v in line.split(",")]
                     for line in text.strip().split("\n")])
    assert np.array_equal(back, mat)
