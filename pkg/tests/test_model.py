import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hierfi.model import (
    AdapterModel,
    CapabilityError,
    Dataset,
    FunctionModel,
    PointHash,
    ProtocolError,
    SyntheticModel,
    auroc,
    check_consistency,
    evaluate_loss,
    losses,
    make_synthetic_model,
    read_dataset,
    write_dataset,
)
from hierfi.synth import GroundTruth

ADAPTER = Path(__file__).parent / "fixtures" / "adapter_sum.py"


def adapter(mode="identity", arity=2):
    return AdapterModel([sys.executable, str(ADAPTER), mode, str(arity)])


def bits_matrix(count, width):
    ints = np.arange(count)
    return ((ints[:, None] >> np.arange(width)[None, :]) & 1).astype(np.uint8)


class TestDataset:
    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), np.zeros(3))

    def test_empty(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 2)), np.zeros(0))

    def test_csv_roundtrip(self, tmp_path):
        data = Dataset(np.array([[0, 1.5], [1, 0]]), np.array([0.25, 1.0]), ["a", "b"])
        path = tmp_path / "d.csv"
        write_dataset(data, path)
        back = read_dataset(path)
        np.testing.assert_array_equal(back.X, data.X)
        np.testing.assert_array_equal(back.y, data.y)
        assert back.column_names == ["a", "b"]

    def test_separate_targets(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,0\n0,1\n")
        (tmp_path / "y.csv").write_text("target\n3\n4\n")
        data = read_dataset(tmp_path / "x.csv", tmp_path / "y.csv")
        np.testing.assert_array_equal(data.y, [3, 4])

    def test_missing_targets(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,0\n")
        with pytest.raises(ValueError, match="__target__"):
            read_dataset(tmp_path / "x.csv")


class TestLoss:
    def test_squared(self):
        assert evaluate_loss("squared_error", [1], [1]).tolist() == [0]
        assert evaluate_loss("squared_error", [0], [2]).tolist() == [4]

    def test_cross_entropy(self):
        assert evaluate_loss("binary_cross_entropy", [1], [0.5])[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_cross_entropy_clamps(self, caplog):
        out = evaluate_loss("binary_cross_entropy", [1, 0], [0.0, 1.0])
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(-math.log(1e-12))
        assert "clamped" in caplog.text

    def test_zero_iff_equal(self):
        assert evaluate_loss("binary_cross_entropy", [1, 0], [1.0, 0.0]).max() < 1e-11
        assert evaluate_loss("squared_error", [0.3], [0.3])[0] == 0
        assert evaluate_loss("binary_cross_entropy", [1], [0.9])[0] > 0

    def test_unknown(self):
        with pytest.raises(ValueError):
            evaluate_loss("hinge", [1], [1])

    def test_losses_uses_model(self):
        model = FunctionModel(lambda X: X[:, 0], arity=1)
        data = Dataset(np.array([[1.0], [3.0]]), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(losses(model, data, "squared_error"), [0, 4])


class TestAuroc:
    def test_perfect_and_inverted(self):
        assert auroc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
        assert auroc([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]) == 0.0

    def test_ties_half(self):
        assert auroc([0, 1], [0.5, 0.5]) == 0.5

    def test_non_binary_is_nan(self):
        assert math.isnan(auroc([0, 2], [0.1, 0.2]))


class TestFunctionModel:
    def test_identity_g_is_predict(self):
        model = FunctionModel(lambda X: X.sum(axis=1), arity=2)
        X = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(model.g(X), model.predict(X))
        assert model.supports_g

    def test_logistic_without_g(self):
        model = FunctionModel(lambda X: X[:, 0], transfer="logistic")
        assert not model.supports_g
        with pytest.raises(CapabilityError):
            model.g(np.zeros((1, 1)))

    def test_logistic_from_g(self):
        model = FunctionModel(g_fn=lambda X: X[:, 0], transfer="logistic")
        X = np.array([[0.0], [2.0]])
        np.testing.assert_allclose(model.predict(X), [0.5, 1 / (1 + math.exp(-2))])
        assert check_consistency(model, X) <= 1e-9

    def test_inconsistent_model_detected(self):
        model = FunctionModel(lambda X: X[:, 0], transfer="logistic", g_fn=lambda X: X[:, 0])
        with pytest.raises(ValueError):
            check_consistency(model, np.array([[1.0]]))

    def test_arity(self):
        model = FunctionModel(lambda X: X[:, 0], arity=2)
        with pytest.raises(ValueError):
            model.predict(np.zeros((1, 3)))


class TestSyntheticModel:
    def test_linear(self):
        model = SyntheticModel(GroundTruth(1, {0: 1.0}), sigma=0)
        np.testing.assert_array_equal(model.predict([[1], [0]]), [1, 0])

    def test_product_term(self):
        model = SyntheticModel(GroundTruth(2, {}, {(0, 1): 1.0}), sigma=0)
        np.testing.assert_array_equal(model.predict([[1, 1], [1, 0]]), [1, 0])

    def test_sigma_zero_equals_truth(self):
        gt = GroundTruth(4, {0: 0.3, 2: 0.7}, {(0, 2): 0.5})
        X = bits_matrix(16, 4)
        np.testing.assert_array_equal(make_synthetic_model(gt, 0.0).predict(X), gt.evaluate(X))

    def test_deterministic_and_call_order_independent(self):
        gt = GroundTruth(3, {0: 0.5})
        model = SyntheticModel(gt, sigma=0.2, seed=4)
        X = bits_matrix(8, 3)
        first = model.predict(X)
        np.testing.assert_array_equal(model.predict(X), first)
        np.testing.assert_array_equal(model.predict(X[::-1]), first[::-1])
        np.testing.assert_array_equal(model.predict(X[3:4]), first[3:4])

    def test_noise_depends_on_seed(self):
        gt = GroundTruth(3, {0: 0.5})
        X = bits_matrix(8, 3)
        assert not np.array_equal(SyntheticModel(gt, 0.2, 1).noise(X), SyntheticModel(gt, 0.2, 2).noise(X))

    def test_same_noise_across_processes(self):
        code = (
            "import numpy as np;from hierfi.model import SyntheticModel;from hierfi.synth import GroundTruth;"
            "m=SyntheticModel(GroundTruth(3,{0:0.5}),0.3,7);"
            "print(repr(m.predict(np.array([[1,0,1],[0,1,1]])).tolist()))"
        )
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
        here = SyntheticModel(GroundTruth(3, {0: 0.5}), 0.3, 7).predict(np.array([[1, 0, 1], [0, 1, 1]])).tolist()
        assert out.strip() == repr(here)

    def test_binary_fast_path_matches_generic_hash(self):
        h = PointHash(40)
        X = np.random.default_rng(0).integers(0, 2, size=(300, 40))
        np.testing.assert_array_equal(h(X), h.hash_generic(X))
        np.testing.assert_array_equal(h(X.astype(float)), h.hash_generic(X))

    def test_mixed_rows(self):
        gt = GroundTruth(2, {0: 1.0})
        model = SyntheticModel(gt, sigma=0.5, seed=1)
        X = np.array([[1.0, 0.0], [0.5, 2.0], [1.0, 0.0]])
        out = model.predict(X)
        assert out[0] == out[2]
        assert out[1] == model.predict(X[1:2])[0]

    def test_negative_zero_same_point(self):
        model = SyntheticModel(GroundTruth(2, {}), sigma=1.0)
        assert model.predict([[-0.0, 0.5]])[0] == model.predict([[0.0, 0.5]])[0]

    def test_noise_distribution(self):
        sigma = 0.7
        model = SyntheticModel(GroundTruth(17, {}), sigma=sigma, seed=3)
        gamma = model.noise(bits_matrix(100_000, 17))
        assert abs(gamma.mean()) < 3 * sigma / math.sqrt(1e5)
        assert abs(gamma.var() / sigma**2 - 1) < 0.05

    def test_noise_distribution_generic_path(self):
        sigma = 1.3
        model = SyntheticModel(GroundTruth(3, {}), sigma=sigma, seed=5)
        X = np.random.default_rng(1).normal(size=(100_000, 3))
        gamma = model.noise(X)
        assert abs(gamma.mean()) < 3 * sigma / math.sqrt(1e5)
        assert abs(gamma.var() / sigma**2 - 1) < 0.05

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            SyntheticModel(GroundTruth(1, {}), sigma=-1)


class TestAdapter:
    def test_predict_and_g(self):
        with adapter() as model:
            assert model.arity == 2 and model.transfer == "identity"
            X = np.array([[1.0, 2.0], [3.0, 4.0]])
            np.testing.assert_array_equal(model.predict(X), [3, 7])
            np.testing.assert_array_equal(model.g(X), [3, 7])

    def test_logistic_consistency(self):
        with adapter("logistic") as model:
            X = np.array([[0.5, -1.0], [2.0, 0.0]])
            assert check_consistency(model, X) <= 1e-9

    def test_batches_split(self):
        with AdapterModel([sys.executable, str(ADAPTER), "identity", "1"], max_rows=3) as model:
            X = np.arange(8, dtype=float).reshape(8, 1)
            np.testing.assert_array_equal(model.predict(X), np.arange(8))
            assert model._next_id == 3

    @pytest.mark.parametrize("mode", ["crash", "garbage", "short"])
    def test_protocol_errors_name_request(self, mode):
        model = adapter(mode)
        try:
            with pytest.raises(ProtocolError) as err:
                model.predict(np.zeros((2, 2)))
            assert err.value.request_id == 0
            assert "request 0" in str(err.value)
        finally:
            model.close()

    def test_arity_mismatch(self):
        with adapter() as model:
            with pytest.raises(ValueError):
                model.predict(np.zeros((1, 3)))

    def test_bad_command(self):
        with pytest.raises(ProtocolError):
            AdapterModel(["/nonexistent/adapter"])
