import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tabdet.datagen import DENSE_SCIENTIFIC, generate_page
from tabdet.estimator import TableDetector
from tabdet.geometry import order_blocks
from tabdet.model import forward
from tabdet.postprocess import DetectionResult

TINY_KWARGS = dict(
    hidden_size=8, num_layers=1, num_heads=2, attention_out=8,
    epochs=2, batch_size=4, seed=0,
)


@pytest.fixture(scope="module")
def pages():
    return [generate_page(DENSE_SCIENTIFIC, seed=500 + i) for i in range(8)]


@pytest.fixture(scope="module")
def fitted(pages):
    return TableDetector(**TINY_KWARGS).fit(pages)


class TestSklearnProtocol:
    def test_get_params_returns_constructor_args(self):
        det = TableDetector(**TINY_KWARGS)
        params = det.get_params()
        for key, value in TINY_KWARGS.items():
            assert params[key] == value
        assert params["embed_dim"] is None

    def test_set_params_round_trip(self):
        det = TableDetector()
        det.set_params(hidden_size=32, epochs=7)
        assert det.hidden_size == 32
        assert det.epochs == 7

    def test_clone_preserves_params_drops_state(self, fitted):
        fresh = clone(fitted)
        assert fresh.get_params() == fitted.get_params()
        assert not hasattr(fresh, "weights_")

    def test_repr_mentions_changed_params(self):
        text = repr(TableDetector(hidden_size=8))
        assert "hidden_size=8" in text


class TestFit:
    def test_fit_returns_self_and_sets_state(self, pages):
        det = TableDetector(**TINY_KWARGS)
        assert det.fit(pages) is det
        assert det.weights_.num_params() > 0
        assert len(det.history_) == TINY_KWARGS["epochs"]

    def test_explicit_validation_set(self, pages):
        det = TableDetector(**TINY_KWARGS)
        det.fit(pages[:6], val_pages=pages[6:])
        assert hasattr(det, "weights_")

    def test_single_page_without_val_rejected(self, pages):
        with pytest.raises(ValueError):
            TableDetector(**TINY_KWARGS).fit(pages[:1])

    def test_non_page_input_rejected(self):
        with pytest.raises(TypeError, match="expected Page"):
            TableDetector(**TINY_KWARGS).fit(["not a page", "also not"])

    def test_fit_deterministic_across_instances(self, pages, fitted):
        again = TableDetector(**TINY_KWARGS).fit(pages)
        for name in fitted.weights_.keys():
            assert np.array_equal(fitted.weights_[name], again.weights_[name])


class TestPredict:
    def test_unfitted_raises(self, pages):
        for method in ("predict", "predict_proba"):
            with pytest.raises(NotFittedError):
                getattr(TableDetector(), method)(pages[:1])
        with pytest.raises(NotFittedError):
            TableDetector().save("/tmp/never-written.ckpt")

    def test_predict_shapes(self, fitted, pages):
        results = fitted.predict(pages[:3])
        assert len(results) == 3
        for page, result in zip(pages, results):
            assert isinstance(result, DetectionResult)
            assert result.page_id == page.page_id
            assert len(result.block_labels) == page.num_blocks

    def test_predict_proba_matches_forward_on_ordered_page(self, fitted, pages):
        probs = fitted.predict_proba(pages[:1])[0]
        want, _ = forward(order_blocks(pages[0]), fitted.weights_, fitted.model_config_)
        assert np.array_equal(probs, want)
        assert probs.shape == (pages[0].num_blocks, 4)
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_score_in_unit_interval(self, fitted, pages):
        score = fitted.score(pages)
        assert 0.0 <= score <= 1.0


class TestCheckpointRoundtrip:
    def test_save_and_reload_predicts_identically(self, fitted, pages, tmp_path):
        path = tmp_path / "det.ckpt"
        fitted.save(path)
        loaded = TableDetector.from_checkpoint(path)
        a = fitted.predict_proba(pages[:2])
        b = loaded.predict_proba(pages[:2])
        # float32 storage rounds the weights, so outputs differ a little
        for x, y in zip(a, b):
            assert np.max(np.abs(x - y)) < 1e-5

    def test_reloaded_params_match_config(self, fitted, tmp_path):
        path = tmp_path / "det.ckpt"
        fitted.save(path)
        loaded = TableDetector.from_checkpoint(path)
        assert loaded.hidden_size == TINY_KWARGS["hidden_size"]
        assert loaded.model_config_.num_heads == TINY_KWARGS["num_heads"]
        assert loaded.history_ == []
