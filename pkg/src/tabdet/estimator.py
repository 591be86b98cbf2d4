"""Scikit-learn style facade over the pipeline.

TableDetector wraps config construction, training, detection, and
scoring behind the familiar fit/predict/score surface; get_params and
set_params come from BaseEstimator, so the detector composes with
sklearn model-selection utilities. X is always a sequence of Page
objects; the gold labels ride on the pages, so y is accepted but
ignored.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .geometry import Page, order_blocks
from .io import load_checkpoint, save_checkpoint
from .metrics import PageEval, evaluate_dataset
from .model import ModelConfig, forward
from .postprocess import DetectionResult, detect_tables
from .training import TrainConfig, train


class TableDetector(BaseEstimator):
    """Trainable table detector with a sklearn-style interface."""

    def __init__(
        self,
        hidden_size: int = 128,
        num_layers: int = 8,
        num_heads: int = 4,
        attention_out: int = 128,
        embed_dim: int | None = None,
        epochs: int = 300,
        batch_size: int = 256,
        base_lr: float = 1e-3,
        warmup_fraction: float = 0.1,
        seed: int = 0,
    ):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.attention_out = attention_out
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_fraction = warmup_fraction
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            hidden_size=self.hidden_size,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            attention_out=self.attention_out,
            embed_dim=self.embed_dim,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            warmup_fraction=self.warmup_fraction,
            seed=self.seed,
        )

    @staticmethod
    def _check_pages(X: Sequence[Page]) -> list[Page]:
        pages = list(X)
        for i, page in enumerate(pages):
            if not isinstance(page, Page):
                raise TypeError(f"X[{i}] is {type(page).__name__}, expected Page")
        return pages

    def fit(self, X: Sequence[Page], y=None, val_pages: Sequence[Page] | None = None):
        """Train on labeled pages; returns self.

        Without an explicit validation set, the last tenth of X (at least
        one page) is held out for checkpoint selection and the rest is
        trained on.
        """
        pages = self._check_pages(X)
        if val_pages is None:
            n_val = max(1, len(pages) // 10)
            if len(pages) <= n_val:
                raise ValueError("need more than one page to split off validation")
            train_pages, val = pages[:-n_val], pages[-n_val:]
        else:
            train_pages, val = pages, self._check_pages(val_pages)
        self.model_config_ = self._model_config()
        self.weights_, self.history_ = train(
            train_pages, val, self.model_config_, self._train_config()
        )
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "weights_"):
            raise NotFittedError("this TableDetector is not fitted; call fit or load")

    def predict(self, X: Sequence[Page]) -> list[DetectionResult]:
        """Detected tables for each page."""
        self._require_fitted()
        return [
            detect_tables(page, self.weights_, self.model_config_)
            for page in self._check_pages(X)
        ]

    def predict_proba(self, X: Sequence[Page]) -> list[np.ndarray]:
        """Per-page (n_blocks, 4) class probabilities in reading order."""
        self._require_fitted()
        out = []
        for page in self._check_pages(X):
            probs, _ = forward(order_blocks(page), self.weights_, self.model_config_)
            out.append(probs)
        return out

    def score(self, X: Sequence[Page], y=None) -> float:
        """Micro-averaged detection F1 at IoU 0.5 against the pages' own
        ground-truth tables."""
        results = self.predict(X)
        entries = [
            PageEval(page.page_id, result.detections, page.tables)
            for page, result in zip(X, results)
        ]
        return evaluate_dataset(entries, thresholds=(0.5,)).at(0.5).f1

    def save(self, path) -> None:
        """Write the fitted weights as a checkpoint."""
        self._require_fitted()
        save_checkpoint(self.weights_, self.model_config_, path)

    @classmethod
    def from_checkpoint(cls, path) -> "TableDetector":
        """Rebuild a fitted detector from a checkpoint file."""
        weights, config = load_checkpoint(path)
        detector = cls(
            hidden_size=config.hidden_size,
            num_layers=config.num_layers,
            num_heads=config.num_heads,
            attention_out=config.attention_out,
            embed_dim=config.embed_dim,
        )
        detector.model_config_ = config
        detector.weights_ = weights
        detector.history_ = []
        return detector
