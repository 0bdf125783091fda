"""scikit-learn style wrapper around the training harness."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import Manifest, Modality, SampleRecord, Split
from .harness import TrainConfig, Trainer, extract_features
from .metrics import Metric, cmc_map, pairwise_distances
from .validation import check_identities, check_images, check_modalities

__all__ = ["ICREReID"]

_DEFAULTS = TrainConfig()


class ICREReID(TransformerMixin, BaseEstimator):
    """Cross-modal re-identification embedder.

    ``fit(X, y, modalities=...)`` trains the network on an image array;
    ``transform`` returns BNNeck retrieval embeddings; ``predict`` returns
    the closed-set identity with the highest classifier logit.

    Parameters mirror :class:`icre.harness.TrainConfig`; anything not listed
    can be passed through ``extra``.
    """

    def __init__(
        self,
        epochs=40,
        P=5,
        K=4,
        lam=_DEFAULTS.lam,
        rho1=_DEFAULTS.rho1,
        rho2=_DEFAULTS.rho2,
        loss="ICG",
        mpfr_on=True,
        sdce_on=True,
        variant="TINY",
        seed=0,
        extra=None,
    ):
        self.epochs = epochs
        self.P = P
        self.K = K
        self.lam = lam
        self.rho1 = rho1
        self.rho2 = rho2
        self.loss = loss
        self.mpfr_on = mpfr_on
        self.sdce_on = sdce_on
        self.variant = variant
        self.seed = seed
        self.extra = extra

    def _config(self, image_size) -> TrainConfig:
        params = {k: v for k, v in self.get_params().items() if k != "extra"}
        params.update(self.extra or {})
        params.setdefault("image_size", tuple(image_size))
        return TrainConfig(**params)

    def fit(self, X, y, modalities=None):
        X = check_images(X)
        mods = check_modalities(modalities, X.shape[0])
        codes, self.classes_ = check_identities(y, X.shape[0])
        self.config_ = self._config(X.shape[-2:])
        records = tuple(
            SampleRecord(f"<memory>/{i}", int(c), Modality.VIS if m == 0 else Modality.IR, 0)
            for i, (c, m) in enumerate(zip(codes.tolist(), mods.tolist()))
        )
        trainer = Trainer(self.config_, Manifest(records, Split.TRAIN), images=X)
        trainer.fit()
        self.trainer_ = trainer
        self.model_ = trainer.model.eval()
        self.history_ = trainer.history
        self.n_features_out_ = self.model_.bnneck.num_features
        return self

    def transform(self, X, modalities=None):
        check_is_fitted(self, "model_")
        X = check_images(X)
        mods = check_modalities(modalities, X.shape[0])
        return extract_features(self.model_, X, mods)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X, fit_params.get("modalities"))

    @torch.no_grad()
    def predict(self, X, modalities=None):
        check_is_fitted(self, "model_")
        X = check_images(X)
        mods = check_modalities(modalities, X.shape[0])
        self.model_.eval()
        logits = self.model_(X, mods)
        return self.classes_[logits.argmax(1).numpy()]

    def score(self, X, y, modalities=None, gallery=None, metric=Metric.COSINE_DISTANCE):
        """Retrieval mAP of queries ``X`` against ``gallery = (X_g, y_g, modalities_g)``.

        Without a gallery this is closed-set classification accuracy.
        """
        if gallery is None:
            return float(np.mean(self.predict(X, modalities) == np.asarray(y)))
        Xg, yg, mg = gallery
        dist = pairwise_distances(self.transform(X, modalities), self.transform(Xg, mg), metric)
        return cmc_map(dist, np.asarray(y), np.asarray(yg)).map

    def get_config(self) -> dict:
        check_is_fitted(self, "config_")
        return dataclasses.asdict(self.config_)
