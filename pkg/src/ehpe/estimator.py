"""scikit-learn style wrapper around the two-phase pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt_io
from .handsim import CATEGORY, HandDataset
from .metrics import pa_mpjpe
from .pipeline import pipeline_from_checkpoint, to_world
from .trainer import TrainConfig, desk_config, train_pg, train_tw
from .validation import check_images, check_xy


class HandPoseEstimator(BaseEstimator):
    """Images (N, 3, 64, 64) in, 2.5D joints (N, 21, 3) out.

    ``fit`` trains the TW stage, freezes it, then trains the PG stage.
    ``config`` holds any further TrainConfig keys (model widths, loss
    weights, branch switches); it applies to both phases. ``lr=None`` keeps
    each phase's reference learning rate.
    """

    def __init__(self, tw_joints="W+T", tw_epochs=30, pg_epochs=80, batch_size=32, lr=None,
                 validation_fraction=0.0, seed=0, config=None):
        self.tw_joints = tw_joints
        self.tw_epochs = tw_epochs
        self.pg_epochs = pg_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.config = config

    def _phase_config(self, phase: str, epochs: int) -> TrainConfig:
        ref = desk_config(phase)
        default_epochs = ref.epochs
        # keep the reference milestones at the same relative positions
        miles = tuple(m * epochs // default_epochs for m in ref.lr_milestones) if default_epochs else ()
        miles = tuple(sorted({m for m in miles if 0 < m < epochs}))
        lr = ref.lr_initial if self.lr is None else self.lr
        return desk_config(phase, epochs=epochs, batch_size=self.batch_size, lr_initial=lr,
                           lr_milestones=miles, seed=self.seed, tw_joints=self.tw_joints,
                           **(self.config or {}))

    def _split(self, ds: HandDataset) -> tuple[HandDataset, HandDataset]:
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        n_val = int(round(self.validation_fraction * len(ds)))
        mask = np.zeros(len(ds), dtype=bool)
        mask[np.random.default_rng(self.seed).permutation(len(ds))[:n_val]] = True
        return ds.subset(~mask), ds.subset(mask)

    def fit(self, X, y):
        X, y = check_xy(X, y)
        n = len(X)
        ds = HandDataset(X, y, np.tile(CATEGORY, (n, 1)).astype(np.uint8), np.arange(n, dtype=np.int64))
        pair = self._split(ds)
        tw = train_tw(self._phase_config("TW", self.tw_epochs), pair)
        pg = train_pg(self._phase_config("PG", self.pg_epochs), pair, tw.checkpoint)
        self.tw_checkpoint_ = tw.checkpoint
        self.checkpoint_ = pg.checkpoint
        self.log_ = tw.log + pg.log
        self.pipeline_ = pg.pipeline
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "pipeline_")
        return self.pipeline_.predict(check_images(X, self.pipeline_.tw.config.image_size))

    def score(self, X, y) -> float:
        """Negative PA-MPJPE in canonical hand units (higher is better)."""
        X, y = check_xy(X, y)
        return -pa_mpjpe(to_world(self.predict(X)), to_world(y))

    def save(self, path) -> str:
        check_is_fitted(self, "checkpoint_")
        return ckpt_io.save(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, path) -> "HandPoseEstimator":
        ck = ckpt_io.load(path, expect_stage="PG")
        tc = ck.metadata.get("train_config", {})
        est = cls(tw_joints=tc.get("tw_joints", "W+T"), seed=tc.get("seed", 0))
        est.checkpoint_ = ck
        est.pipeline_ = pipeline_from_checkpoint(ck)
        return est
