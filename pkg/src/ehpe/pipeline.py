"""Inference over the two stages and checkpoint <-> model plumbing."""
from __future__ import annotations

import numpy as np

from . import checkpoint as ckpt_io
from .handsim import N_JOINTS, Camera, unproject_from_25d
from .pg_stage import ModelConfigPG, PGStage
from .tw_stage import ModelConfigTW, TWStage

EVAL_BATCH = 64


class StageMismatch(ValueError):
    """A checkpoint cannot serve the requested kind of prediction."""


def tw_outputs(tw: TWStage, images: np.ndarray, batch: int = EVAL_BATCH) -> tuple[np.ndarray, np.ndarray]:
    """Decoded TW joints (pixels / depth units) and feature maps, untaped."""
    joints, feats = [], []
    stride = tw.config.volume_stride
    for s in range(0, len(images), batch):
        out = tw.forward(images[s:s + batch])
        joints.append(out.joints_pixels(stride))
        feats.append(out.featmap.data)
    if not joints:
        c = tw.config.channels[-1]
        return np.empty((0, tw.config.n_joints, 3)), np.empty((0, c, *tw.config.feature_size))
    return np.concatenate(joints), np.concatenate(feats)


def to_world(joints25d: np.ndarray, camera: Camera | None = None) -> np.ndarray:
    """Map 2.5D joints to canonical hand units. The map is affine and shared
    by prediction and ground truth, so per-sample camera offsets cancel in
    every error metric."""
    j = np.asarray(joints25d, dtype=float)
    return unproject_from_25d(j.reshape(-1, 3), camera).reshape(j.shape)


class Pipeline:
    """TW stage, optionally followed by a PG stage."""

    def __init__(self, tw: TWStage, pg: PGStage | None = None):
        self.tw, self.pg = tw, pg

    @property
    def tw_only(self) -> bool:
        return self.pg is None

    def predict(self, images: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
        """(N, 21, 3) joints in pixels / depth units."""
        joints, feats = tw_outputs(self.tw, images, batch)
        if self.pg is None:
            if self.tw.config.n_joints != N_JOINTS:
                raise StageMismatch(f"TW-only checkpoint supervises {self.tw.config.n_joints} joints; "
                                    "full-hand prediction needs a PG checkpoint")
            order = np.argsort(self.tw.config.joints)
            return joints[:, order]
        return self.predict_from_cache(joints, feats, batch)

    def predict_from_cache(self, joints: np.ndarray, feats: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
        pg = self.pg
        tw_in = joints if pg.config.tw_nodes else None
        out = [pg.predict(None if tw_in is None else tw_in[s:s + batch], feats[s:s + batch])
               for s in range(0, len(feats), batch)]
        return np.concatenate(out) if out else np.empty((0, N_JOINTS, 3))


# ------------------------------------------------------------------ checkpoints

def tw_checkpoint(tw: TWStage, extra: dict | None = None) -> ckpt_io.Checkpoint:
    meta = {"model_config": tw.config.to_dict(), **(extra or {})}
    return ckpt_io.Checkpoint("TW", meta, tw.params.state(), {k: False for k in tw.params})


def pg_checkpoint(tw: TWStage, pg: PGStage, tw_sha256: str, extra: dict | None = None) -> ckpt_io.Checkpoint:
    meta = {"model_config": pg.config.to_dict(), "tw_config": tw.config.to_dict(),
            "tw_checkpoint_sha256": tw_sha256, "tw_param_digest": tw.params.digest(), **(extra or {})}
    params = {f"tw.{k}": v for k, v in tw.params.state().items()}
    params.update({f"pg.{k}": v for k, v in pg.params.state().items()})
    frozen = {k: k.startswith("tw.") for k in params}
    return ckpt_io.Checkpoint("PG", meta, params, frozen)


def tw_from_checkpoint(ck: ckpt_io.Checkpoint) -> TWStage:
    if ck.stage == "TW":
        cfg, state = ModelConfigTW.from_dict(ck.metadata["model_config"]), ck.params
    else:
        cfg, state = ModelConfigTW.from_dict(ck.metadata["tw_config"]), ck.subset("tw.")
    tw = TWStage(cfg, seed=0)
    tw.params.load_state(state)
    return tw


def pipeline_from_checkpoint(ck: ckpt_io.Checkpoint, tw_ck: ckpt_io.Checkpoint | None = None) -> Pipeline:
    """Rebuild the inference pipeline. For a PG checkpoint an explicitly
    supplied TW checkpoint must match the recorded content hash."""
    tw = tw_from_checkpoint(ck)
    if ck.stage == "TW":
        return Pipeline(tw)
    if tw_ck is not None:
        if tw_ck.stage != "TW":
            raise StageMismatch(f"expected a TW checkpoint, found stage {tw_ck.stage}")
        want = ck.metadata.get("tw_checkpoint_sha256")
        if tw_ck.sha256 is not None and want is not None and tw_ck.sha256 != want:
            raise StageMismatch(f"TW checkpoint hash {tw_ck.sha256[:12]} does not match the "
                                f"one this PG checkpoint was trained on ({want[:12]})")
    if tw.params.digest() != ck.metadata.get("tw_param_digest", tw.params.digest()):
        raise ckpt_io.CheckpointError("embedded TW parameters do not match their recorded digest")
    cfg = ModelConfigPG.from_dict(ck.metadata["model_config"])
    pg_state = ck.subset("pg.")
    mean = None
    if cfg.coord_init == "mean" and cfg.free_nodes:
        mean = np.zeros((N_JOINTS, 3))   # overwritten by the stored embedding
    pg = PGStage(cfg, seed=0, mean_pose=mean)
    pg.params.load_state(pg_state)
    tw.params.freeze()
    return Pipeline(tw, pg)
