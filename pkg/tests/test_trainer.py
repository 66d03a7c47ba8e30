import json

import numpy as np
import pytest

from ehpe import autodiff as ad
from ehpe import checkpoint as ck
from ehpe.autodiff import Tensor
from ehpe.nn import Params
from ehpe.trainer import (AdamState, ConfigError, NonFiniteError, TrainConfig, adam_step, epoch_order,
                          lr_schedule, strip_timing, train_pg, train_tw)
from ehpe.tw_stage import TWStage, loss_tw, tw_targets

from conftest import TINY


def tw_cfg(**kw):
    return TrainConfig(**{"phase": "TW", "epochs": 1, "batch_size": 16, **TINY, **kw})


def pg_cfg(**kw):
    return TrainConfig(**{"phase": "PG", "epochs": 1, "batch_size": 16, **TINY, **kw})


# ---------------------------------------------------------------- adam

def test_adam_first_step_is_signed_lr():
    p = Params()
    x = p.add("x", np.array([1.0, -2.0, 3.0]))
    x.grad = np.array([10.0, -4.0, 0.5])
    adam_step(p, AdamState(), lr=0.01)
    np.testing.assert_allclose(x.data, [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], atol=1e-8)


def test_adam_zero_gradient():
    p = Params()
    x = p.add("x", np.array([1.0, 2.0]))
    x.grad = np.zeros(2)
    st = AdamState()
    adam_step(p, st, lr=0.1)
    assert st.step == 1
    np.testing.assert_array_equal(x.data, [1.0, 2.0])


def test_adam_matches_scalar_oracle():
    p = Params()
    x = p.add("x", np.array(1.0))
    st = AdamState()
    xs, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        x.grad = 2.0 * x.data
        adam_step(p, st, lr=0.1)
        g = 2.0 * xs
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        xs = xs - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(x.data.item() - xs) <= 1e-12


def test_adam_non_finite_names_parameter():
    p = Params()
    a = p.add("good", np.ones(2))
    b = p.add("bad.weight", np.ones(2))
    a.grad = np.ones(2)
    b.grad = np.array([1.0, np.nan])
    with pytest.raises(NonFiniteError, match="bad.weight"):
        adam_step(p, AdamState(), lr=0.1)
    np.testing.assert_array_equal(a.data, np.ones(2))   # nothing applied


def test_adam_skips_frozen():
    p = Params()
    a = p.add("a", np.ones(2))
    p.freeze()
    a.grad = np.ones(2)
    adam_step(p, AdamState(), lr=0.1)
    np.testing.assert_array_equal(a.data, np.ones(2))


# ---------------------------------------------------------------- schedule / config

def test_lr_schedule_milestones():
    cfg = TrainConfig(lr_initial=1.0, lr_milestones=(15, 20), lr_decay=0.1)
    assert lr_schedule(0, cfg) == 1.0
    assert lr_schedule(14, cfg) == 1.0
    assert lr_schedule(17, cfg) == pytest.approx(0.1)
    assert lr_schedule(21, cfg) == pytest.approx(0.01)


def test_epoch_order_seeded():
    np.testing.assert_array_equal(epoch_order(10, 5, 2), np.random.default_rng(7).permutation(10))
    assert not np.array_equal(epoch_order(50, 5, 0), epoch_order(50, 5, 1))


def test_config_unknown_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"phase": "TW", "epochz": 3}))
    with pytest.raises(ConfigError, match="epochz"):
        TrainConfig.from_json(tmp_path / "c.json")


def test_config_round_trip(tmp_path):
    cfg = pg_cfg(lr_milestones=(3, 5), edge_weights="fixed")
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("bad", [dict(phase="XX"), dict(epochs=-1), dict(batch_size=0), dict(lr_initial=0.0),
                                 dict(lr_milestones=(5, 3)), dict(phase="PG", spi=False, fem=False),
                                 dict(tw_joints="W+Q")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def tw_run(tiny_dataset):
    return train_tw(tw_cfg(epochs=2), tiny_dataset)


def test_tw_log_structure(tw_run):
    log = tw_run.log
    assert [r["epoch"] for r in log] == [-1, 0, 1]
    for r in log:
        assert r["phase"] == "TW" and {"L_H", "L_ED", "L_R", "total"} <= set(r["train"])
        assert "wall_ms" in r and "joint_error" in r["val"]
    assert tw_run.checkpoint.stage == "TW"


def test_tw_reproducible(tw_run, tiny_dataset):
    again = train_tw(tw_cfg(epochs=2), tiny_dataset)
    assert again.checkpoint_sha256 == tw_run.checkpoint_sha256
    assert strip_timing(again.log) == strip_timing(tw_run.log)


def test_tw_epoch0_loss_matches_replay(tiny_dataset):
    # a vanishing learning rate leaves the weights bit-identical, so the
    # logged epoch-0 loss must equal a fresh forward pass in the same order
    cfg = tw_cfg(lr_initial=1e-300)
    res = train_tw(cfg, tiny_dataset)
    train = tiny_dataset.subset("train")
    model = TWStage(cfg.tw_model_config(), seed=cfg.seed)
    order = epoch_order(len(train), cfg.seed, 0)
    total, n = 0.0, 0
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s:s + cfg.batch_size]
        hm, tgt = tw_targets(train.joints25d[idx], model.config)
        out = model.forward(train.images[idx])
        rep = loss_tw(out.heatmap2d, hm, out.joints, tgt, model.params.weight_matrices())
        total += len(idx) * rep.total.item()
        n += len(idx)
    assert res.log[1]["train"]["total"] == pytest.approx(total / n, rel=1e-12)


def test_tw_writes_files(tmp_path, tiny_dataset_file):
    cfg = tw_cfg(dataset=str(tiny_dataset_file), checkpoint_out=str(tmp_path / "tw.ckpt"),
                 log_path=str(tmp_path / "tw.ndjson"))
    res = train_tw(cfg)
    assert ck.file_sha256(tmp_path / "tw.ckpt") == res.checkpoint_sha256
    lines = (tmp_path / "tw.ndjson").read_text().splitlines()
    assert [json.loads(x) for x in lines] == res.log


def test_pg_freeze_and_provenance(tw_run, tiny_dataset):
    before = tw_run.pipeline.tw.params.digest()
    res = train_pg(pg_cfg(epochs=2), tiny_dataset, tw_run.checkpoint)
    assert res.tw_digest_before == res.tw_digest_after == before
    assert res.checkpoint.stage == "PG"
    assert res.checkpoint.metadata["tw_checkpoint_sha256"] == tw_run.checkpoint_sha256
    tw_names = [k for k in res.checkpoint.params if k.startswith("tw.")]
    assert tw_names and all(res.checkpoint.frozen[k] for k in tw_names)
    assert not any(v for k, v in res.checkpoint.frozen.items() if k.startswith("pg."))
    for k in tw_names:
        np.testing.assert_array_equal(res.checkpoint.params[k], tw_run.checkpoint.params[k[3:]])


def test_pg_reproducible(tw_run, tiny_dataset):
    a = train_pg(pg_cfg(epochs=1), tiny_dataset, tw_run.checkpoint)
    b = train_pg(pg_cfg(epochs=1), tiny_dataset, tw_run.checkpoint)
    assert a.checkpoint_sha256 == b.checkpoint_sha256
    assert strip_timing(a.log) == strip_timing(b.log)


def test_pg_requires_tw_checkpoint(tiny_dataset):
    with pytest.raises(ConfigError, match="tw_checkpoint"):
        train_pg(pg_cfg(), tiny_dataset)


def test_pg_rejects_pg_checkpoint_as_tw(tw_run, tiny_dataset):
    res = train_pg(pg_cfg(epochs=0), tiny_dataset, tw_run.checkpoint)
    with pytest.raises(ck.CheckpointError):
        train_pg(pg_cfg(), tiny_dataset, res.checkpoint)


def test_pg_joint_set_must_match(tw_run, tiny_dataset):
    with pytest.raises(ConfigError, match="tw_joints"):
        train_pg(pg_cfg(tw_joints="T"), tiny_dataset, tw_run.checkpoint)


def test_non_finite_loss_aborts(tiny_dataset):
    with pytest.raises(NonFiniteError):
        train_tw(tw_cfg(lambda_h=float("inf")), tiny_dataset)


def test_gradient_flows_only_into_pg(tw_run, tiny_dataset):
    from ehpe.pg_stage import PGStage, loss_pg
    tw = tw_run.pipeline.tw
    tw.params.freeze()
    cfg = pg_cfg()
    pg = PGStage(cfg.pg_model_config(tw.config.channels[-1]), seed=0, mean_pose=tiny_dataset.joints25d.mean(0))
    imgs = tiny_dataset.images[:4]
    with ad.Tape() as tape:
        out = tw.forward(imgs)
        o = pg.forward(Tensor(out.joints_pixels(tw.config.volume_stride)), out.featmap)
        rep = loss_pg(o.coords, tiny_dataset.joints25d[:4], o.alphas)
    tape.backward(rep.total)
    assert all(t.grad is None for t in tw.params.values())
    assert all(t.grad is not None for t in pg.params.values())
