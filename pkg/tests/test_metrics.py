import csv
import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehpe.handsim import CATEGORY
from ehpe.metrics import (REPORT_SCHEMA, DegenerateAlignment, category_breakdown, evaluate, jacobi_svd3,
                          joint_errors, mpjpe, pa_joint_errors, pa_mpjpe, pck_curve, procrustes_align)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def horn_align(pred, gt):
    """Closed-form similarity alignment via the unit-quaternion eigenproblem."""
    mp, mg = pred.mean(0), gt.mean(0)
    a, b = pred - mp, gt - mg
    s = a.T @ b
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    vals, vecs = np.linalg.eigh(n)
    w, x, y, z = vecs[:, -1]
    r = np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])
    scale = vals[-1] / (a ** 2).sum()
    return scale * a @ r.T + mg


# ---------------------------------------------------------------- mpjpe

def test_mpjpe_zero_and_345():
    gt = np.random.default_rng(0).standard_normal((4, 21, 3))
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(gt + np.array([3.0, 4.0, 0.0]), gt) == pytest.approx(5.0, abs=1e-12)


def test_mpjpe_matches_triple_loop():
    rng = np.random.default_rng(1)
    p, g = rng.standard_normal((3, 21, 3)), rng.standard_normal((3, 21, 3))
    total = 0.0
    for n in range(3):
        for j in range(21):
            total += np.sqrt(sum((p[n, j, k] - g[n, j, k]) ** 2 for k in range(3)))
    assert abs(mpjpe(p, g) - total / 63) < 1e-12


def test_mpjpe_shape_mismatch():
    with pytest.raises(ValueError):
        mpjpe(np.zeros((2, 21, 3)), np.zeros((2, 20, 3)))


# ---------------------------------------------------------------- svd

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_jacobi_svd_reconstructs(seed):
    a = np.random.default_rng(seed).standard_normal((3, 3))
    u, s, vt = jacobi_svd3(a)
    np.testing.assert_allclose(u @ np.diag(s) @ vt, a, atol=1e-12)
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(vt @ vt.T, np.eye(3), atol=1e-12)
    assert np.all(np.diff(s) <= 0)
    np.testing.assert_allclose(s, np.linalg.svd(a, compute_uv=False), atol=1e-12)


def test_jacobi_svd_rank_deficient():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 2)) @ rng.standard_normal((2, 3))
    u, s, vt = jacobi_svd3(a)
    assert s[2] == 0.0
    np.testing.assert_allclose(u @ np.diag(s) @ vt, a, atol=1e-12)
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)


# ---------------------------------------------------------------- procrustes

def test_align_identity():
    gt = np.random.default_rng(4).standard_normal((21, 3))
    np.testing.assert_allclose(procrustes_align(gt, gt), gt, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_align_recovers_exact_similarity(seed):
    rng = np.random.default_rng(seed)
    gt = rng.standard_normal((21, 3))
    r, t = random_rotation(rng), rng.standard_normal(3) * 5
    pred = 2.0 * gt @ r.T + t
    assert np.abs(procrustes_align(pred, gt) - gt).max() <= 1e-8


def test_align_matches_horn_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        gt = rng.standard_normal((21, 3))
        pred = 0.7 * gt @ random_rotation(rng).T + rng.standard_normal(3) + 0.3 * rng.standard_normal((21, 3))
        np.testing.assert_allclose(procrustes_align(pred, gt), horn_align(pred, gt), atol=1e-9)


def test_align_reflection_corrected():
    rng = np.random.default_rng(6)
    gt = rng.standard_normal((21, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    aligned, (scale, rot, _) = procrustes_align(mirrored, gt, return_transform=True)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(aligned, horn_align(mirrored, gt), atol=1e-9)


def test_align_invariant_to_prealignment_of_pred():
    rng = np.random.default_rng(7)
    gt, pred = rng.standard_normal((21, 3)), rng.standard_normal((21, 3))
    base = np.linalg.norm(procrustes_align(pred, gt) - gt, axis=-1)
    moved = 3.3 * pred @ random_rotation(rng).T - 2.0
    np.testing.assert_allclose(np.linalg.norm(procrustes_align(moved, gt) - gt, axis=-1), base, atol=1e-8)


def test_pa_objective_never_exceeds_unaligned():
    rng = np.random.default_rng(8)
    for _ in range(50):
        gt = rng.standard_normal((21, 3))
        pred = gt + rng.standard_normal((21, 3)) * rng.uniform(0.01, 2)
        aligned = procrustes_align(pred, gt)
        assert ((aligned - gt) ** 2).sum() <= ((pred - gt) ** 2).sum() + 1e-9


def test_degenerate_samples_excluded_and_counted():
    rng = np.random.default_rng(9)
    gt = rng.standard_normal((3, 21, 3))
    pred = gt.copy()
    pred[1] = 0.0                               # collapsed prediction
    pred[2] = np.outer(np.arange(21.0), [1.0, 2.0, 3.0])   # collinear
    with pytest.raises(DegenerateAlignment):
        procrustes_align(pred[1], gt[1])
    errs, excluded = pa_joint_errors(pred, gt)
    assert excluded == 2 and errs.shape == (1, 21)
    assert pa_mpjpe(pred, gt) == pytest.approx(0.0, abs=1e-9)


def test_planar_points_align():
    rng = np.random.default_rng(10)
    gt = np.c_[rng.standard_normal((21, 2)), np.zeros(21)]
    pred = 1.5 * gt @ random_rotation(rng).T + 1.0
    assert np.abs(procrustes_align(pred, gt) - gt).max() <= 1e-8


# ---------------------------------------------------------------- breakdown

def per_category_errors(values):
    """Ground truth at the origin, each joint displaced along x by the error
    assigned to its category."""
    err = np.array([values[c] for c in CATEGORY], dtype=float)
    gt = np.zeros((1, 21, 3))
    pred = gt.copy()
    pred[0, :, 0] = err
    return pred, gt


def test_figure_one_ratios_reproduced():
    pred, gt = per_category_errors({4: 100.0, 3: 80.0, 2: 72.0, 1: 59.0, 0: 40.0})
    rows = category_breakdown(pred, gt)
    assert [r.category for r in rows] == ["TIP", "DIP", "PIP", "MCP", "W"]
    assert [r.ratio_to_tip for r in rows] == [1.0, 0.8, 0.72, 0.59, 0.4]


def test_uniform_error_ratios_one():
    pred, gt = per_category_errors({c: 2.5 for c in range(5)})
    assert all(r.ratio_to_tip == 1.0 for r in category_breakdown(pred, gt))


def test_tip_only_error():
    pred, gt = per_category_errors({4: 10.0, 3: 0.0, 2: 0.0, 1: 0.0, 0: 0.0})
    assert [r.ratio_to_tip for r in category_breakdown(pred, gt)] == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_category_counts_and_recomposition():
    rng = np.random.default_rng(11)
    p, g = rng.standard_normal((7, 21, 3)), rng.standard_normal((7, 21, 3))
    rows = category_breakdown(p, g)
    assert {r.category: r.count for r in rows} == {"TIP": 5, "DIP": 5, "PIP": 5, "MCP": 5, "W": 1}
    recomposed = sum(r.count * r.mean_error for r in rows) / 21
    assert abs(recomposed - mpjpe(p, g)) < 1e-9


# ---------------------------------------------------------------- pck

def test_pck_perfect():
    g = np.random.default_rng(12).standard_normal((2, 21, 3))
    frac, auc = pck_curve(g, g, [0.0, 1.0, 2.0])
    assert np.all(frac == 1.0) and auc == 1.0


def test_pck_below_min_error():
    g = np.zeros((1, 21, 3))
    frac, _ = pck_curve(g + 1.0, g, [0.5, 5.0])
    assert frac[0] == 0.0 and frac[1] == 1.0


def test_pck_brute_force():
    rng = np.random.default_rng(13)
    p, g = rng.standard_normal((4, 21, 3)), rng.standard_normal((4, 21, 3))
    t = np.linspace(0, 3, 13)
    frac, auc = pck_curve(p, g, t)
    errs = [np.sqrt(((p[n, j] - g[n, j]) ** 2).sum()) for n in range(4) for j in range(21)]
    want = np.array([sum(e <= th for e in errs) / len(errs) for th in t])
    np.testing.assert_allclose(frac, want, atol=1e-12)
    area = sum((want[i] + want[i + 1]) / 2 * (t[i + 1] - t[i]) for i in range(len(t) - 1)) / 3.0
    assert abs(auc - area) < 1e-12


def test_pck_rejects_bad_thresholds():
    g = np.zeros((1, 21, 3))
    with pytest.raises(ValueError):
        pck_curve(g, g, [])
    with pytest.raises(ValueError):
        pck_curve(g, g, [1.0, 1.0])


# ---------------------------------------------------------------- report

def test_report_json_csv(tmp_path):
    rng = np.random.default_rng(14)
    g = rng.standard_normal((5, 21, 3))
    rep = evaluate(g + 0.1 * rng.standard_normal(g.shape), g)
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["relative_per_category"]["TIP"] == 1.0
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["category", "mean_error", "ratio_to_tip"]
    assert [r[0] for r in rows[1:]] == ["TIP", "DIP", "PIP", "MCP", "W"]
    assert float(rows[1][1]) == rep.per_category["TIP"]


def test_report_of_ground_truth_is_zero():
    g = np.random.default_rng(15).standard_normal((3, 21, 3))
    rep = evaluate(g, g)
    assert rep.mpjpe == 0.0 and rep.pa_mpjpe < 1e-9 and rep.pck_auc == 1.0


def test_joint_errors_shape():
    assert joint_errors(np.zeros((2, 21, 3)), np.ones((2, 21, 3))).shape == (2, 21)
