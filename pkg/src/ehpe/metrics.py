"""Joint-error metrics: MPJPE, similarity-aligned MPJPE, per-category
breakdown and joint success curves."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .handsim import CATEGORY, CATEGORY_NAMES

# breakdown rows are reported fingertip first
REPORT_ORDER = ("TIP", "DIP", "PIP", "MCP", "W")
DEFAULT_THRESHOLDS = tuple(np.linspace(0.0, 10.0, 21))


class DegenerateAlignment(ValueError):
    """Cross-covariance has rank < 2; no unique similarity alignment."""


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.shape[-1] != 3:
        raise ValueError("last axis must hold 3 coordinates")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean Euclidean joint error over samples and joints."""
    return float(joint_errors(pred, gt).mean())


# ------------------------------------------------------------------ 3x3 SVD

def jacobi_svd3(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """One-sided cyclic Jacobi SVD of a 3x3 matrix: a = u @ diag(s) @ vt.

    Singular values come back in descending order; u and vt are orthogonal.
    Null directions of u are completed by cross products.
    """
    u = np.array(a, dtype=float)
    if u.shape != (3, 3):
        raise ValueError("jacobi_svd3 expects a 3x3 matrix")
    v = np.eye(3)
    # couplings this small relative to the whole matrix are already zero
    floor = (1e-15 * np.linalg.norm(u)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for i, j in ((0, 1), (0, 2), (1, 2)):
            alpha = u[:, i] @ u[:, i]
            beta = u[:, j] @ u[:, j]
            gamma = u[:, i] @ u[:, j]
            if abs(gamma) <= max(tol * np.sqrt(alpha * beta), floor):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            if abs(zeta) > 1e150:
                t = 0.5 / zeta   # zeta**2 would overflow
            else:
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ui, uj = u[:, i].copy(), u[:, j].copy()
            u[:, i], u[:, j] = c * ui - s * uj, s * ui + c * uj
            vi, vj = v[:, i].copy(), v[:, j].copy()
            v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    sv = np.linalg.norm(u, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, u, v = sv[order], u[:, order], v[:, order]
    scale = sv[0] if sv[0] > 0 else 1.0
    rank = int(np.sum(sv > 1e-12 * scale)) if sv[0] > 0 else 0
    for k in range(3):
        if k < rank:
            u[:, k] /= sv[k]
        elif k == 1:
            # any unit vector orthogonal to the first column
            e = np.eye(3)[np.argmin(np.abs(u[:, 0]))]
            w = e - (e @ u[:, 0]) * u[:, 0]
            u[:, 1] = w / np.linalg.norm(w)
        elif k == 2:
            u[:, 2] = np.cross(u[:, 0], u[:, 1])
        if k >= rank:
            sv[k] = 0.0
    if rank == 0:
        u = np.eye(3)
    return u, sv, v.T


def procrustes_align(pred, gt, return_transform: bool = False):
    """Similarity transform (rotation, uniform scale, translation) of ``pred``
    that minimises the summed squared distance to ``gt``."""
    pred, gt = _check_pair(pred, gt)
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    cov = g0.T @ p0 / len(pred)
    u, s, vt = jacobi_svd3(cov)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateAlignment("cross-covariance rank < 2")
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    dmat = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    rot = u @ dmat @ vt
    var_p = (p0 ** 2).sum() / len(pred)
    scale = float(np.trace(np.diag(s) @ dmat) / var_p)
    aligned = scale * p0 @ rot.T + mu_g
    if return_transform:
        return aligned, (scale, rot, mu_g - scale * rot @ mu_p)
    return aligned


def pa_joint_errors(pred, gt) -> tuple[np.ndarray, int]:
    """Per-joint errors after per-sample alignment, and the number of samples
    excluded as degenerate. Input (N, J, 3) or (J, 3)."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    rows, excluded = [], 0
    for p, g in zip(pred, gt):
        try:
            rows.append(np.linalg.norm(procrustes_align(p, g) - g, axis=-1))
        except DegenerateAlignment:
            excluded += 1
    return (np.stack(rows) if rows else np.empty((0, pred.shape[1]))), excluded


def pa_mpjpe(pred, gt) -> float:
    errs, _ = pa_joint_errors(pred, gt)
    return float(errs.mean()) if errs.size else float("nan")


# ------------------------------------------------------------------ breakdown / curves

@dataclass
class CategoryRow:
    category: str
    mean_error: float
    ratio_to_tip: float
    count: int


def category_breakdown(pred, gt, categories=CATEGORY, errors: np.ndarray | None = None) -> list[CategoryRow]:
    """Mean error per joint category and its ratio to the fingertip error,
    rows ordered TIP, DIP, PIP, MCP, W."""
    errs = joint_errors(pred, gt) if errors is None else np.asarray(errors, dtype=float)
    errs = errs.reshape(-1, errs.shape[-1])
    categories = np.asarray(categories)
    if categories.shape != (errs.shape[1],):
        raise ValueError("category labels must cover every joint")
    means = {}
    counts = {}
    for name in REPORT_ORDER:
        sel = categories == CATEGORY_NAMES.index(name)
        counts[name] = int(sel.sum())
        means[name] = float(errs[:, sel].mean()) if sel.any() else float("nan")
    tip = means["TIP"]
    rows = []
    for name in REPORT_ORDER:
        ratio = 1.0 if name == "TIP" and tip > 0 else (means[name] / tip if tip > 0 else float("nan"))
        rows.append(CategoryRow(name, means[name], ratio, counts[name]))
    return rows


def pck_curve(pred, gt, thresholds=DEFAULT_THRESHOLDS, errors: np.ndarray | None = None):
    """Fraction of joints with error <= each threshold, and the trapezoidal
    area under that curve normalised by the threshold span."""
    t = np.asarray(thresholds, dtype=float)
    if t.size == 0:
        raise ValueError("thresholds must be non-empty")
    if np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    errs = (joint_errors(pred, gt) if errors is None else np.asarray(errors)).reshape(-1)
    frac = (errs[None, :] <= t[:, None]).mean(axis=1)
    if t.size == 1:
        return frac, float(frac[0])
    auc = float(np.sum((frac[1:] + frac[:-1]) * np.diff(t)) / 2.0 / (t[-1] - t[0]))
    return frac, auc


# ------------------------------------------------------------------ report

@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    per_category: dict[str, float]
    relative_per_category: dict[str, float]
    pck_auc: float
    n_samples: int
    n_pa_excluded: int = 0
    pck_thresholds: list[float] = field(default_factory=list)
    pck_fractions: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def category_rows(self) -> list[tuple[str, float, float]]:
        return [(c, self.per_category[c], self.relative_per_category[c]) for c in REPORT_ORDER]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "mean_error", "ratio_to_tip"])
            for row in self.category_rows():
                w.writerow([row[0], repr(row[1]), repr(row[2])])

    def summary(self) -> str:
        return f"MPJPE {self.mpjpe:.4f}  PA-MPJPE {self.pa_mpjpe:.4f}  (n={self.n_samples})"


def evaluate(pred, gt, categories=CATEGORY, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    errs = joint_errors(pred, gt)
    pa_errs, excluded = pa_joint_errors(pred, gt)
    rows = category_breakdown(pred, gt, categories, errors=errs)
    frac, auc = pck_curve(pred, gt, thresholds, errors=errs)
    return EvalReport(
        mpjpe=float(errs.mean()),
        pa_mpjpe=float(pa_errs.mean()) if pa_errs.size else float("nan"),
        per_category={r.category: r.mean_error for r in rows},
        relative_per_category={r.category: r.ratio_to_tip for r in rows},
        pck_auc=auc,
        n_samples=len(pred),
        n_pa_excluded=excluded,
        pck_thresholds=[float(x) for x in thresholds],
        pck_fractions=[float(x) for x in frac],
    )


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["mpjpe", "pa_mpjpe", "per_category", "relative_per_category", "pck_auc", "n_samples"],
    "properties": {
        "mpjpe": {"type": "number", "minimum": 0},
        "pa_mpjpe": {"type": "number"},
        "per_category": {"type": "object", "required": list(REPORT_ORDER),
                         "additionalProperties": {"type": "number"}},
        "relative_per_category": {"type": "object", "required": list(REPORT_ORDER),
                                  "additionalProperties": {"type": "number"}},
        "pck_auc": {"type": "number", "minimum": 0, "maximum": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "n_pa_excluded": {"type": "integer", "minimum": 0},
        "pck_thresholds": {"type": "array", "items": {"type": "number"}},
        "pck_fractions": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
    },
    "additionalProperties": False,
}
