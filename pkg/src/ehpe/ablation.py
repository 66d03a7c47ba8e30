"""Ablation suites: the row structure of the comparison tables, encoded as
named training configurations, run end to end at a chosen epoch budget.

Rows sharing a TW configuration share one TW checkpoint. Desk-scale numbers
make no claim about matching the published orderings.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .handsim import HandDataset
from .metrics import mpjpe, pa_mpjpe
from .pg_stage import ModelConfigPG
from .pipeline import pipeline_from_checkpoint, to_world
from .trainer import DESK_LOSS_WEIGHTS, TrainConfig, train_pg, train_tw

ALL_JOINTS = "W+T+D+P+M"


@dataclass(frozen=True)
class Row:
    label: str
    tw: dict
    pg: dict | None            # None: decode all joints with the TW stage alone
    rejected_pg: dict | None = None   # PG config that is expected to be refused


def _r(label, tw_joints, pg=None, rejected=None):
    return Row(label, {"tw_joints": tw_joints}, pg, rejected)


SUITES: dict[str, tuple[str, list[Row]]] = {
    "table3": ("TW-stage / PG-stage combinations", [
        _r("TW-stage only", ALL_JOINTS),
        _r("PG-stage only", "W+T", {"use_tw_joints": False}),
        _r("TW-stage + PG-stage", "W+T", {}),
    ]),
    "table4": ("joint allocation between stages (TW | PG)", [
        _r("W+T+D | P+M", "W+T+D", {}),
        _r("W+T+D+P | M", "W+T+D+P", {}),
        _r("T+D | W+P+M", "T+D", {}),
        _r("T+D+P | W+M", "T+D+P", {}),
        _r("T | W+D+P+M", "T", {}),
        _r("W | T+D+P+M", "W", {}),
        _r("W+D+P+M | T", "W+D+P+M", {}),
        _r("W+T | D+P+M", "W+T", {}),
    ]),
    "table5": ("SPI / FEM branches", [
        _r("SPI x, FEM x", ALL_JOINTS, None, {"spi": False, "fem": False}),
        _r("SPI x, FEM v", "W+T", {"spi": False, "fem": True}),
        _r("SPI v, FEM x", "W+T", {"spi": True, "fem": False}),
        _r("SPI v, FEM v", "W+T", {"spi": True, "fem": True}),
    ]),
    "table6": ("edge weights / graph attention layers", [
        _r("fixed, 2 layers", "W+T", {"edge_weights": "fixed", "gat_layers": 2}),
        _r("dynamic, 1 layer", "W+T", {"edge_weights": "dynamic", "gat_layers": 1}),
        _r("dynamic, 3 layers", "W+T", {"edge_weights": "dynamic", "gat_layers": 3}),
        _r("dynamic, 2 layers", "W+T", {"edge_weights": "dynamic", "gat_layers": 2}),
    ]),
}


@dataclass
class RowResult:
    label: str
    status: str
    pa_mpjpe: float
    mpjpe: float
    tw_joints: str
    pg_config: dict | None
    note: str = ""


@dataclass
class AblationTable:
    suite: str
    title: str
    budget: int
    rows: list[RowResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "title": self.title, "budget": self.budget,
                "rows": [asdict(r) for r in self.rows]}

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, cs = out / f"{self.suite}.json", out / f"{self.suite}.csv"
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(cs, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config", "status", "pa_mpjpe", "mpjpe"])
            for r in self.rows:
                w.writerow([r.label, r.status, repr(r.pa_mpjpe), repr(r.mpjpe)])
        return js, cs

    def render(self) -> str:
        width = max(len(r.label) for r in self.rows)
        lines = [f"{self.suite}: {self.title} (budget {self.budget} epochs)",
                 f"{'config':<{width}}  {'PA-MPJPE':>9}  {'MPJPE':>9}  status"]
        for r in self.rows:
            lines.append(f"{r.label:<{width}}  {r.pa_mpjpe:9.4f}  {r.mpjpe:9.4f}  {r.status}")
        return "\n".join(lines)


def _tw_key(tw: dict) -> str:
    return json.dumps(tw, sort_keys=True)


def _train_tw_job(args):
    base, tw, dataset = args
    return train_tw(TrainConfig.from_dict({**base, **tw, "phase": "TW"}), dataset).checkpoint


def _row_job(args):
    row, base, tw_ckpt, dataset, test = args
    note = ""
    if row.rejected_pg is not None:
        try:
            ModelConfigPG(**row.rejected_pg)
        except ValueError as e:
            note = f"PG config rejected ({e}); reported with TW-only decoding"
        else:
            raise AssertionError(f"{row.label}: expected PG config to be rejected")
    if row.pg is None:
        pipe = pipeline_from_checkpoint(tw_ckpt)
        status = "tw-only" if not note else "rejected"
    else:
        cfg = TrainConfig.from_dict({**base, **row.tw, **row.pg, "phase": "PG"})
        pipe = train_pg(cfg, dataset, tw_ckpt).pipeline
        status = "ok"
    pred, gt = to_world(pipe.predict(test.images)), to_world(test.joints25d)
    return RowResult(row.label, status, pa_mpjpe(pred, gt), mpjpe(pred, gt), row.tw["tw_joints"], row.pg, note)


def run_suite(suite: str, dataset: HandDataset, budget: int = 5, parallel: int = 1,
              base: dict | None = None, split: str = "test") -> AblationTable:
    """Train and evaluate every row of ``suite``; ``budget`` sets the epoch
    count of both phases. ``base`` holds extra TrainConfig keys."""
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    title, rows = SUITES[suite]
    base = {**DESK_LOSS_WEIGHTS, **{k: v for k, v in (base or {}).items() if k != "phase"}}
    base["epochs"] = budget
    base["lr_milestones"] = ()
    test = dataset.subset(split)
    if len(test) == 0:
        test = dataset.subset("val")

    tw_configs = {}
    for row in rows:
        tw_configs.setdefault(_tw_key(row.tw), row.tw)
    keys = list(tw_configs)
    jobs = [(base, tw_configs[k], dataset) for k in keys]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            tw_ckpts = dict(zip(keys, ex.map(_train_tw_job, jobs)))
            results = list(ex.map(_row_job, [(r, base, tw_ckpts[_tw_key(r.tw)], dataset, test) for r in rows]))
    else:
        tw_ckpts = {k: _train_tw_job(j) for k, j in zip(keys, jobs)}
        results = [_row_job((r, base, tw_ckpts[_tw_key(r.tw)], dataset, test)) for r in rows]
    return AblationTable(suite, title, budget, results)


def row_counts() -> dict[str, int]:
    return {k: len(v[1]) for k, v in SUITES.items()}

