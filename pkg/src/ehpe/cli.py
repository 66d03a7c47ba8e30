"""Command-line entry point: ``ehpe gen-data | train | eval | ablate``.

Exit codes: 0 success, 2 usage/config error, 3 data/checkpoint error,
4 numeric failure (non-finite loss or gradient, broken freeze invariant).
Every command writes a run manifest listing its outputs with SHA-256 hashes.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt_io
from .handsim import DatasetFormatError, make_dataset, read_dataset
from .metrics import evaluate
from .pipeline import StageMismatch, pipeline_from_checkpoint, to_world
from .trainer import ConfigError, FreezeViolation, NonFiniteError, TrainConfig, desk_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    def __init__(self, command: str, argv: list[str]):
        self.doc = {"command": command, "argv": argv, "tool_version": __version__, "started": _now(),
                    "config_sha256": None, "dataset_sha256": None, "checkpoints": {}, "outputs": {}}

    def output(self, path) -> None:
        self.doc["outputs"][str(path)] = _sha(path)

    def finish(self, path) -> dict:
        self.doc["finished"] = _now()
        Path(path).write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")
        return self.doc


def _env_seed() -> int | None:
    raw = os.environ.get("EHPE_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"EHPE_SEED must be an integer, got {raw!r}") from None


def _manifest_path(primary, override) -> Path:
    return Path(override) if override else Path(str(primary) + ".manifest.json")


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    man = RunManifest("gen-data", sys.argv[1:])
    make_dataset(args.n, seed, path=args.out)
    man.output(args.out)
    man.doc["dataset_sha256"] = man.doc["outputs"][str(args.out)]
    man.doc["seed"] = seed
    doc = man.finish(_manifest_path(args.out, args.manifest))
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def _load_config(args) -> TrainConfig:
    phase = args.phase.upper()
    if args.config:
        cfg = TrainConfig.from_json(args.config)
        if cfg.phase != phase:
            raise UsageError(f"--phase {args.phase} but config says phase {cfg.phase}")
    else:
        cfg = desk_config(phase)
    over = {}
    for key, flag in (("dataset", "dataset"), ("checkpoint_out", "out"), ("log_path", "log"),
                      ("epochs", "epochs"), ("tw_checkpoint", "tw_checkpoint")):
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = val
    seed = _env_seed()
    if seed is not None:
        over["seed"] = seed
    return cfg.replace(**over) if over else cfg


def cmd_train(args) -> int:
    if args.phase == "pg" and not args.tw_checkpoint:
        raise UsageError("--phase pg requires --tw-checkpoint")
    cfg = _load_config(args)
    if not cfg.dataset:
        raise UsageError("no dataset: pass --dataset or set 'dataset' in the config")
    if not cfg.checkpoint_out:
        raise UsageError("no output checkpoint: pass --out or set 'checkpoint_out' in the config")
    man = RunManifest("train", sys.argv[1:])
    if args.config:
        man.doc["config_sha256"] = _sha(args.config)
    man.doc["resolved_config"] = cfg.to_dict()
    man.doc["dataset_sha256"] = _sha(cfg.dataset)
    if cfg.phase == "PG":
        man.doc["checkpoints"]["tw_input"] = _sha(cfg.tw_checkpoint)

    res = train(cfg)
    if args.verify_reproducible:
        again = train(cfg.replace(checkpoint_out=None, log_path=None))
        if again.checkpoint_sha256 != res.checkpoint_sha256:
            raise FreezeViolation("rerun with identical config produced a different checkpoint")
        man.doc["reproducible"] = True
    if cfg.phase == "PG":
        man.doc["tw_param_digest"] = {"before": res.tw_digest_before, "after": res.tw_digest_after}
    man.output(cfg.checkpoint_out)
    man.doc["checkpoints"]["output"] = res.checkpoint_sha256
    if cfg.log_path:
        man.output(cfg.log_path)
    doc = man.finish(_manifest_path(cfg.checkpoint_out, args.manifest))
    fin = res.final
    print(f"{cfg.phase} done: {len(res.log) - 1} epochs, train {json.dumps(fin['train'], sort_keys=True)}")
    print(f"checkpoint {cfg.checkpoint_out} sha256 {doc['checkpoints']['output']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.oracle and not args.checkpoint:
        raise UsageError("--checkpoint is required unless --oracle is given")
    man = RunManifest("eval", sys.argv[1:])
    ds = read_dataset(args.dataset)
    man.doc["dataset_sha256"] = _sha(args.dataset)
    data = ds.subset(args.split) if args.split != "all" else ds
    if len(data) == 0:
        raise DatasetFormatError(f"split {args.split!r} of {args.dataset} is empty")
    if args.oracle:
        pred = data.joints25d.copy()
    else:
        ck = ckpt_io.load(args.checkpoint)
        man.doc["checkpoints"]["model"] = ck.sha256
        if args.mode == "full" and ck.stage != "PG":
            raise StageMismatch(f"{args.checkpoint} is a {ck.stage} checkpoint; the full model needs a PG "
                                "checkpoint (use --mode tw-only to decode with the TW stage alone)")
        tw_ck = None
        if args.tw_checkpoint:
            tw_ck = ckpt_io.load(args.tw_checkpoint, expect_stage="TW")
            man.doc["checkpoints"]["tw"] = tw_ck.sha256
        pipe = pipeline_from_checkpoint(ck, tw_ck)
        if args.mode == "tw-only":
            pipe.pg = None
        pred = pipe.predict(data.images)
    report = evaluate(to_world(pred), to_world(data.joints25d))
    report.to_json(args.report)
    csv_path = args.csv or str(Path(args.report).with_suffix(".csv"))
    report.to_csv(csv_path)
    man.output(args.report)
    man.output(csv_path)
    man.finish(_manifest_path(args.report, args.manifest))
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_suite
    if args.budget < 0:
        raise UsageError("--budget must be >= 0")
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    base = {}
    if args.config:
        base = TrainConfig.from_json(args.config).hyperparams()
        for k in ("epochs", "lr_milestones", "tw_joints", "spi", "fem", "edge_weights", "gat_layers",
                  "use_tw_joints"):
            base.pop(k, None)
    seed = _env_seed()
    if seed is not None:
        base["seed"] = seed
    man = RunManifest("ablate", sys.argv[1:])
    man.doc["dataset_sha256"] = _sha(args.dataset)
    ds = read_dataset(args.dataset)
    table = run_suite(args.suite, ds, budget=args.budget, parallel=args.parallel, base=base)
    js, cs = table.write(args.out)
    man.output(js)
    man.output(cs)
    man.finish(Path(args.out) / f"{args.suite}.manifest.json")
    print(table.render())
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    from .ablation import SUITES
    p = argparse.ArgumentParser(prog="ehpe", description="Segmented hand-pose estimation at desk scale.")
    p.add_argument("--version", action="version", version=f"ehpe {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=None, help="default: $EHPE_SEED or 0")
    g.add_argument("--out", required=True)
    g.add_argument("--manifest")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", choices=("tw", "pg"), required=True)
    t.add_argument("--config", help="JSON training config (default: desk schedule)")
    t.add_argument("--tw-checkpoint", dest="tw_checkpoint")
    t.add_argument("--dataset")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="NDJSON metrics log path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--verify-reproducible", action="store_true",
                   help="train twice and require byte-identical checkpoints")
    t.add_argument("--manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint")
    e.add_argument("--tw-checkpoint", dest="tw_checkpoint", help="verify the PG checkpoint's TW provenance")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--mode", choices=("full", "tw-only"), default="full")
    e.add_argument("--oracle", action="store_true", help="use ground truth as predictions")
    e.add_argument("--report", required=True)
    e.add_argument("--csv")
    e.add_argument("--manifest")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", choices=tuple(SUITES), required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--budget", type=int, default=5, help="epochs per phase")
    a.add_argument("--parallel", type=int, default=1)
    a.add_argument("--config", help="JSON config supplying model widths / loss weights")
    a.add_argument("--out", default="ablation")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"ehpe {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FreezeViolation, FloatingPointError) as e:
        print(f"ehpe {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, ckpt_io.CheckpointError, StageMismatch, KeyError, ValueError) as e:
        print(f"ehpe {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
