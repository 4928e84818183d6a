"""Command-line entry point: ``metacam {gen,train,eval,ablate,sweep}``.

Every command reads the same INI config (``--config``) plus ``--set
section.key=value`` overrides.  Failures print one JSON object on stderr
(``{"error": ..., "message": ..., "command": ...}``) and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod
from . import datagen
from .config import ConfigError, RunConfig
from .encoder import encode_batch, init_params
from .evaluation import evaluate_features, report_json, split_gap
from .metatrainer import TrainingDiverged, evaluate_state, load_checkpoint, save_checkpoint, train

EXIT_RUNTIME, EXIT_USAGE = 1, 2

# Ablation rows: (row, outliers_on, dsce_on, meta_mode)
ABLATION_ROWS = (
    (1, False, False, "off"),
    (2, True, False, "off"),
    (3, True, True, "off"),
    (4, True, False, "full"),
    (5, True, True, "full"),
)


class CommandError(RuntimeError):
    def __init__(self, message: str, kind: str = "runtime_error", code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.kind, self.code = kind, code


# --- helpers ------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc}", "io_error") from None
    return out


def _dataset(cfg: RunConfig, data_path) -> datagen.SynthDataset:
    if data_path is None:
        return datagen.generate(cfg.synth)
    try:
        ds = datagen.load(data_path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read dataset {data_path}: {exc}", "io_error") from None
    if ds.input_dim != cfg.synth.input_dim:
        raise CommandError(f"dataset input_dim {ds.input_dim} does not match config {cfg.synth.input_dim}",
                           "config_error", EXIT_USAGE)
    return ds


def _csv_text(header_hash: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={header_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train_run(cfg: RunConfig, dataset=None, *, out: Path | None = None, resume=None,
              checkpoints: bool = True):
    """Train under ``cfg``; with ``out`` write history, per-epoch and final checkpoints."""
    dataset = dataset if dataset is not None else datagen.generate(cfg.synth)
    h = cfg.config_hash()
    state = load_checkpoint(resume) if resume else None
    if state is not None and len(state.theta) != len(init_params(cfg.encoder, 0)):
        raise CommandError("checkpoint does not match the encoder configuration", "config_error", EXIT_USAGE)

    def on_epoch(st):
        if out is None:
            return
        _write_history(out / "history.jsonl", st.history, h)
        if checkpoints:
            save_checkpoint(st, out / "checkpoints" / f"epoch_{st.epoch:03d}.json")

    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
    theta, state = train(dataset, cfg.train, cfg.encoder, cfg.mining, state=state, on_epoch=on_epoch)
    if out is not None:
        _write_history(out / "history.jsonl", state.history, h)
        save_checkpoint(state, out / "model.json")
    return theta, state


def _write_history(path: Path, history, config_hash: str) -> None:
    path.write_text("".join(_dump({**rec, "config_hash": config_hash}) + "\n" for rec in history))


def evaluate_run(cfg: RunConfig, theta, dataset) -> tuple:
    qf = encode_batch(theta, dataset.query.X, cfg.encoder)
    gf = encode_batch(theta, dataset.gallery.X, cfg.encoder)
    ev = cfg.eval
    return evaluate_features(qf, gf, dataset), split_gap(qf, gf, dataset, max_pairs=ev.max_pairs,
                                                         seed=ev.gap_seed, n_bins=ev.n_bins)


def ablation_rows(cfg: RunConfig, dataset=None) -> list[dict]:
    """Train the five ablation rows on one dataset; failures become a status."""
    dataset = dataset if dataset is not None else datagen.generate(cfg.synth)
    rows = []
    for no, outliers_on, dsce_on, mode in ABLATION_ROWS:
        row_cfg = replace(cfg, train=replace(cfg.train, outliers_on=outliers_on, dsce_on=dsce_on, meta_mode=mode))
        rec = {"row": no, "outliers_on": outliers_on, "dsce_on": dsce_on, "meta_mode": mode,
               "seed": cfg.synth.seed, "train_seed": cfg.train.seed, "mAP": None, "rank1": None,
               "gap": None, "status": "ok"}
        try:
            theta, _ = train(dataset, row_cfg.train, row_cfg.encoder, row_cfg.mining)
            report, gap = evaluate_run(row_cfg, theta, dataset)
            rec.update(mAP=report.mAP, rank1=report.cmc[1], gap=gap.gap)
        except (TrainingDiverged, ValueError, FloatingPointError) as exc:
            rec["status"] = f"failed: {exc}"
        rows.append(rec)
    return rows


ABLATION_COLUMNS = ["row", "outliers_on", "dsce_on", "meta_mode", "seed", "train_seed", "mAP", "rank1",
                    "gap", "status"]


def ablation_csv(rows, config_hash: str) -> str:
    return _csv_text(config_hash, ABLATION_COLUMNS, [
        [r["row"], str(r["outliers_on"]).lower(), str(r["dsce_on"]).lower(), r["meta_mode"], r["seed"],
         r["train_seed"], _fmt(r["mAP"]), _fmt(r["rank1"]), _fmt(r["gap"]), r["status"]] for r in rows])


def read_result_csv(path) -> tuple[str, list[dict]]:
    """Read a result CSV written by this tool: (config hash, rows as dicts of strings)."""
    text = Path(path).read_text()
    first, _, body = text.partition("\n")
    if not first.startswith("# config_hash="):
        raise ValueError(f"{path}: missing config hash header")
    return first.split("=", 1)[1], list(csv.DictReader(io.StringIO(body)))


SWEEP_PARAMS = {"n_mtr": int, "tau": float}


def sweep_rows(cfg: RunConfig, param: str, values, dataset=None) -> list[dict]:
    dataset = dataset if dataset is not None else datagen.generate(cfg.synth)
    rows = []
    for v in values:
        rec = {"param": param, "value": v, "mAP": None, "rank1": None, "diverged": False, "status": "ok"}
        try:
            row_cfg = replace(cfg, train=replace(cfg.train, **{param: v}))
            theta, _ = train(dataset, row_cfg.train, row_cfg.encoder, row_cfg.mining)
            report, _ = evaluate_run(row_cfg, theta, dataset)
            rec.update(mAP=report.mAP, rank1=report.cmc[1])
        except TrainingDiverged as exc:
            rec.update(diverged=True, status=f"diverged: {exc}")
        except ValueError as exc:
            rec["status"] = f"failed: {exc}"
        rows.append(rec)
    return rows


# --- commands -----------------------------------------------------------------


def cmd_gen(args, cfg: RunConfig) -> None:
    out = _out_dir(args.out)
    ds = datagen.generate(cfg.synth)
    datagen.save(ds, out / "dataset.tsv")
    s = cfg.synth
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": s.seed,
        "counts": {"train": len(ds.train), "query": len(ds.query), "gallery": len(ds.gallery)},
        "expected_counts": {"train": s.n_train, "query": s.n_test_per_split, "gallery": s.n_test_per_split},
        "n_cameras": ds.n_cameras,
        "input_dim": ds.input_dim,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.ini").write_text(cfg.to_ini())


def cmd_train(args, cfg: RunConfig) -> None:
    out = _out_dir(args.out)
    ds = _dataset(cfg, args.data)
    _, state = train_run(cfg, ds, out=out, resume=args.resume, checkpoints=not args.no_checkpoints)
    last = state.history[-1] if state.history else {}
    print(_dump({"epochs": state.epoch, "n_clusters": last.get("n_clusters"), "out": str(out)}))


def cmd_eval(args, cfg: RunConfig) -> None:
    out = _out_dir(args.out)
    ds = _dataset(cfg, args.data)
    if args.checkpoint:
        try:
            theta = load_checkpoint(args.checkpoint).theta
        except (OSError, ValueError, KeyError) as exc:
            raise CommandError(f"cannot read checkpoint {args.checkpoint}: {exc}", "io_error") from None
        if theta.layout != init_params(cfg.encoder, 0).layout:
            raise CommandError("checkpoint does not match the encoder configuration", "config_error", EXIT_USAGE)
    else:
        theta = init_params(cfg.encoder, cfg.train.seed)
    report, gap = evaluate_run(cfg, theta, ds)
    h = cfg.config_hash()
    (out / "eval_report.json").write_text(report_json(report, h))
    (out / "gap_report.json").write_text(report_json(gap, h))
    (out / "gap_hist.csv").write_text(gap.to_csv(f"config_hash={h}"))
    print(_dump({"mAP": report.mAP, "rank1": report.cmc[1], "gap": gap.gap}))


def cmd_ablate(args, cfg: RunConfig) -> None:
    out = _out_dir(args.out)
    rows = ablation_rows(cfg, _dataset(cfg, args.data))
    (out / "ablation.csv").write_text(ablation_csv(rows, cfg.config_hash()))
    for r in rows:
        print(_dump({k: r[k] for k in ("row", "mAP", "rank1", "status")}))


def cmd_sweep(args, cfg: RunConfig) -> None:
    out = _out_dir(args.out)
    cast = SWEEP_PARAMS[args.param]
    if args.values:
        try:
            values = [cast(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise CommandError(f"bad --values for {args.param}: {args.values!r}", "usage_error", EXIT_USAGE) from None
    elif args.param == "n_mtr":
        values = list(range(1, cfg.synth.n_cameras))
    else:
        values = [0.01, 0.03, 0.05, 0.1, 0.5]
    rows = sweep_rows(cfg, args.param, values, _dataset(cfg, args.data))
    text = _csv_text(cfg.config_hash(), ["param", "value", "mAP", "rank1", "diverged", "status"],
                     [[r["param"], r["value"], _fmt(r["mAP"]), _fmt(r["rank1"]), str(r["diverged"]).lower(),
                       r["status"]] for r in rows])
    (out / f"sweep_{args.param}.csv").write_text(text)
    for r in rows:
        print(_dump({k: r[k] for k in ("value", "mAP", "diverged")}))


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: built-in standard config)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--out", required=True, help="output directory")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset file written by `gen` (default: generate from config)")

    p = argparse.ArgumentParser(prog="metacam", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset").set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", parents=[common, data], help="train an encoder")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-checkpoints", action="store_true", help="skip per-epoch checkpoints")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", help="checkpoint to evaluate (default: untrained seeded encoder)")
    e.set_defaults(fn=cmd_eval)

    sub.add_parser("ablate", parents=[common, data], help="run the five ablation rows").set_defaults(fn=cmd_ablate)

    s = sub.add_parser("sweep", parents=[common, data], help="sweep n_mtr or tau")
    s.add_argument("--param", choices=sorted(SWEEP_PARAMS), required=True)
    s.add_argument("--values", help="comma separated values (default: a built-in grid)")
    s.set_defaults(fn=cmd_sweep)
    return p


def _fail(kind: str, message: str, command: str | None, code: int) -> int:
    print(_dump({"error": kind, "message": message, "command": command}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load(args.config, args.set)
        np.seterr(all="ignore")  # non-finite values are detected explicitly
        args.fn(args, cfg)
    except ConfigError as exc:
        return _fail("config_error", str(exc), args.command, EXIT_USAGE)
    except OSError as exc:
        return _fail("io_error", str(exc), args.command, EXIT_RUNTIME)
    except CommandError as exc:
        return _fail(exc.kind, str(exc), args.command, exc.code)
    except TrainingDiverged as exc:
        return _fail("training_diverged", str(exc), args.command, EXIT_RUNTIME)
    except (ValueError, FloatingPointError) as exc:
        return _fail("runtime_error", str(exc), args.command, EXIT_RUNTIME)
    return 0


if __name__ == "__main__":
    sys.exit(main())
