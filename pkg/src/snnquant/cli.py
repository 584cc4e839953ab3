"""``snnquant`` command line: train, trace, quantize-finetune, allocate, eval, report.

Every command reads a run config (TOML or JSON), writes its outputs under
``--out`` (default: the config's ``out_dir``) and returns a distinct exit code
per error class.  Run records are JSON; everything but ``wall_time`` is
reproducible from the embedded config snapshot.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

from .allocation import (
    BitConfig,
    configs_csv,
    enumerate_configs,
    model_size,
    param_counts,
    reference_specs,
    recommend,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .errors import InputError, SnnQuantError
from .estimator import SpikingClassifier, build_specs
from .events import load_sevt_dataset, synth_split
from .hessian import read_trace_csv, trace_csv
from .neuron import LifParams

log = logging.getLogger("snnquant")

RECORD_VERSION = 1


# ---------------------------------------------------------------- helpers


def load_data(cfg: RunConfig):
    d = cfg.data
    if d.source == "sevt":
        path = cfg.manifest_path()
        return (
            load_sevt_dataset(path, "train", d.dt_us, d.steps),
            load_sevt_dataset(path, "test", d.dt_us, d.steps),
        )
    return synth_split(d.n_classes, d.train_per_class, d.test_per_class, tuple(d.dims), d.steps, d.rate_hi, d.rate_lo, cfg.seed)


def make_classifier(cfg: RunConfig) -> SpikingClassifier:
    t, lif = cfg.train, cfg.lif
    return SpikingClassifier(
        layers=cfg.architecture(),
        alpha=lif.alpha,
        u_thres=lif.u_thres,
        surrogate_beta=lif.surrogate_beta,
        lr=t.lr,
        epochs=t.epochs,
        batch_size=t.batch_size,
        weight_scale=t.weight_scale,
        random_state=cfg.seed,
        threads=cfg.threads,
    )


def config_specs(cfg: RunConfig, input_shape):
    lif = cfg.lif
    return build_specs(cfg.architecture(), input_shape, LifParams(lif.alpha, lif.u_thres, lif.surrogate_beta))


def classifier_from_checkpoint(cfg: RunConfig, path, input_shape) -> SpikingClassifier:
    """Estimator around a checkpoint; refuses an architecture that differs from ``cfg``."""
    ck = load_checkpoint(path, expect_specs=config_specs(cfg, input_shape))
    clf = make_classifier(cfg)
    clf.network_ = ck.network
    clf.classes_ = ck.classes
    clf.input_shape_ = tuple(input_shape)
    clf.history_ = []
    clf.quant_policy_ = ck.policy
    return clf


def bit_config(cfg: RunConfig) -> BitConfig:
    return BitConfig(cfg.quant.bits, cfg.quant.state_bits)


def new_record(command: str, cfg: RunConfig) -> dict:
    return {
        "record_version": RECORD_VERSION,
        "command": command,
        "config": cfg.snapshot(),
        "config_hash": cfg.digest(),
        "epochs": [],
        "bits": None,
        "size": None,
        "traces": None,
        "metrics": {},
        "wall_time": None,
    }


def size_dict(report) -> dict:
    return {
        "counts": list(report.counts),
        "layer_bytes": list(report.layer_bytes),
        "total_bytes": report.total_bytes,
        "megabytes": report.megabytes,
    }


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def strip_wall_time(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != "wall_time"}


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    t0 = time.perf_counter()
    train, test = load_data(cfg)
    clf = make_classifier(cfg)
    clf.fit(train.X, train.y, n_classes=cfg.data.n_classes)
    rec = new_record("train", cfg)
    rec["epochs"] = [h.to_dict() for h in clf.history_]
    acc = clf.score_layers(test.X, test.y)
    rec["metrics"] = {"test_accuracy": acc, "final_accuracy": acc[-1]}
    counts = param_counts(clf.network_.specs)
    rec["size"] = size_dict(model_size(counts, [32] * len(counts)))
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", clf.network_, clf.classes_, cfg.snapshot(), cfg.digest())
    rec["wall_time"] = time.perf_counter() - t0
    write_json(out / "train_record.json", rec)
    return rec


def cmd_trace(cfg: RunConfig, checkpoint, out: Path) -> dict:
    t0 = time.perf_counter()
    train, test = load_data(cfg)
    clf = classifier_from_checkpoint(cfg, checkpoint, train.X.shape[2:])
    est = clf.hessian_traces(train.X, train.y, cfg.hessian)
    out.mkdir(parents=True, exist_ok=True)
    (out / "traces.csv").write_text(trace_csv(est))
    rec = new_record("trace", cfg)
    rec["traces"] = [{"mean": e.mean, "std_err": e.std_err, "n_probes": e.n_probes, "normalized": e.normalized} for e in est]
    rec["metrics"] = {"test_accuracy": clf.score_layers(test.X, test.y)}
    rec["wall_time"] = time.perf_counter() - t0
    write_json(out / "trace_record.json", rec)
    return rec


def cmd_quantize_finetune(cfg: RunConfig, checkpoint, out: Path) -> dict:
    t0 = time.perf_counter()
    train, test = load_data(cfg)
    clf = classifier_from_checkpoint(cfg, checkpoint, train.X.shape[2:])
    if clf.quant_policy_ is not None:
        raise InputError(f"{checkpoint}: already quantized; fine-tune from a full-precision checkpoint")
    bc = bit_config(cfg)
    rec = new_record("quantize-finetune", cfg)
    before = clf.score_layers(test.X, test.y)
    q = cfg.quant
    clf.finetune_quantized(
        train.X, train.y, bc.layer_bits(), epochs=q.epochs, lr_factor=q.lr_factor, grad_scale=q.grad_scale,
        calib_size=q.calib_size,
    )
    after = clf.score_layers(test.X, test.y)
    rec["bits"] = {"weight": list(bc.bits), "state": list(bc.state_bits or bc.bits)}
    rec["size"] = size_dict(model_size(param_counts(clf.network_.specs), bc))
    rec["metrics"] = {
        "full_precision_accuracy": before,
        "test_accuracy": after,
        "final_accuracy": after[-1],
    }
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint_q.npz", clf.network_, clf.classes_, cfg.snapshot(), cfg.digest(), clf.quant_policy_)
    rec["wall_time"] = time.perf_counter() - t0
    write_json(out / "finetune_record.json", rec)
    return rec


def cmd_eval(cfg: RunConfig, checkpoint, out: Path) -> dict:
    t0 = time.perf_counter()
    _, test = load_data(cfg)
    clf = classifier_from_checkpoint(cfg, checkpoint, test.X.shape[2:])
    acc = clf.score_layers(test.X, test.y)
    rec = new_record("eval", cfg)
    rec["metrics"] = {"test_accuracy": acc, "final_accuracy": acc[-1], "quantized": clf.quant_policy_ is not None}
    out.mkdir(parents=True, exist_ok=True)
    rec["wall_time"] = time.perf_counter() - t0
    write_json(out / "eval_record.json", rec)
    return rec


def parse_budget(text) -> float:
    """Budget in decimal megabytes; ``inf`` for no limit."""
    try:
        mb = float(text)
    except (TypeError, ValueError):
        raise InputError(f"budget must be a number of megabytes, got {text!r}") from None
    if math.isnan(mb) or mb < 0:
        raise InputError(f"budget must be >= 0, got {text!r}")
    return mb * 1e6


def cmd_allocate(traces_csv, counts, menu, budget_bytes: float, out: Path | None = None) -> str:
    est = read_trace_csv(Path(traces_csv).read_text())
    traces = [e.mean for e in est]
    if len(traces) != len(counts):
        raise InputError(f"{len(traces)} traces for {len(counts)} layers")
    ranked = recommend(traces, enumerate_configs(counts, menu), budget_bytes)
    text = configs_csv(ranked)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "allocation.csv").write_text(text)
    return text


def _record_bits_label(rec):
    if rec.get("bits") is None:
        return None
    return rec["bits"]["weight"]


def cmd_report(records, out: Path | None = None) -> dict:
    """Combine run records into a bits/size/accuracy table, a per-layer trace table and a summary."""
    if not records:
        raise InputError("report needs at least one run record")
    n_layers = None
    rows2, table1 = [], None
    for i, rec in enumerate(records):
        for key in ("command", "config", "metrics"):
            if key not in rec:
                raise InputError(f"record {i}: missing {key!r}")
        n = len(rec["config"]["layers"])
        if n_layers is None:
            n_layers = n
        elif n != n_layers:
            raise InputError(f"record {i}: {n} layers, earlier records have {n_layers}")
        if rec["command"] == "trace" and table1 is None:
            table1 = rec
        if rec["command"] not in ("train", "quantize-finetune"):
            continue
        bits = _record_bits_label(rec)
        size = rec.get("size") or {}
        if "counts" not in size:
            raise InputError(f"record {i}: missing size report")
        counts = size["counts"]
        mb = model_size(counts, bits or [32] * n_layers).display_mb
        labels = ["FP32"] * n_layers if bits is None else [str(b) for b in bits]
        rows2.append(labels + [f"{mb:.2f}", f"{rec['metrics']['final_accuracy']:.4f}"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"l{i + 1}_bits" for i in range(n_layers)] + ["size_mb", "accuracy"])
    w.writerows(rows2)
    table2 = buf.getvalue()
    t1 = ""
    if table1 is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "trace", "local_accuracy"])
        acc = table1["metrics"].get("test_accuracy", [math.nan] * n_layers)
        for i, (t, a) in enumerate(zip(table1["traces"], acc)):
            w.writerow([f"L{i + 1}", f"{t['mean']:.6g}", f"{a:.4f}"])
        t1 = buf.getvalue()
    summary = {"records": len(records), "table2_rows": len(rows2), "has_traces": table1 is not None}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table2.csv").write_text(table2)
        if t1:
            (out / "table1.csv").write_text(t1)
        write_json(out / "summary.json", summary)
    return {"table2": table2, "table1": t1, "summary": summary}


# ---------------------------------------------------------------- argument parsing


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="snnquant", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML or JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: config out_dir)")
        p.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
        return p

    common(sub.add_parser("train", help="full-precision training"))
    p = common(sub.add_parser("trace", help="per-layer Hessian traces"))
    p.add_argument("--checkpoint", required=True)
    p = common(sub.add_parser("quantize-finetune", help="quantize and fine-tune a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", type=_int_list, help="weight word bits per layer, e.g. 8,8")
    p.add_argument("--state-bits", type=_int_list, help="state word bits per layer (default: --bits)")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    p.add_argument("--checkpoint", required=True)
    p = common(sub.add_parser("allocate", help="rank bit configurations from a trace CSV"), config_required=False)
    p.add_argument("--traces", required=True, help="CSV written by 'trace'")
    p.add_argument("--budget-mb", help="size budget in decimal MB (default: config, else inf)")
    p.add_argument("--menu", type=_int_list, help="candidate word bits (default: config)")
    p.add_argument("--reference-arch", action="store_true", help="use the 64/128/128 7x7 parameter counts")
    p = common(sub.add_parser("report", help="combine run records"), config_required=False)
    p.add_argument("records", nargs="*", help="run record JSON files")
    return ap


def resolve_config(args) -> RunConfig | None:
    if args.config is None:
        return None
    cfg = load_config(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        kw["threads"] = args.threads
    return cfg.replace(**kw) if kw else cfg


def _override_bits(cfg: RunConfig, args) -> RunConfig:
    if args.bits is None and args.state_bits is None:
        return cfg
    raw = cfg.to_dict()
    if args.bits is not None:
        raw["quant"]["bits"] = args.bits
    if args.state_bits is not None:
        raw["quant"]["state_bits"] = args.state_bits
    return parse_config(raw, cfg.base_dir)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    cfg = resolve_config(args)
    out = Path(args.out) if args.out else (Path(cfg.out_dir) if cfg else Path("."))
    cmd = args.command
    if cmd == "train":
        rec = cmd_train(cfg, out)
        log.info("test accuracy per layer: %s", rec["metrics"]["test_accuracy"])
    elif cmd == "trace":
        cmd_trace(cfg, args.checkpoint, out)
        sys.stdout.write((out / "traces.csv").read_text())
    elif cmd == "quantize-finetune":
        rec = cmd_quantize_finetune(_override_bits(cfg, args), args.checkpoint, out)
        m = rec["metrics"]
        log.info("final-layer accuracy %.4f -> %.4f", m["full_precision_accuracy"][-1], m["final_accuracy"])
    elif cmd == "eval":
        rec = cmd_eval(cfg, args.checkpoint, out)
        log.info("test accuracy per layer: %s", rec["metrics"]["test_accuracy"])
    elif cmd == "allocate":
        if args.reference_arch:
            counts = param_counts(reference_specs())
        elif cfg is not None:
            counts = param_counts(config_specs(cfg, (2,) + tuple(cfg.data.dims)))
        else:
            raise InputError("allocate needs --config or --reference-arch for parameter counts")
        menu = args.menu or (list(cfg.allocate.menu) if cfg else None)
        if not menu:
            raise InputError("allocate needs --menu or a config with allocate.menu")
        if args.budget_mb is not None:
            budget = parse_budget(args.budget_mb)
        else:
            budget = cfg.allocate.budget_mb * 1e6 if cfg else math.inf
        sys.stdout.write(cmd_allocate(args.traces, counts, menu, budget, out if args.out or cfg else None))
    elif cmd == "report":
        recs = []
        for p in args.records:
            try:
                recs.append(json.loads(Path(p).read_text()))
            except json.JSONDecodeError as exc:
                raise InputError(f"{p}: {exc}") from None
        res = cmd_report(recs, out)
        sys.stdout.write(res["table2"])
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except SnnQuantError as exc:
        print(f"snnquant: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"snnquant: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
