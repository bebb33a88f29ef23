"""Command-line entry point: ``dsta {synth,train,eval,fuse,gradcheck,frontier}``.

Results go to stdout as one JSON object; logs and errors go to stderr.  Each
command writes a ``<command>.manifest.json`` into its output directory.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from dsta import __version__
from dsta import checkpoint as ckpt_io
from dsta import features as ft
from dsta import metrics as mt
from dsta import numgrad as ng
from dsta.fusion import fuse_traces, optimize_thresholds
from dsta.gradcheck import check_params, tiny_problem
from dsta.model import forward_video
from dsta.trainer import TrainConfig, TrainingDiverged, pareto_frontier, predict, read_metrics, train

log = logging.getLogger("dsta")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# plumbing


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "started_at": dt.datetime.fromtimestamp(started, dt.timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out_dir / f"{command}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@contextmanager
def _locked(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{run_dir} is in use by another command (remove {lock} if stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _load_samples(path: Path, split: str = "test") -> list[ft.VideoSample]:
    """A ``.dsta`` file, or a dataset directory (then ``<split>.dsta``)."""
    if path.is_dir():
        path = path / f"{split}.dsta"
    if not path.exists():
        raise DataError(f"no such feature file: {path}")
    return ft.read(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> dict:
    started = time.time()
    if args.spec:
        spec = ft.DatasetSpec.from_dict(_read_json(args.spec))
    else:
        spec = ft.DatasetSpec.dad_like() if args.preset == "dad" else ft.DatasetSpec.ccd_like()
    overrides = {k: v for k, v in (("seed", args.seed), ("signal", args.signal)) if v is not None}
    if overrides:
        spec = ft.DatasetSpec.from_dict({**spec.to_dict(), **overrides})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = ft.synthesize(spec)
    paths = []
    for split, samples in data.items():
        ft.write(samples, out / f"{split}.dsta")
        paths.append(out / f"{split}.dsta")
    ft.write_splits(out / "splits.json", {k: [s.id for s in v] for k, v in data.items()})
    (out / "dataset.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    paths += [out / "splits.json", out / "dataset.json"]
    _write_manifest(out, "synth", spec.to_dict(), spec.seed, [args.spec] if args.spec else [], paths, started)
    return {"out": str(out), "train": len(data["train"]), "test": len(data["test"])}


def _train_config(args, run_dir: Path) -> TrainConfig:
    if args.config:
        raw = _read_json(args.config)
    elif args.resume and (run_dir / "config.json").exists():
        raw = _read_json(run_dir / "config.json")
    else:
        raw = {}
    flags = {
        "epochs": args.epochs,
        "seed": args.seed,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "d": args.d,
        "M": args.M,
        "w_a": args.w_a,
    }
    raw.update({k: v for k, v in flags.items() if v is not None})
    for name in ("dsa", "dta", "tsaa"):
        if getattr(args, f"no_{name}"):
            raw[f"use_{name}"] = False
    return TrainConfig.from_dict(raw)


def _latest_checkpoint(run_dir: Path) -> Path:
    found = sorted(run_dir.glob("epoch_*.ckpt"))
    if not found:
        raise DataError(f"nothing to resume: no checkpoints in {run_dir}")
    return found[-1]


def cmd_train(args) -> dict:
    started = time.time()
    run_dir = Path(args.run_dir)
    data_dir = Path(args.data)
    with _locked(run_dir):
        cfg = _train_config(args, run_dir)
        train_set = _load_samples(data_dir, "train")
        val_set = _load_samples(data_dir, "test")
        resume = None
        if args.resume:
            path = _latest_checkpoint(run_dir) if args.resume == "latest" else Path(args.resume)
            resume = ckpt_io.load(path)
            log.info("resuming from %s (epoch %d)", path, resume.epoch)
        try:
            cks = train(cfg, train_set, val_set, run_dir=run_dir, resume=resume)
        except TrainingDiverged as exc:
            raise NumericalFailure(str(exc)) from exc
        written = [run_dir / f"epoch_{c.epoch:03d}.ckpt" for c in cks]
        _write_manifest(run_dir, "train", cfg.to_dict(), cfg.seed, [data_dir], written, started)
    final = cks[-1].metrics if cks else {}
    return {"run_dir": str(run_dir), "checkpoints": len(cks), "final": final}


def _attention_rows(trace):
    T, N = trace.alpha.shape
    M = trace.beta.shape[1]
    header = ["t"] + [f"alpha_{i + 1}" for i in range(N)] + [f"beta_{j + 1}" for j in range(M)] + ["a_t"]
    beta_mean = trace.beta.mean(axis=2)
    rows = [[t + 1, *trace.alpha[t], *beta_mean[t], trace.a[t]] for t in range(T)]
    return header, rows


def cmd_eval(args) -> dict:
    started = time.time()
    ck = ckpt_io.load(args.checkpoint)
    samples = _load_samples(Path(args.data), args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traces, _ = predict(ck.params, samples)
    report = mt.evaluate(traces)
    report.write_json(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    mt.write_traces(traces, out / "traces.tsv")
    outputs = [out / "metrics.json", out / "metrics.csv", out / "traces.tsv"]
    if not args.no_attention:
        att = out / "attention"
        att.mkdir(exist_ok=True)
        for s in samples:
            header, rows = _attention_rows(forward_video(ck.params, s))
            with open(att / f"{s.id}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows([[r[0], *(repr(float(x)) for x in r[1:])] for r in rows])
        outputs.append(att)
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split}
    _write_manifest(out, "eval", config, None, [args.checkpoint, args.data], outputs, started)
    return report.summary()


def cmd_fuse(args) -> dict:
    started = time.time()
    t1, t2 = mt.read_traces(args.traces1), mt.read_traces(args.traces2)
    thr1, thr2, report = optimize_thresholds(t1, t2, args.objective, args.grid_step)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mt.write_traces(fuse_traces(t1, t2, thr1, thr2), out / "traces.tsv")
    result = {
        "thr1": thr1,
        "thr2": thr2,
        "objective": args.objective,
        "fused": report.summary(),
        "model1": mt.evaluate(t1).summary(),
        "model2": mt.evaluate(t2).summary(),
    }
    (out / "fusion.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    config = {"objective": args.objective, "grid_step": args.grid_step}
    _write_manifest(out, "fuse", config, None, [args.traces1, args.traces2],
                    [out / "traces.tsv", out / "fusion.json"], started)
    return result


def cmd_gradcheck(args) -> dict:
    started = time.time()
    flags = {f"use_{n}": not getattr(args, f"no_{n}") for n in ("dsa", "dta", "tsaa")}
    params, samples = tiny_problem(d=args.d, N=args.N, M=args.M, T=args.T, seed=args.seed, **flags)
    if args.corrupt is not None and args.corrupt not in params.tensors:
        raise UsageError(f"unknown tensor {args.corrupt!r}")
    results = check_params(params, samples, tol=args.tol, corrupt=args.corrupt)
    failed = [r.name for r in results if not r.passed]
    for r in results:
        log.info("%-8s %.3e  %s", r.name, r.max_rel_err, "ok" if r.passed else "FAIL")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "passed": not failed,
        "failed": failed,
        "tol": args.tol,
        "tensors": {r.name: r.max_rel_err for r in results},
    }
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    config = {k: getattr(args, k) for k in ("d", "N", "M", "T", "tol")} | flags
    _write_manifest(out, "gradcheck", config, args.seed, [], [out / "gradcheck.json"], started)
    if failed:
        _emit(report)
        raise NumericalFailure("gradient mismatch in " + ", ".join(failed))
    return report


def cmd_frontier(args) -> dict:
    started = time.time()
    run_dir = Path(args.run_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise DataError(f"no metrics.csv in {run_dir}")
    rows = read_metrics(metrics_path)
    if not rows:
        raise DataError(f"{metrics_path} has no epochs")
    front = pareto_frontier(rows, min_mtta=args.min_mtta, min_ap=args.min_ap)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "frontier.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "AP", "mTTA", "checkpoint"])
        for r in front:
            w.writerow([r["epoch"], repr(r["AP"]), repr(r["mTTA"]), f"epoch_{r['epoch']:03d}.ckpt"])
    config = {"min_mtta": args.min_mtta, "min_ap": args.min_ap}
    _write_manifest(out, "frontier", config, None, [metrics_path], [out / "frontier.csv"], started)
    return {"frontier": [{"epoch": r["epoch"], "AP": r["AP"], "mTTA": r["mTTA"]} for r in front]}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsta", description="Accident anticipation with dynamic spatial-temporal attention.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic feature dataset")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--spec", help="JSON dataset spec")
    src.add_argument("--preset", choices=["dad", "ccd"], default="dad")
    s.add_argument("--seed", type=int)
    s.add_argument("--signal", type=float, help="risk-signal strength override")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model, one checkpoint per epoch")
    t.add_argument("--data", required=True, help="dataset directory with train.dsta and test.dsta")
    t.add_argument("--run-dir", required=True)
    t.add_argument("--config", help="JSON training config; flags below override it")
    t.add_argument("--resume", nargs="?", const="latest", help="checkpoint to resume from (default: latest in run dir)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--d", type=int)
    t.add_argument("--M", type=int)
    t.add_argument("--w-a", type=float)
    for name in ("dsa", "dta", "tsaa"):
        t.add_argument(f"--no-{name}", action="store_true", help=f"ablate the {name.upper()} module")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help=".dsta file or dataset directory")
    e.add_argument("--split", default="test", help="file to use when --data is a directory")
    e.add_argument("--out", required=True)
    e.add_argument("--no-attention", action="store_true", help="skip per-video attention CSVs")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="late-fuse two score-trace files")
    f.add_argument("--traces1", required=True)
    f.add_argument("--traces2", required=True)
    f.add_argument("--objective", choices=["AP", "P80R"], default="AP")
    f.add_argument("--grid-step", type=float, default=0.01)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    g.add_argument("--d", type=int, default=8)
    g.add_argument("--N", type=int, default=3)
    g.add_argument("--M", type=int, default=4)
    g.add_argument("--T", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    for name in ("dsa", "dta", "tsaa"):
        g.add_argument(f"--no-{name}", action="store_true")
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("frontier", help="Pareto-optimal epochs of a run by (AP, mTTA)")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--min-mtta", type=float, default=1.0)
    r.add_argument("--min-ap", type=float, default=0.5)
    r.add_argument("--out", help="output directory (default: the run directory)")
    r.set_defaults(func=cmd_frontier)
    return p


def _setup_logging(verbose: bool) -> None:
    # own handler on the package logger so diagnostics reach stderr even
    # when the host process has already configured the root logger
    pkg = logging.getLogger("dsta")
    for h in list(pkg.handlers):
        pkg.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    pkg.addHandler(handler)
    pkg.setLevel(logging.DEBUG if verbose else logging.INFO)
    pkg.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        _emit(args.func(args))
        return EXIT_OK
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericalFailure, ng.NonFiniteError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ft.FeatureFileError, mt.MetricError, ckpt_io.CheckpointError, ng.ShapeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
