"""Command-line driver: ``vprprune {gen-data,train,prune,eval,analyze}``.

Exit codes: 0 success, 1 invalid input (config, files, checkpoints), 2 runtime failure.
The thread count for BLAS-backed numpy ops is read from ``VPRPRUNE_THREADS``.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from . import dataset as data
from . import experiment as exp
from .analysis import align_embeddings, write_residual_csv
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .retrieval import write_reports_csv

log = logging.getLogger("vprprune")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "VPRPRUNE_THREADS"
LOCK_NAME = ".vprprune.lock"


class ValidationError(Exception):
    pass


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(directory: Path):
    """Exclusive per-directory lock; a lock left by a dead process is taken over."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError):
                path.unlink(missing_ok=True)
                continue
            except PermissionError:
                pass
            raise LockError(f"{directory} is in use by process {pid} (lock file {path})")
    else:
        raise LockError(f"could not acquire {path}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "output", None):
        cfg.experiment.output_dir = args.output
    return cfg


def _data_dir(args, cfg: ExperimentConfig | None) -> Path:
    if args.data:
        return Path(args.data)
    if cfg is None:
        raise ValidationError("--data is required without --config")
    return cfg.output_dir / "data"


def _load_data(path: Path) -> data.PlaceDataset:
    try:
        ds = data.load(path)
    except ValueError as exc:
        raise ValidationError(f"unreadable dataset at {path}: {exc}") from exc
    if not len(ds.subset("database")) or not len(ds.subset("query")):
        raise ValidationError(f"dataset at {path} needs both database and query views")
    missing = set(ds.subset("query").places) - set(ds.subset("database").places)
    if missing:
        raise ValidationError(f"query places {sorted(missing)[:5]} have no database views")
    return ds


def _load_checkpoint(path, cfg: ExperimentConfig | None):
    model = checkpoint.load(path)
    if cfg is not None and model.arch != cfg.experiment.architecture:
        raise ValidationError(
            f"checkpoint {path} holds a {model.arch} model but the config asks for {cfg.experiment.architecture}")
    if cfg is not None and tuple(model.spec.image_size) != (cfg.dataset.image_size,) * 2:
        raise ValidationError(f"checkpoint {path} expects {model.spec.image_size} images")
    return model


def _check_images(model, ds: data.PlaceDataset) -> None:
    want = (model.spec.in_channels, *model.spec.image_size)
    if tuple(ds.images.shape[1:]) != want:
        raise ValidationError(f"dataset images are {ds.images.shape[1:]}, model expects {want}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _data_dir(args, cfg)
    with output_lock(cfg.output_dir):
        ds = exp.make_dataset(cfg)
        data.export(ds, out)
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _load_data(_data_dir(args, cfg))
    with output_lock(cfg.output_dir):
        out = cfg.output_dir
        (out / "config.ini").write_text(dump_config(cfg))
        model, history = exp.train_dense(cfg, ds)
        path = checkpoint.save(model, out / "dense.vprc")
        report = exp.evaluate_model(model, ds, cfg)
        write_reports_csv([report], out / "dense_eval.csv")
        summary = exp.eval_summary(report)
        with open(out / "train_log.txt", "w") as fh:
            for e, loss in enumerate(history):
                fh.write(f"epoch {e} loss {loss:.10g}\n")
            fh.write(summary + "\n")
    print(f"wrote {path}")
    print(summary)
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    gammas = tuple(args.gammas) if args.gammas else cfg.schedule.gammas
    if any(not 0 <= g < 1 for g in gammas):
        raise ValidationError("every gamma must lie in [0, 1)")
    ds = _load_data(_data_dir(args, cfg))
    dense = _load_checkpoint(args.checkpoint or cfg.output_dir / "dense.vprc", cfg)
    _check_images(dense, ds)
    with output_lock(cfg.output_dir):
        for g in gammas:
            res = exp.prune_sweep(cfg, dense, ds, g, out_dir=cfg.output_dir)
            last = res.reports[-1]
            print(f"gamma {g:.2f}: {res.csv_path} final dim {last.descriptor_dim} "
                  f"recall_at_1 {last.recall_at_1:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    ds = _load_data(_data_dir(args, cfg if args.config else None))
    model = _load_checkpoint(args.checkpoint, cfg if args.config else None)
    _check_images(model, ds)
    report = exp.evaluate_model(model, ds, cfg, timing=not args.no_timing)
    if args.csv:
        write_reports_csv([report], args.csv)
    print(exp.eval_summary(report))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_config(args.config) if args.config else None
    ds = _load_data(_data_dir(args, cfg))
    dense = _load_checkpoint(args.dense, cfg)
    pruned = _load_checkpoint(args.pruned, cfg)
    if dense.arch != pruned.arch:
        raise ValidationError(f"dense is {dense.arch} but pruned is {pruned.arch}")
    for m in (dense, pruned):
        _check_images(m, ds)
    sub = ds.subset(args.split)
    if not len(sub):
        raise ValidationError(f"dataset has no {args.split!r} views")
    report = align_embeddings(dense.embed(sub.images), pruned.embed(sub.images))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_residual_csv(report, args.out)
    print(f"disparity {report.disparity:.10g} scale {report.scale:.10g} "
          f"most-deformed item {report.max_item} least-deformed item {report.min_item}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vprprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="experiment .ini file")
        sp.add_argument("--data", help="dataset directory (default: <output_dir>/data)")
        return sp

    g = with_config(sub.add_parser("gen-data", help="generate and export the synthetic place dataset"))
    g.add_argument("--output", help="override experiment.output_dir")
    g.set_defaults(func=cmd_gen_data)

    t = with_config(sub.add_parser("train", help="train the dense model; writes dense.vprc and train_log.txt"))
    t.add_argument("--output", help="override experiment.output_dir")
    t.set_defaults(func=cmd_train)

    pr = with_config(sub.add_parser("prune", help="IMP sweep; one trade-off CSV per gamma"))
    pr.add_argument("--checkpoint", help="dense checkpoint (default: <output_dir>/dense.vprc)")
    pr.add_argument("--gammas", type=float, nargs="+", help="override schedule.gammas")
    pr.add_argument("--output", help="override experiment.output_dir")
    pr.set_defaults(func=cmd_prune)

    e = with_config(sub.add_parser("eval", help="score a checkpoint on a dataset"), required=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--csv", help="also write the report as a one-row CSV")
    e.add_argument("--no-timing", action="store_true", help="skip latency measurement")
    e.set_defaults(func=cmd_eval)

    a = with_config(sub.add_parser("analyze", help="Procrustes residuals between dense and pruned embeddings"),
                    required=False)
    a.add_argument("--dense", required=True)
    a.add_argument("--pruned", required=True)
    a.add_argument("--split", default="query", choices=data.SPLITS)
    a.add_argument("--out", required=True, help="residual CSV path")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (ConfigError, CheckpointError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
