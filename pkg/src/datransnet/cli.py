"""``datn`` command line: synth, train, eval, infer and ablate.

Exit codes:

* 0 success
* 1 IO or other runtime failure (missing files, malformed PGM or dataset)
* 2 configuration error (unknown key, bad value, invalid combination)
* 3 training diverged (non-finite loss or gradient)
* 4 checkpoint does not match the configured network (names the tensor)
* 5 input size not divisible by the network's required multiple

Set ``DATN_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config
from .data import DatasetError, PgmError, load_dataset_dir, load_pgm, save_pgm, synthesize, write_dataset_dir
from .metrics import evaluate, roc
from .network import CheckpointError, ConfigError, build, load_checkpoint, predict
from .tensor import DimensionError, Tensor, no_grad
from .training import TrainingDiverged, fit

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_SHAPE = range(6)

METRICS_HEADER = ("miou", "f1", "pd", "fa")
ABLATION_HEADER = (
    "variant", "miou", "f1", "pd", "fa", "params",
    "published_miou_pct", "published_f1_pct", "published_pd_pct", "published_fa_e6", "published_params_m",
)
PUBLISHED_NOTE = (
    "published_* columns are figures reported for full-scale training on a public benchmark; "
    "they are context only and not comparable with the desk-scale numbers"
)

# variant -> (network overrides, published miou, f1, pd, fa, params in millions)
GRIDS: dict[str, list[tuple[str, dict, tuple]]] = {
    "components": [
        ("baseline", dict(datrans=False, gfem_nonlocal=False, gfem_se=False), (91.31, 95.44, 97.98, 4.46, None)),
        ("+DATrans", dict(datrans=True, gfem_nonlocal=False, gfem_se=False), (94.25, 97.03, 98.83, 2.73, None)),
        ("+GFEM", dict(datrans=False, gfem_nonlocal=True, gfem_se=True), (92.32, 96.14, 96.30, 3.96, None)),
        ("+DATrans+GFEM", dict(datrans=True, gfem_nonlocal=True, gfem_se=True), (94.93, 97.39, 99.04, 2.00, None)),
    ],
    "dilations": [
        ("1", dict(datrans=True, dilations=(1,)), (93.53, 96.30, 98.89, 5.58, None)),
        ("1,2", dict(datrans=True, dilations=(1, 2)), (94.41, 97.12, 98.83, 2.46, None)),
        ("1,3", dict(datrans=True, dilations=(1, 3)), (94.93, 97.39, 99.04, 2.00, None)),
        ("1,5", dict(datrans=True, dilations=(1, 5)), (94.24, 97.03, 98.65, 1.47, None)),
        ("1,2,3,4", dict(datrans=True, dilations=(1, 2, 3, 4)), (94.58, 97.20, 98.04, 2.21, None)),
    ],
    "gfem": [
        ("none", dict(datrans=True, gfem_nonlocal=False, gfem_se=False), (94.25, 97.03, None, None, 3.70)),
        ("non-local", dict(datrans=True, gfem_nonlocal=True, gfem_se=False), (94.69, 97.27, None, None, 4.03)),
        ("SE", dict(datrans=True, gfem_nonlocal=False, gfem_se=True), (94.53, 97.19, None, None, 4.02)),
        ("non-local+SE", dict(datrans=True, gfem_nonlocal=True, gfem_se=True), (94.93, 97.39, None, None, 4.04)),
    ],
}

# validation scenes get seeds disjoint from training scenes (seed ^ index stays below 2**32)
_VAL_SEED_OFFSET = 1 << 32


# datasets ------------------------------------------------------------------


def training_data(config: RunConfig):
    """(train, val) samples from the configured directories, else synthesised from the seed."""
    if config.paths.train is not None:
        train = load_dataset_dir(config.paths.train)
    else:
        train = synthesize(config.data, config.synth.train_count, "train")
    if config.paths.val is not None:
        val = load_dataset_dir(config.paths.val)
    else:
        val = validation_scenes(config)
    return train, val


def validation_scenes(config: RunConfig):
    spec = dataclasses.replace(config.data, seed=config.data.seed + _VAL_SEED_OFFSET)
    return synthesize(spec, config.synth.val_count, "val")


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


# commands ------------------------------------------------------------------


def cmd_synth(config: RunConfig, out_dir: Path, count: int) -> None:
    """Write ``count`` scenes to ``out_dir/{images,masks}`` plus ``manifest.csv``."""
    if count < 0:
        raise ConfigError("count", f"must be non-negative, got {count}")
    write_dataset_dir(synthesize(config.data, count, "scene"), out_dir)


def cmd_train(config: RunConfig, out_dir: Optional[Path] = None):
    """Train one network; writes train_log.csv, best.datn, final.datn and config.txt."""
    out_dir = Path(out_dir or config.paths.out)
    train, val = training_data(config)
    if not train or not val:
        raise DatasetError("training and validation sets must both be non-empty")
    net = build(config.net)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text())
    return fit(net, train, val, config.train, out_dir)


def _load_net(config: RunConfig, checkpoint: Path):
    net = build(config.net)
    load_checkpoint(net, checkpoint)
    return net


def cmd_eval(
    config: RunConfig,
    checkpoint: Path,
    data_dir: Optional[Path],
    out_dir: Path,
    threshold: Optional[float] = None,
    n_thresholds: int = 50,
):
    """Write ``metrics.csv`` (miou, f1, pd, fa per 10^6 px) and ``roc.csv`` (fa as a fraction)."""
    threshold = config.train.threshold if threshold is None else threshold
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("threshold", f"must lie in [0, 1], got {threshold}")
    if n_thresholds < 1:
        raise ConfigError("n_thresholds", f"must be >= 1, got {n_thresholds}")
    net = _load_net(config, checkpoint)
    if data_dir is not None:
        samples = load_dataset_dir(data_dir)
    elif config.paths.val is not None:
        samples = load_dataset_dir(config.paths.val)
    else:
        samples = validation_scenes(config)
    if not samples:
        raise DatasetError("evaluation set is empty")
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    probs = predict(net, images, config.train.batch_size)
    summary = evaluate(probs, masks, threshold, config.train.match_radius)
    curve = roc(probs, masks, n_thresholds, config.train.match_radius)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    row = (summary.miou, summary.f1, summary.pd, summary.fa * 1e6)
    _write_rows(out_dir / "metrics.csv", METRICS_HEADER, [[repr(float(x)) for x in row]])
    curve.to_csv(out_dir / "roc.csv")
    return summary, curve


def cmd_infer(config: RunConfig, checkpoint: Path, image: Path, out: Path, threshold: Optional[float] = None) -> np.ndarray:
    """Threshold the probability map of one PGM and save it as a 0/255 P5 mask."""
    threshold = config.train.threshold if threshold is None else threshold
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("threshold", f"must lie in [0, 1], got {threshold}")
    net = _load_net(config, checkpoint)
    pixels = load_pgm(image)
    with no_grad():
        prob = net(Tensor(pixels[None])).data[0]
    mask = (prob > threshold).astype(np.float64)
    save_pgm(mask, out)
    return mask


def _run_variant(job: tuple[RunConfig, str]) -> list:
    config, variant = job
    train, val = training_data(config)
    net = build(config.net)
    fit(net, train, val, config.train)
    probs = predict(net, np.stack([s.image for s in val]), config.train.batch_size)
    s = evaluate(probs, np.stack([s.mask for s in val]), config.train.threshold, config.train.match_radius)
    return [variant, s.miou, s.f1, s.pd, s.fa * 1e6, net.param_count()]


def ablation_variants(config: RunConfig, grid: str) -> list[tuple[str, RunConfig, tuple]]:
    if grid not in GRIDS:
        raise ConfigError("grid", f"must be one of {sorted(GRIDS)}, got {grid!r}")
    out = []
    for name, changes, published in GRIDS[grid]:
        try:
            variant = config.with_net(**changes)
        except ConfigError as exc:
            raise ConfigError(f"net.{exc.field}", f"variant {name}: {str(exc).split(': ', 1)[-1]}") from None
        out.append((name, variant, published))
    return out


def cmd_ablate(config: RunConfig, grid: str, out_dir: Path, workers: int = 1) -> list[list]:
    """Train every variant of ``grid`` with the shared seed; writes ``ablation_<grid>.csv``."""
    if workers < 1:
        raise ConfigError("workers", f"must be >= 1, got {workers}")
    variants = ablation_variants(config, grid)
    jobs = [(cfg, name) for name, cfg, _ in variants]
    if workers == 1:
        results = [_run_variant(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_variant, jobs))
    by_name = {r[0]: r for r in results}
    rows = [by_name[name] + list(published) for name, _, published in variants]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_rows(out_dir / f"ablation_{grid}.csv", ABLATION_HEADER, [[_cell(x) for x in r] for r in rows])
    return rows


# argument parsing ------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="datn", description="Small infrared target segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    shared.add_argument("--config", type=Path, help="key=value config file (defaults when omitted)")
    shared.add_argument("--seed", type=int, help="override the shared seed")

    def common(sp, out_required=False):
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    sp = sub.add_parser("synth", parents=[shared], help="write a synthetic dataset")
    common(sp, out_required=True)
    sp.add_argument("--count", type=int, help="number of scenes (default data.train_count)")

    sp = sub.add_parser("train", parents=[shared], help="train a network")
    common(sp)

    sp = sub.add_parser("eval", parents=[shared], help="metrics and ROC of a checkpoint")
    common(sp, out_required=True)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, help="dataset directory (default paths.val or synthetic)")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--n-thresholds", type=int, default=50)

    sp = sub.add_parser("infer", parents=[shared], help="segment one PGM image")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--input", type=Path, required=True, help="P5 PGM image")
    sp.add_argument("--output", type=Path, required=True, help="P5 PGM mask to write")
    sp.add_argument("--threshold", type=float)

    sp = sub.add_parser("ablate", parents=[shared], help="run an ablation grid")
    common(sp, out_required=True)
    sp.add_argument("--grid", required=True, choices=sorted(GRIDS))
    sp.add_argument("--workers", type=int, default=1)
    return p


def _threads() -> Optional[int]:
    raw = os.environ.get("DATN_THREADS")
    if raw is None or not raw.strip():
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("DATN_THREADS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("DATN_THREADS", f"expected a positive integer, got {raw!r}")
    return n


def _dispatch(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.command == "synth":
        count = config.synth.train_count if args.count is None else args.count
        cmd_synth(config, args.out, count)
        print(f"wrote {count} scenes to {args.out}")
    elif args.command == "train":
        result = cmd_train(config, args.out)
        print(f"best epoch {result.best_epoch} val miou {result.best_miou:.4f}")
    elif args.command == "eval":
        s, _ = cmd_eval(config, args.checkpoint, args.data, args.out, args.threshold, args.n_thresholds)
        print(f"miou {s.miou:.4f} f1 {s.f1:.4f} pd {s.pd:.4f} fa {s.fa * 1e6:.2f}e-6")
    elif args.command == "infer":
        mask = cmd_infer(config, args.checkpoint, args.input, args.output, args.threshold)
        print(f"wrote {args.output} ({int(mask.sum())} target pixels)")
    elif args.command == "ablate":
        rows = cmd_ablate(config, args.grid, args.out, args.workers)
        for r in rows:
            print(f"{r[0]:>16}  miou {r[1]:.4f}  f1 {r[2]:.4f}  pd {r[3]:.4f}  fa {r[4]:.2f}  params {r[5]}")
        print(PUBLISHED_NOTE)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = _threads()
        if threads is None:
            _dispatch(args)
        else:
            with threadpool_limits(limits=threads):
                _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT if exc.tensor is not None else EXIT_IO
    except DimensionError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (OSError, DatasetError, PgmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
