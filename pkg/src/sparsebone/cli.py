"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dense_ref import dense_forward
from .errors import SparseBoneError
from .io_ct import VolumeMeta, export_mask, read_rawz, read_volume, write_rawz
from .network import Checkpoint, load_checkpoint, save_checkpoint
from .objective import ClassGrouping, hard_dice
from .phantom import PhantomSpec, generate_phantom
from .pipeline import (FusionConfig, predict_sparse, resolve_workers, scatter_labels,
                       sparse_forward)
from .train import TrainConfig, run_training

log = logging.getLogger("sparsebone")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def write_run_manifest(path, command, config, seed, inputs, outputs, timings):
    manifest = {"command": command, "config": config, "seed": seed, "inputs": inputs,
                "outputs": outputs, "timings": timings, "exit_status": 0}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require_file(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"{path}: no such file")


# -- phantom -----------------------------------------------------------------

def cmd_phantom(args) -> None:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if args.spec is not None:
        _require_file(args.spec)
        spec = PhantomSpec.load(args.spec)
    else:
        spec = PhantomSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    cases = []
    for i in range(args.count):
        hu, labels = generate_phantom(spec, [args.seed, i])
        stem = f"case_{i:03d}"
        write_rawz(out / f"{stem}_hu.rawz", hu, VolumeMeta(spec.shape, kind="hu"))
        write_rawz(out / f"{stem}_labels.rawz", labels, VolumeMeta(spec.shape, kind="labels"))
        cases.append({"name": stem, "hu": f"{stem}_hu.rawz", "labels": f"{stem}_labels.rawz"})
    dataset = {"spec": spec.to_dict(), "seed": args.seed, "num_classes": spec.num_classes,
               "cases": cases}
    (out / "dataset.json").write_text(json.dumps(dataset, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out / "run.json", "phantom", spec.to_dict(), args.seed,
                       [args.spec], [str(out / "dataset.json")],
                       {"generate": time.perf_counter() - t0})
    print(f"wrote {args.count} phantom cases to {out}")


# -- train -------------------------------------------------------------------

def load_dataset(data_dir):
    data_dir = Path(data_dir)
    manifest = data_dir / "dataset.json"
    _require_file(manifest)
    ds = json.loads(manifest.read_text())
    cases = []
    for case in ds["cases"]:
        hu, _ = read_rawz(data_dir / case["hu"])
        labels, _ = read_rawz(data_dir / case["labels"])
        cases.append((hu, labels))
    return ds, cases


def cmd_train(args) -> None:
    if args.steps < 0:
        raise UsageError("--steps must be nonnegative")
    if args.config is not None:
        _require_file(args.config)
        cfg = TrainConfig.load(args.config)
    else:
        cfg = TrainConfig()
    ds, cases = load_dataset(args.data)
    t0 = time.perf_counter()

    def report(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, loss)

    ckpt, losses = run_training(cases, cfg, args.steps, args.seed, report)
    elapsed = time.perf_counter() - t0
    save_checkpoint(args.out, ckpt)
    csv_path = Path(str(args.out) + ".loss.csv")
    with open(csv_path, "w") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(losses):
            f.write(f"{i},{loss!r}\n")
    write_run_manifest(str(args.out) + ".run.json", "train", cfg.to_dict(), args.seed,
                       [str(args.data)], [str(args.out), str(csv_path)], {"train": elapsed})
    last = f"{losses[-1]:.5f}" if losses else "n/a"
    print(f"trained {args.steps} steps in {elapsed:.1f}s, final loss {last}; wrote {args.out}")


# -- infer -------------------------------------------------------------------

def _inference_settings(ckpt: Checkpoint, window_arg):
    extra = ckpt.extra or {}
    fusion = FusionConfig(**extra["fusion"]) if "fusion" in extra else FusionConfig()
    window = window_arg or extra.get("sampling", {}).get("window", 128)
    return fusion, int(window)


def cmd_infer(args) -> None:
    _require_file(args.ckpt)
    ckpt = load_checkpoint(args.ckpt)
    volume, meta = read_volume(args.input)
    fusion, window = _inference_settings(ckpt, args.window)
    workers = resolve_workers(args.workers)
    pred = predict_sparse(ckpt, volume, fusion, window, workers)
    mask = scatter_labels(pred, volume.shape)
    export_mask(args.out, mask, meta)
    write_run_manifest(str(args.out) + ".run.json", "infer",
                       {"fusion": asdict(fusion), "window": window, "workers": workers},
                       ckpt.seed, [str(args.ckpt), str(args.input)], [str(args.out)],
                       pred.timings)
    t = pred.timings
    print(f"{pred.num_windows} windows, {len(pred.labels)} active voxels; "
          f"preprocess {t['preprocess']:.3f}s forward {t['forward']:.3f}s fuse {t['fuse']:.3f}s")


# -- eval --------------------------------------------------------------------

def format_dice_table(report: dict) -> str:
    rows = ["group            dice(%)"]
    for name, val in report["dice"].items():
        flag = "  (both empty)" if name in report["empty_both"] else ""
        rows.append(f"{name:<16} {val:7.2f}{flag}")
    return "\n".join(rows)


def cmd_eval(args) -> None:
    _require_file(args.groups)
    grouping = ClassGrouping.load(args.groups)
    pred, _ = read_rawz(args.pred)
    gt, _ = read_rawz(args.gt)
    report = hard_dice(pred, gt, grouping)
    print(format_dice_table(report))
    print(json.dumps(report, sort_keys=True))
    out = Path(args.out) if args.out else Path(str(args.pred) + ".dice.json")
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_run_manifest(str(out) + ".run.json", "eval", {"groups": str(args.groups)}, None,
                       [str(args.pred), str(args.gt)], [str(out)], {})


# -- bench -------------------------------------------------------------------

def run_bench(ckpt: Checkpoint, volume: np.ndarray, modes, repeat: int, window: int,
              workers: int = 1):
    fusion, _ = _inference_settings(ckpt, window)
    forwards = {"sparse": sparse_forward, "dense": dense_forward}
    report = {"window": window, "repeat": repeat, "modes": {}}
    preds = {}
    for mode in modes:
        samples = {"preprocess": [], "forward": [], "fuse": []}
        for _ in range(repeat):
            pred = predict_sparse(ckpt, volume, fusion, window, workers, forwards[mode])
            for k in samples:
                samples[k].append(pred.timings[k])
        preds[mode] = pred
        report["modes"][mode] = {
            "samples": samples,
            "median": {k: statistics.median(v) for k, v in samples.items()},
            "active_voxels": int(len(pred.labels)),
        }
    if "sparse" in preds and "dense" in preds:
        s, d = report["modes"]["sparse"]["median"], report["modes"]["dense"]["median"]
        report["speedup_forward"] = d["forward"] / s["forward"]
        report["label_agreement"] = float(np.mean(preds["sparse"].labels == preds["dense"].labels))
    return report


def cmd_bench(args) -> None:
    if args.repeat < 1:
        raise UsageError("--repeat must be at least 1")
    _require_file(args.ckpt)
    ckpt = load_checkpoint(args.ckpt)
    volume, _ = read_volume(args.input)
    modes = ["sparse", "dense"] if args.mode == "both" else [args.mode]
    _, window = _inference_settings(ckpt, args.window)
    report = run_bench(ckpt, volume, modes, args.repeat, window, resolve_workers(args.workers))
    for mode, r in report["modes"].items():
        m = r["median"]
        print(f"{mode:<7} preprocess {m['preprocess']:.3f}s forward {m['forward']:.3f}s "
              f"fuse {m['fuse']:.3f}s (median of {args.repeat})")
    if "speedup_forward" in report:
        print(f"sparse vs dense forward speedup: {report['speedup_forward']:.1f}x, "
              f"label agreement {100 * report['label_agreement']:.2f}%")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_run_manifest(str(args.out) + ".run.json", "bench",
                           {"mode": args.mode, "window": window}, ckpt.seed,
                           [str(args.ckpt), str(args.input)], [str(args.out)],
                           {m: r["median"] for m, r in report["modes"].items()})


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsebone", description="Sparse-voxel CT bone segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate synthetic phantom volumes")
    s.add_argument("--spec", default=None)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train a network on a phantom dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="segment one volume")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="per-group Dice between two masks")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--groups", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time sparse and dense inference")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--mode", choices=["sparse", "dense", "both"], default="both")
    s.add_argument("--repeat", type=int, default=5)
    s.add_argument("--window", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors exit 1, --help exits 0
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as e:
        print(f"sparsebone {args.command}: {e}", file=sys.stderr)
        return 1
    except (SparseBoneError, OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"sparsebone {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
