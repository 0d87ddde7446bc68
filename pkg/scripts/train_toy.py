"""Toy end-to-end run: train on 20 phantoms, score 5 held-out ones.

    python3 scripts/train_toy.py --steps 1000 --out runs/toy
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from sparsebone.network import save_checkpoint
from sparsebone.objective import ClassGrouping, hard_dice
from sparsebone.phantom import PhantomSpec, generate_phantom
from sparsebone.pipeline import predict_volume
from sparsebone.train import TrainConfig, run_training

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default=CONFIGS / "phantom_64.json")
    ap.add_argument("--config", default=CONFIGS / "train_toy.json")
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--train", type=int, default=20)
    ap.add_argument("--held-out", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()

    spec = PhantomSpec.load(args.spec)
    cfg = TrainConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train = [generate_phantom(spec, [args.seed, i]) for i in range(args.train)]
    held = [generate_phantom(spec, [args.seed + 1, i]) for i in range(args.held_out)]
    t0 = time.perf_counter()

    def progress(step, loss):
        if step % 100 == 0:
            print(f"step {step:5d}  loss {loss:.4f}  {time.perf_counter() - t0:6.1f}s", flush=True)

    ckpt, losses = run_training(train, cfg, args.steps, args.seed, progress)
    t_train = time.perf_counter() - t0
    save_checkpoint(out / "model.bnt", ckpt)
    np.savetxt(out / "loss.csv", np.column_stack([np.arange(len(losses)), losses]),
               delimiter=",", header="step,loss", comments="", fmt=["%d", "%.6f"])

    grouping = ClassGrouping.per_class(spec.num_classes)
    rows = []
    for i, (hu, labels) in enumerate(held):
        pred, timings = predict_volume(ckpt, hu, cfg.fusion, cfg.sampling.window)
        d = hard_dice(pred, labels, grouping)["dice"]
        fg = float(np.mean([d[f"class_{c}"] for c in range(1, spec.num_classes)]))
        rows.append({"case": i, "dice": d, "foreground_mean": fg, "timings": timings})
        print(f"held-out {i}: " + "  ".join(f"{k} {v:6.2f}" for k, v in d.items())
              + f"  | fg mean {fg:.2f}")
    summary = {"steps": args.steps, "train_seconds": t_train,
               "mean_foreground_dice": float(np.mean([r["foreground_mean"] for r in rows])),
               "cases": rows}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"trained in {t_train:.0f}s; held-out mean foreground Dice "
          f"{summary['mean_foreground_dice']:.2f}%")


if __name__ == "__main__":
    main()
