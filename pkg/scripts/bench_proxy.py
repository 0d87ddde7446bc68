"""Sparse vs dense forward timing on a 128^3 phantom at a few occupancies.

    python3 scripts/bench_proxy.py --repeat 5
"""

import argparse
import json
from pathlib import Path

from sparsebone.cli import run_bench
from sparsebone.network import Checkpoint, UNetConfig, init_network
from sparsebone.phantom import PhantomSpec, generate_phantom
from sparsebone.pipeline import compute_dataset_stats

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def scaled_spec(base: PhantomSpec, factor: int) -> PhantomSpec:
    d = base.to_dict()
    for p in d["primitives"]:
        p["count"] *= factor
    d["max_occupancy"] = 1.0
    return PhantomSpec.from_dict(d)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default=CONFIGS / "phantom_bench_128.json")
    ap.add_argument("--factors", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    base = PhantomSpec.load(args.spec)
    cfg = UNetConfig(num_classes=base.num_classes)
    params = init_network(cfg, args.seed)
    results = []
    for f in args.factors:
        hu, _ = generate_phantom(scaled_spec(base, f), args.seed)
        occ = float(((hu >= 200) & (hu <= 3000)).mean())
        stats = compute_dataset_stats([hu])
        ckpt = Checkpoint(cfg, params, mu=stats.mu, sigma=stats.sigma)
        r = run_bench(ckpt, hu, ["sparse", "dense"], args.repeat, max(base.shape))
        r["occupancy"] = occ
        results.append(r)
        s, d = r["modes"]["sparse"]["median"], r["modes"]["dense"]["median"]
        print(f"occupancy {100 * occ:5.2f}%  sparse {s['forward']:6.2f}s  dense "
              f"{d['forward']:6.2f}s  speedup {r['speedup_forward']:5.1f}x  "
              f"agreement {100 * r['label_agreement']:.3f}%", flush=True)
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
