"""NMS / SoftNMS parameter grids against the learned dedup network on the fixed-seed benchmark.

    python3 scripts/benchmark.py [--iterations 6000] [--out results/benchmark.json]
"""

import argparse
import json
import time
from pathlib import Path

from relnet.dedup import DedupConfig
from relnet.pipeline import BENCH_EVAL, BENCH_TRAIN, format_table, sweep
from relnet.synthgen import generate
from relnet.trainer import TrainConfig, train_dedup


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=6000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()

    train, test = generate(BENCH_TRAIN), generate(BENCH_EVAL)
    cfg = DedupConfig(d_feat=BENCH_TRAIN.d_in)
    t0 = time.perf_counter()
    ck = train_dedup(train, cfg, TrainConfig(iterations=args.iterations, seed=args.seed, log_every=0))
    print(f"trained {args.iterations} iterations in {time.perf_counter() - t0:.0f} s")
    rows = sweep(test, dedup_params=ck.group("dedup"), dedup_cfg=cfg)
    print(format_table(rows))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")


if __name__ == "__main__":
    main()
