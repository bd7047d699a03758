"""Dedup networks trained with a single IoU threshold eta, evaluated at every COCO threshold.

    python3 scripts/threshold_ablation.py [--etas 0.5 0.7 0.9] [--iterations 6000]
"""

import argparse

from relnet.dedup import DedupConfig
from relnet.pipeline import BENCH_EVAL, BENCH_TRAIN, evaluate_method, scene_candidates
from relnet.synthgen import generate
from relnet.trainer import TrainConfig, train_dedup


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--etas", type=float, nargs="+", default=[0.5, 0.7, 0.9])
    ap.add_argument("--iterations", type=int, default=6000)
    args = ap.parse_args()

    train, test = generate(BENCH_TRAIN), generate(BENCH_EVAL)
    cands = scene_candidates(test)
    runs = [(f"eta={e:g}", (e,)) for e in args.etas] + [("all five", DedupConfig().etas)]
    header = None
    for name, etas in runs:
        cfg = DedupConfig(d_feat=BENCH_TRAIN.d_in, etas=etas)
        ck = train_dedup(train, cfg, TrainConfig(iterations=args.iterations, log_every=0))
        rep = evaluate_method(test, "learned", dedup_params=ck.group("dedup"), dedup_cfg=cfg, candidates=cands)
        if header is None:
            header = f"{'train':<10}{'mAP':>8}" + "".join(f"{'@' + format(t, 'g'):>8}" for t in rep.thresholds)
            print(header)
        print(f"{name:<10}{rep.map:>8.4f}" + "".join(f"{rep.ap_at(t):>8.4f}" for t in rep.thresholds), flush=True)


if __name__ == "__main__":
    main()
