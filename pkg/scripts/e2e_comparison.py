"""Separately trained head + dedup against joint end-to-end training, each scored with NMS and learned dedup.

    python3 scripts/e2e_comparison.py [--iterations 6000]
"""

import argparse

from relnet.dedup import DedupConfig
from relnet.head import HeadConfig
from relnet.pipeline import BENCH_EVAL, BENCH_TRAIN, evaluate_method, scene_candidates
from relnet.synthgen import generate
from relnet.trainer import TrainConfig, train_dedup, train_end_to_end, train_head


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=6000)
    args = ap.parse_args()

    train, test = generate(BENCH_TRAIN), generate(BENCH_EVAL)
    head_cfg = HeadConfig(d_in=BENCH_TRAIN.d_in)
    dedup_cfg = DedupConfig(d_feat=head_cfg.d_hidden)
    tcfg = TrainConfig(iterations=args.iterations, log_every=0)
    head = train_head(train, head_cfg, tcfg)
    models = {
        "separate": train_dedup(train, dedup_cfg, tcfg, head=head, head_cfg=head_cfg),
        "e2e": train_end_to_end(train, head_cfg, dedup_cfg, tcfg),
    }
    print(f"{'training':<10}{'NMS 0.5':>9}{'learned':>9}")
    for name, ck in models.items():
        cands = scene_candidates(test, (ck.group("head"), head_cfg))
        base = evaluate_method(test, "nms", 0.5, candidates=cands).map
        learned = evaluate_method(test, "learned", dedup_params=ck.group("dedup"), dedup_cfg=dedup_cfg,
                                  candidates=cands).map
        print(f"{name:<10}{base:>9.4f}{learned:>9.4f}", flush=True)


if __name__ == "__main__":
    main()
