"""Command line entry point: ``relnet {gen,train,eval,cost,gradcheck,inspect}``.

Config files are JSON. Explicit flags override values from ``--config``;
within a file, later keys win. Every output gets a ``<output>.manifest.json``
next to it recording the subcommand, resolved config, seed and paths.

``RELNET_THREADS`` caps BLAS threads (0 = library default). It only takes
effect if set before numpy is first imported, which holds for the
``relnet`` console script and ``python -m relnet``.
"""

from __future__ import annotations

import os

_threads = os.environ.get("RELNET_THREADS", "0")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import autodiff as ad  # noqa: E402
from .autodiff import Node  # noqa: E402
from .dedup import DedupConfig, rank_embed, select_survivors  # noqa: E402
from .gradsuite import MODULES, run_checks  # noqa: E402
from .head import HeadConfig, linear, sub_params  # noqa: E402
from .pipeline import METHODS, NMS_SWEEP, SOFTNMS_SWEEP, evaluate_method, format_table, scene_candidates, sweep  # noqa: E402
from .relation import cost_formula, dump_relation_pairs, top_relation_pairs  # noqa: E402
from .synthgen import GenConfig, generate, read_scenes, write_scenes  # noqa: E402
from .trainer import (  # noqa: E402
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_dedup,
    train_end_to_end,
    train_head,
)

log = logging.getLogger("relnet")


class UsageError(Exception):
    """Bad flags or flag combination; exit code 2."""


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, output: Path) -> Path:
        path = output.with_name(output.name + ".manifest.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be an object")
    return data


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    cfg = GenConfig.from_dict(_override(_load_json(args.config), seed=args.seed, num_scenes=args.num_scenes))
    out = Path(args.out)
    write_scenes(generate(cfg), out)
    RunManifest("gen", cfg.to_dict(), cfg.seed, outputs={"scenes": str(out)}).write(out)
    print(f"wrote {cfg.num_scenes} scenes to {out}")
    return 0


def _model_configs(raw: dict, d_feat: int | None = None) -> tuple[HeadConfig, DedupConfig]:
    head = HeadConfig.from_dict(raw["head"]) if "head" in raw else HeadConfig(d_in=d_feat or HeadConfig().d_in)
    if "dedup" in raw:
        dedup = DedupConfig.from_dict(raw["dedup"])
    else:
        dedup = DedupConfig(d_feat=d_feat or DedupConfig().d_feat)
    return head, dedup


def _smoothed(losses, window: int) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(losses):
        acc += v
        if i >= window:
            acc -= losses[i - window]
        out.append(acc / min(i + 1, window))
    return out


def cmd_train(args) -> int:
    raw = _load_json(args.config)
    unknown = set(raw) - {"train", "head", "dedup"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    tcfg = TrainConfig.from_dict(_override(raw.get("train", {}), iterations=args.iterations, seed=args.seed,
                                           lr=args.lr, dedup_weight=args.dedup_weight))
    scenes = read_scenes(args.data)
    if not scenes:
        raise ValueError(f"{args.data}: no scenes to train on")
    d_in = scenes[0].det_feats.shape[1]
    head_cfg, dedup_cfg = _model_configs(raw, d_in)
    init = load_checkpoint(args.resume) if args.resume else None
    inputs = {"data": str(args.data)}

    if args.mode == "head":
        ckpt = train_head(scenes, head_cfg, tcfg, init=init, stop_at=args.stop_at)
    elif args.mode == "dedup":
        head = None
        if args.head_ckpt:
            head = load_checkpoint(args.head_ckpt)
            head_cfg = HeadConfig.from_dict(head.config["head"])
            inputs["head_ckpt"] = str(args.head_ckpt)
            if "dedup" not in raw:
                dedup_cfg = DedupConfig(d_feat=head_cfg.d_hidden)
        ckpt = train_dedup(scenes, dedup_cfg, tcfg, head=head, head_cfg=head_cfg, init=init, stop_at=args.stop_at)
    else:
        if "dedup" not in raw:
            dedup_cfg = DedupConfig(d_feat=head_cfg.d_hidden)
        ckpt = train_end_to_end(scenes, head_cfg, dedup_cfg, tcfg, init=init, stop_at=args.stop_at)

    out = Path(args.out)
    save_checkpoint(ckpt, out)
    window = max(1, min(tcfg.log_every or 100, len(ckpt.losses) or 1))
    loss_log = out.with_name(out.name + ".loss.jsonl")
    smooth = _smoothed(ckpt.losses, window)
    with loss_log.open("w") as fh:
        for i in range(window - 1, len(ckpt.losses), window):
            fh.write(json.dumps({"iteration": i + 1, "loss": ckpt.losses[i], "smoothed": smooth[i]}) + "\n")
    RunManifest("train", ckpt.config, tcfg.seed, inputs=inputs,
                outputs={"checkpoint": str(out), "loss_log": str(loss_log)}).write(out)
    first = float(np.mean(ckpt.losses[:window])) if ckpt.losses else float("nan")
    last = float(np.mean(ckpt.losses[-window:])) if ckpt.losses else float("nan")
    print(f"{args.mode}: {ckpt.iteration} iterations, loss {first:.5f} -> {last:.5f}; saved {out}")
    return 0


def _models_from_ckpt(path):
    """(head tuple or None, dedup params or None, dedup config or None)."""
    ckpt = load_checkpoint(path)
    head = None
    if ckpt.group("head") and "head" in ckpt.config:
        head = (ckpt.group("head"), HeadConfig.from_dict(ckpt.config["head"]))
    dedup_params = ckpt.group("dedup") or None
    dedup_cfg = DedupConfig.from_dict(ckpt.config["dedup"]) if dedup_params else None
    return head, dedup_params, dedup_cfg


def cmd_eval(args) -> int:
    scenes = read_scenes(args.data)
    head, dedup_params, dedup_cfg = (None, None, None)
    if args.ckpt:
        head, dedup_params, dedup_cfg = _models_from_ckpt(args.ckpt)
    if args.dedup == "learned" and dedup_params is None:
        raise UsageError("--dedup learned needs --ckpt with dedup parameters")
    if args.dedup == "learned" and args.no_prune:
        dedup_cfg = DedupConfig.from_dict({**dedup_cfg.to_dict(), "prune_threshold": None})
    out = Path(args.out) if args.out else None
    cands = scene_candidates(scenes, head)
    manifest_cfg = {"dedup": args.dedup, "params": args.param, "sweep": args.sweep, "prune": not args.no_prune}

    if args.sweep:
        rows = sweep(scenes, args.param or NMS_SWEEP, args.param or SOFTNMS_SWEEP, dedup_params=dedup_params,
                     dedup_cfg=dedup_cfg, candidates=cands)
        table = format_table(rows)
        print(table)
        if out:
            out.write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")
            RunManifest("eval", manifest_cfg, None, inputs={"data": args.data, "ckpt": args.ckpt},
                        outputs={"table": str(out)}).write(out)
        return 0

    params = args.param or [None]
    if args.dedup in ("learned", "none", "oracle") and args.param:
        raise UsageError(f"--param has no meaning for --dedup {args.dedup}")
    reports = []
    for p in params:
        rep = evaluate_method(scenes, args.dedup, p, dedup_params=dedup_params, dedup_cfg=dedup_cfg,
                              candidates=cands)
        reports.append((p, rep))
        label = "" if p is None else f" param={p:g}"
        print(f"{args.dedup}{label}: mAP {rep.map:.4f}  mAP50 {rep.map50:.4f}  mAP75 {rep.map75:.4f}")
    if out:
        outputs = {}
        for p, rep in reports:
            path = out if len(reports) == 1 else out.with_name(f"{out.stem}.{args.dedup}_{p:g}{out.suffix}")
            path.write_text(rep.to_json() + "\n")
            outputs[str(p)] = str(path)
        RunManifest("eval", manifest_cfg, None, inputs={"data": args.data, "ckpt": args.ckpt}, outputs=outputs).write(out)
    return 0


def cmd_cost(args) -> int:
    params, flops = cost_formula(args.nr, args.dk, args.dg, args.df, args.n)
    print(f"params {params:,}")
    print(f"flops  {flops:,}  (N={args.n})")
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_checks(args.module, seed=args.seed, tolerance=args.tolerance, max_coords=args.max_coords)
    ok = True
    for name, rep in reports.items():
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'}  {name:<24} max rel err {rep.max_rel_error:.2e}")
        if args.verbose or args.module != "all":
            for pname, err in rep.per_param.items():
                print(f"        {pname:<20} {err:.2e}")
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scenes = read_scenes(args.data)
    if not 0 <= args.scene < len(scenes):
        raise UsageError(f"--scene {args.scene} out of range (0..{len(scenes) - 1})")
    scene = scenes[args.scene]
    lines = []
    if args.topk > 0:
        lines = _inspect_lines(ckpt, scene, args)
    text = "".join(line + "\n" for line in lines)
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        RunManifest("inspect", {"topk": args.topk, "scene": args.scene, "cls": args.cls}, None,
                    inputs={"ckpt": args.ckpt, "data": args.data}, outputs={"dump": str(out)}).write(out)
    else:
        sys.stdout.write(text)
    return 0


def _inspect_lines(ckpt, scene, args) -> list[str]:
    if ckpt.group("head") and "head" in ckpt.config:
        cfg = HeadConfig.from_dict(ckpt.config["head"])
        if cfg.r1 == 0:
            raise ValueError("checkpoint head has no relation module after fc1 to inspect")
        p = {k: Node(v) for k, v in ckpt.group("head").items()}
        h = ad.relu(linear(scene.det_feats, p, "fc1"))
        pairs = top_relation_pairs(h, scene.det_boxes, sub_params(p, "rm1.0."), cfg.relation, args.topk)
        return dump_relation_pairs(pairs, scene.det_boxes, module="head/rm1.0", scene=scene.scene_id)
    if not ckpt.group("dedup"):
        raise ValueError("checkpoint holds no relation module")
    cfg = DedupConfig.from_dict(ckpt.config["dedup"])
    p = {k: Node(v) for k, v in ckpt.group("dedup").items()}
    idx = np.nonzero(scene.det_classes == args.cls)[0]
    idx = idx[select_survivors(scene.det_scores[idx], cfg)]
    if idx.size == 0:
        return []
    ranks = rank_embed(scene.det_scores[idx], cfg.rank_dim, cfg.wave_base)
    fused = ad.matmul(scene.det_feats[idx], ad.transpose(p["W_f"])) + ad.matmul(ranks, ad.transpose(p["W_fR"]))
    pairs = top_relation_pairs(fused, scene.det_boxes[idx], sub_params(p, "rm."), cfg.relation, args.topk)
    # report indices into the scene's detection list
    pairs = [pr._replace(n=int(idx[pr.n]), m=int(idx[pr.m])) for pr in pairs]
    return dump_relation_pairs(pairs, scene.det_boxes, module="dedup/rm", scene=scene.scene_id, cls=args.cls)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relnet", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"relnet {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--config", help="JSON file with generator fields")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--num-scenes", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train head, dedup network, or both jointly")
    t.add_argument("--mode", required=True, choices=("head", "dedup", "e2e"))
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file with optional sections train, head, dedup")
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--dedup-weight", type=float)
    t.add_argument("--head-ckpt", help="dedup mode: train on this frozen head's outputs")
    t.add_argument("--resume", help="continue from a checkpoint of the same mode")
    t.add_argument("--stop-at", type=int, help="stop after this iteration (schedule unchanged)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a duplicate removal method")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--dedup", choices=METHODS, default="nms")
    e.add_argument("--param", type=float, action="append", help="N_t or sigma; repeat to sweep")
    e.add_argument("--sweep", action="store_true", help="NMS and SoftNMS grids plus learned, as a table")
    e.add_argument("--no-prune", action="store_true", help="learned: score every detection")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cost", help="parameter and FLOP count of one relation module")
    c.add_argument("--n", type=int, default=300)
    c.add_argument("--nr", type=int, default=16)
    c.add_argument("--dk", type=int, default=64)
    c.add_argument("--dg", type=int, default=64)
    c.add_argument("--df", type=int, default=1024)
    c.set_defaults(func=cmd_cost)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--module", choices=MODULES + ("all",), default="all")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--max-coords", type=int, default=24, help="coordinates sampled per tensor")
    gc.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="dump the strongest relation weights")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--topk", type=int, default=10)
    i.add_argument("--scene", type=int, default=0)
    i.add_argument("--cls", type=int, default=0, help="dedup checkpoints: class to inspect")
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "topk", 0) is not None and getattr(args, "topk", 0) < 0:
        parser.error("--topk must be >= 0")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"relnet: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"relnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
