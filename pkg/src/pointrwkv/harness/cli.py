"""Command-line front door.

Every subcommand exits 0 on success. Failures print a single line
``error: <Kind>: <message>`` to stderr and exit nonzero (2 for bad
configuration or arguments, 1 otherwise).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from ..mixing import ConfigError
from ..numerics import CheckpointError, load_module, precision
from ..pointops import radius_graph_bruteforce, radius_graph_celllist, read_points


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="INI file with [model]/[train]/[data] sections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread cap")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pointrwkv", description="Desk-scale point-cloud RWKV toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining; writes loss.csv")
    _common(p)

    p = sub.add_parser("train-cls", help="classification training; writes acc.csv")
    _common(p)
    p.add_argument("--init", type=Path, default=None, help="pretrained checkpoint for the encoder")

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("bench-scaling", help="linear vs quadratic mixing cost; writes scaling.csv")
    _common(p)
    p.add_argument("--lengths", default="256,512,1024,2048,4096")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--reps", type=int, default=3)

    p = sub.add_parser("graph-check", help="cell-list radius graph against the brute-force oracle")
    _common(p)
    p.add_argument("--input", type=Path, required=True, help="text (x y z per line) or PCB1 binary cloud")
    p.add_argument("--radius", type=float, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    _common(p)
    p.add_argument("--coords", type=int, default=3, help="sampled coordinates per parameter tensor")
    p.add_argument("--directional", action="store_true", help="one random direction per tensor instead of coordinates")
    p.add_argument("--tol", type=float, default=1e-4)
    return ap


def _load(args, base):
    from .config import load_config

    return load_config(args.config, base=base)


def cmd_pretrain(args) -> int:
    from .config import pretrain_defaults
    from .train import pretrain

    cfg = _load(args, pretrain_defaults())
    res = pretrain(cfg, seed=args.seed, out=args.out)
    print(f"pretrain epochs={len(res.losses)} first_loss={res.losses[0]:.6g} last_loss={res.losses[-1]:.6g} "
          f"params={res.model.num_parameters()} checkpoint={res.checkpoint}")
    return 0


def cmd_train_cls(args) -> int:
    from .config import cls_defaults
    from .train import train_cls

    cfg = _load(args, cls_defaults())
    res = train_cls(cfg, init_checkpoint=args.init, seed=args.seed, out=args.out)
    print(f"train-cls epochs={len(res.train_acc)} train_acc={res.train_acc[-1]:.4f} "
          f"test_acc={res.test_acc[-1]:.4f} epochs_to_target={res.epochs_to_target} "
          f"params={res.model.num_parameters()}")
    return 0


def cmd_eval(args) -> int:
    from .config import cls_defaults
    from .train import evaluate, make_dataset
    from ..model import PointRWKV

    cfg = _load(args, cls_defaults())
    data = make_dataset(cfg)
    mc = replace(cfg.model, num_classes=data.num_classes)
    with precision(cfg.train.precision):
        model = PointRWKV(mc, seed=args.seed)
        load_module(args.checkpoint, model)
        acc = evaluate(model, data, train=args.split == "train", batch_size=cfg.train.eval_batch)
    print(f"eval split={args.split} accuracy={acc:.4f}")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_scaling

    ts = [int(t) for t in args.lengths.split(",") if t.strip()]
    args.out.mkdir(parents=True, exist_ok=True)
    recs = bench_scaling(ts, c=args.width, h=args.heads, reps=args.reps, seed=args.seed, out=args.out / "scaling.csv")
    for r in recs:
        print(f"T={r.t} flops_linear={r.flops_linear} flops_quadratic={r.flops_quadratic} "
              f"time_linear_ms={r.time_linear_ms:.3f} time_quadratic_ms={r.time_quadratic_ms:.3f}")
    return 0


def cmd_graph_check(args) -> int:
    pc = read_points(args.input)
    fast = radius_graph_celllist(pc, args.radius)
    ref = radius_graph_bruteforce(pc, args.radius)
    ok = fast.edge_set() == ref.edge_set()
    print(f"graph-check points={len(pc)} edges={fast.n_edges} candidates={fast.candidates} "
          f"oracle={'match' if ok else 'mismatch'}")
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    from .checks import model_gradcheck

    errs = model_gradcheck(seed=args.seed, max_coords=args.coords, directional=args.directional)
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= args.tol
    print(f"gradcheck tensors={len(errs)} max_rel_err={errs[worst]:.3e} worst={worst} "
          f"tol={args.tol:g} result={'pass' if ok else 'fail'}")
    return 0 if ok else 1


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-cls": cmd_train_cls,
    "eval": cmd_eval,
    "bench-scaling": cmd_bench,
    "graph-check": cmd_graph_check,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        return _fail("ArgumentError", "--threads must be >= 1", 2)
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        return _fail(type(exc).__name__, exc, 2)
    except (OSError, ValueError, RuntimeError) as exc:
        return _fail(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
