"""Command-line front end: ``mmlite <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .errors import MMLiteError

ENV_SEED = "MMLITE_SEED"


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(ENV_SEED)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise MMLiteError(f"{ENV_SEED}={env!r} is not an integer") from None


def _res(value: str) -> tuple:
    parts = value.lower().replace("x", ",").split(",")
    try:
        nums = tuple(int(p) for p in parts if p)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {value!r}") from None
    if len(nums) == 1:
        nums = nums * 2
    if len(nums) != 2:
        raise argparse.ArgumentTypeError(f"bad resolution {value!r}")
    return nums


# ---------------------------------------------------------------------------
# subcommands

def cmd_count(args) -> int:
    from .accounting import count_flops, count_params, ledger_csv, ledger_table, sharing_factors
    from .config import resolve_config

    cfg = resolve_config(args.config)
    params, flops = count_params(cfg), count_flops(cfg, args.res)
    ref = None
    if args.reference:
        ref = count_params(args.reference)
    if args.csv:
        sys.stdout.write(ledger_csv(params, flops, ref))
        return 0
    sys.stdout.write(ledger_table(params, flops, ref))
    for line in sharing_factors(cfg).lines():
        print(f"sharing: {line}")
    return 0


def cmd_flops(args) -> int:
    from .accounting import count_flops, ledger_csv, count_params, ROWS, LABELS
    from .config import resolve_config

    cfg = resolve_config(args.config)
    flops = count_flops(cfg, args.res)
    if args.csv:
        sys.stdout.write(ledger_csv(count_params(cfg), flops))
        return 0
    print(f"{cfg.name} @ {flops.resolution[0]}x{flops.resolution[1]} (1 MAC = 2 FLOPs)")
    print(f"{'Block':<14}{'MACs':>16}{'FLOPs':>16}")
    for row in ROWS:
        print(f"{LABELS[row]:<14}{flops[row].macs:>16,}{flops[row].flops:>16,}")
    for n in flops.notes:
        print(f"note: {n}")
    return 0


def cmd_fit(args) -> int:
    from .accounting import count_params, memory_fit, resolve_device

    dev = resolve_device(args.device)
    report = memory_fit(count_params(args.config), dev)
    print(report)
    for name, cap in dev.levels():
        mark = "<-" if name == report.level else ""
        print(f"  {name:<7}{cap:>16,} bytes {mark}")
    return 0


def cmd_synth(args) -> int:
    from .data import DatasetSpec, synth_dataset, write_dataset

    spec = DatasetSpec(num_classes=args.classes, samples_per_class=args.per_class, resolution=args.res,
                       channels=args.channels, seed=_seed(args), train_fraction=args.train_fraction)
    ds = synth_dataset(spec)
    write_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds.labels)} samples ({ds.n_train} train), {ds.num_classes} classes, "
          f"{ds.channels}x{ds.resolution[0]}x{ds.resolution[1]}")
    return 0


def _write_report(report, args) -> None:
    sys.stdout.write(report.to_text())
    if args.report_csv:
        with open(args.report_csv, "w") as fh:
            fh.write(report.to_csv())


def cmd_train(args) -> int:
    from .config import resolve_config
    from .data import read_dataset
    from .distill import train
    from .model import build_model

    seed = _seed(args)
    ds = read_dataset(args.data)
    model = build_model(resolve_config(args.config), seed=seed)
    report = train(model, ds, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=seed,
                   weight_decay=args.weight_decay, out=args.out)
    _write_report(report, args)
    return 0


def cmd_distill(args) -> int:
    from .data import read_dataset
    from .distill import distill_run

    ds = read_dataset(args.data)
    report, _ = distill_run(args.teacher, args.student_config, ds, alpha=args.alpha, T=args.temp,
                            epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=_seed(args),
                            weight_decay=args.weight_decay, out=args.out)
    _write_report(report, args)
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_dataset
    from .distill import evaluate

    model = load_checkpoint(args.ckpt)
    acc, loss = evaluate(model, read_dataset(args.data), args.split)
    print(f"split: {args.split}\naccuracy: {acc:.6f}\nmean_loss: {loss:.6f}")
    return 0


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .distill import predict_logits

    model = load_checkpoint(args.ckpt)
    try:
        x = np.load(args.input, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise MMLiteError(f"cannot read input tensor {args.input}: {exc}") from None
    if x.ndim == 3:
        x = x[None]
    logits = predict_logits(model, x.astype(model.dtype)).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    for i, p in enumerate(probs):
        print(f"sample {i}: class {int(p.argmax())} softmax [{', '.join(f'{v:.6f}' for v in p)}]")
    return 0


def cmd_bench(args) -> int:
    from .accounting import instrumented_macs
    from .config import resolve_config
    from .model import build_model, model_forward
    from .tensor import Tensor

    cfg = resolve_config(args.config)
    if args.res:
        cfg = cfg.replace(input_resolution=args.res)
    model = build_model(cfg, seed=_seed(args))
    macs = instrumented_macs(model).total
    rng = np.random.default_rng(_seed(args))
    x = Tensor(rng.standard_normal((args.batch, cfg.in_channels, *cfg.input_resolution)).astype(np.float32))
    model_forward(model, x)
    t0 = time.perf_counter()
    for _ in range(args.iters):
        model_forward(model, x)
    elapsed = time.perf_counter() - t0
    ips = args.batch * args.iters / elapsed
    print(f"model: {cfg.name} @ {cfg.input_resolution[0]}x{cfg.input_resolution[1]}, batch {args.batch}, "
          f"{args.iters} iters")
    print(f"throughput_inferences_per_s: {ips:.4f}")
    print(f"counted_macs_per_inference: {macs}")
    print(f"counted_flops_per_inference: {2 * macs}")
    print(f"derived_flops_per_s: {2 * macs * ips:.6g}")
    print("power: not measured\nenergy: not measured")
    print(f"threads: {_thread_count()}")
    return 0


def _thread_count() -> str:
    try:
        from threadpoolctl import threadpool_info
        blas = sum(p.get("num_threads", 0) for p in threadpool_info() if p.get("user_api") == "blas")
    except Exception:  # threadpoolctl missing or failing
        blas = 0
    return f"1 python thread, {blas or 'unknown'} BLAS threads"


def cmd_gradcheck(args) -> int:
    from .checks import GRADCHECK_CASES, run_gradcheck

    names = list(GRADCHECK_CASES) if args.all or not args.op else [args.op]
    unknown = [n for n in names if n not in GRADCHECK_CASES]
    if unknown:
        raise MMLiteError(f"unknown op {unknown[0]!r}; known: {', '.join(GRADCHECK_CASES)}")
    ok = True
    for name in names:
        rep, tol = run_gradcheck(name, seed=_seed(args))
        ok &= rep.passed
        print(f"{name:<28} {rep} (tol {tol:g})")
    return 0 if ok else 1


def cmd_selftest(args) -> int:
    from .checks import selftest

    return 0 if selftest() else 1


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmlite", description="Lite conv/state-space image classifiers: "
                                "counting, training, distillation and inference.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def seed(sp):
        sp.add_argument("--seed", type=int, default=None, help=f"RNG seed (falls back to ${ENV_SEED}, then 0)")

    sp = add("count", cmd_count, "parameter/size/FLOP ledger")
    sp.add_argument("--config", required=True, help="preset name or key=value config file")
    sp.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    sp.add_argument("--reference", help="config to compute savings against")
    sp.add_argument("--res", type=_res, default=None, help="resolution for the FLOPs column")

    sp = add("flops", cmd_flops, "FLOP ledger at a resolution")
    sp.add_argument("--config", required=True)
    sp.add_argument("--res", type=_res, default=(224, 224))
    sp.add_argument("--csv", action="store_true")

    sp = add("fit", cmd_fit, "smallest memory level holding the f32 weights")
    sp.add_argument("--config", required=True)
    sp.add_argument("--device", required=True, help="orin-nano, rpi5 or a key=value profile file")

    sp = add("synth", cmd_synth, "write a synthetic dataset file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=8)
    sp.add_argument("--per-class", type=int, default=96)
    sp.add_argument("--res", type=_res, default=(32, 32))
    sp.add_argument("--channels", type=int, default=3)
    sp.add_argument("--train-fraction", type=float, default=2 / 3)
    seed(sp)

    def train_flags(sp):
        sp.add_argument("--data", required=True, help="dataset file")
        sp.add_argument("--epochs", type=int, default=10)
        sp.add_argument("--lr", type=float, default=0.05)
        sp.add_argument("--batch-size", type=int, default=32)
        sp.add_argument("--weight-decay", type=float, default=1e-4)
        sp.add_argument("--out", help="checkpoint path")
        sp.add_argument("--report-csv", help="write per-epoch metrics as CSV")
        seed(sp)

    sp = add("train", cmd_train, "supervised training")
    sp.add_argument("--config", required=True)
    train_flags(sp)

    sp = add("distill", cmd_distill, "train a student against a frozen teacher checkpoint")
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--student-config", required=True)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--temp", type=float, default=4.0)
    train_flags(sp)

    sp = add("eval", cmd_eval, "accuracy and loss of a checkpoint on a dataset split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "val", "all"), default="val")

    sp = add("infer", cmd_infer, "classify images stored in a .npy file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True, help=".npy array [C,H,W] or [N,C,H,W]")

    sp = add("bench", cmd_bench, "inference throughput and counted FLOPs")
    sp.add_argument("--config", required=True)
    sp.add_argument("--res", type=_res, default=None)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--iters", type=int, default=3)
    seed(sp)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    sp.add_argument("--op", help="single case name")
    sp.add_argument("--all", action="store_true")
    seed(sp)

    add("selftest", cmd_selftest, "run the oracle and invariant suite")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (MMLiteError, OSError) as exc:
        print(f"mmlite {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
