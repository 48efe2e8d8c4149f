"""Command-line entry point: ``ddunet <subcommand> ...``.

Failures print a single ``error: ClassName: message`` line to stderr and
exit with status 1 (2 for usage errors, as argparse does).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .config import TrainConfig
from .postprocess import postprocess
from .topology import count_parameters_spec, layer_table
from . import trainer


def _shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected DxHxW, got {text!r}")
    return tuple(int(p) for p in parts)


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for p in pairs or []:
        k, sep, v = p.partition("=")
        if not sep:
            raise ValueError(f"override {p!r} is not key=value")
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config, _overrides(args.set))
    path = trainer.train(cfg, resume=args.resume)
    print(path)
    return 0


def cmd_predict(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    out = Path(args.out)
    cases = D.list_cases(args.case)
    if not cases:
        raise D.MVOLError(f"no MVOL cases under {args.case}")
    for p in cases:
        case = D.read_case(p)
        labels, probs = trainer.predict(ckpt, case)
        dest = out / case.case_id if len(cases) > 1 or args.nested else out
        D.write_labels(dest, labels, case.case_id, case.spacing, probs if args.probs else None)
        print(dest)
    return 0


def cmd_evaluate(args) -> int:
    report = trainer.evaluate(args.pred, args.gt)
    text = report.to_tsv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_postprocess(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    cases = D.list_cases(args.inp)
    if not cases:
        raise D.MVOLError(f"no MVOL cases under {args.inp}")
    for p in cases:
        probs, header = D.read_probs(p)
        labels = postprocess(probs, **cfg.postprocess_kwargs())
        dest = Path(args.out) / p.name if len(cases) > 1 else Path(args.out)
        D.write_labels(dest, labels, header["case_id"], header["spacing"])
        print(dest)
    return 0


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    for i in range(args.n):
        seed = args.seed + i
        case = D.synth_case(seed, args.shape, kind=args.kind)
        D.write_case(out / case.case_id, case)
    print(f"wrote {args.n} cases to {out}")
    return 0


def cmd_count_params(args) -> int:
    cfg = TrainConfig.load(args.config)
    spec = cfg.topology
    if args.verbose:
        for layer in layer_table(spec):
            print(f"{layer.name}\t{layer.cin}\t{layer.cout}\t{layer.num_params}")
    print(count_parameters_spec(spec))
    return 0


def _grad_check_suite(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return T.Tensor(rng.standard_normal(shape), requires_grad=True)

    x = leaf(1, 2, 5, 5, 5)
    w = leaf(3, 2, 3, 3, 3)
    b = leaf(3)
    gamma, beta = leaf(2), leaf(2)
    uniq = T.Tensor(rng.permutation(64).reshape(1, 1, 4, 4, 4).astype(np.float64), requires_grad=True)
    cases = {
        "conv3d/input": (lambda z: T.conv3d(z, w, b, padding=1).sum(), x),
        "conv3d/weight": (lambda z: (T.conv3d(x, z, b, padding=1) ** 2).mean(), w),
        "conv3d/stride2": (lambda z: T.conv3d(z, T.Tensor(w.data[:, :, :2, :2, :2]), None, stride=2).sum(), x),
        "batch_norm3d/gamma": (
            lambda z: (T.batch_norm3d(x, z, beta, T.BatchNormState(2, dtype=np.float64), True) ** 3).sum(),
            gamma,
        ),
        "batch_norm3d/input": (
            lambda z: (T.batch_norm3d(z, gamma, beta, T.BatchNormState(2, dtype=np.float64), True) ** 3).sum(),
            x,
        ),
        "max_pool3d": (lambda z: T.max_pool3d(z, 2).sum(), uniq),
        "avg_pool3d": (lambda z: (T.avg_pool3d(z, 2) ** 2).sum(), uniq),
        "upsample_nearest3d": (lambda z: (T.upsample_nearest3d(z, 2) ** 2).sum(), x),
        "sigmoid": (lambda z: T.sigmoid(z).sum(), x),
        "leaky_relu": (lambda z: T.leaky_relu(z, 0.2).sum(), x),
    }
    return {name: T.grad_check(f, p, max_coords=40, seed=seed).max_rel_error for name, (f, p) in cases.items()}


def cmd_grad_check(args) -> int:
    results = _grad_check_suite(args.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name}\t{err:.3e}\t{'ok' if err < args.tol else 'FAIL'}")
        worst = max(worst, err)
    if worst >= args.tol:
        raise ArithmeticError(f"max relative error {worst:.3e} >= {args.tol:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddunet", description="Volumetric tumour segmentation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one case or a directory of cases")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probs", action="store_true", help="also store ET/TC/WT probabilities")
    p.add_argument("--nested", action="store_true", help="write into OUT/<case_id> even for one case")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predicted label maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("postprocess", help="turn stored probabilities into label maps")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="take postprocessing settings from this config")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("gen-synth", help="write synthetic phantom cases")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=_shape, default=(32, 32, 16))
    p.add_argument("--kind", choices=("hgg", "lgg"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("count-params", help="trainable parameter count of a config's network")
    p.add_argument("--config", required=True)
    p.add_argument("--verbose", action="store_true", help="print the per-layer table too")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference check of the differentiable ops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one machine-readable line, no traceback
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
