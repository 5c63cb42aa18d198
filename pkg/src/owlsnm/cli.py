"""Command-line entry point.

stdout carries only JSON lines or CSV; diagnostics go to stderr.  Exit codes:
0 success, 1 usage error, 2 runtime or validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from owlsnm import calibration, invariants
from owlsnm.dataset import make_synthetic, parse_xc, write_xc
from owlsnm.model import init_model, load_checkpoint, save_checkpoint
from owlsnm.owl import LossKind, theta_norms
from owlsnm.phi import PhiSpec
from owlsnm.snm import SnmConfig, induced_theta, theta_l2_bound, vartheta_from_strategy
from owlsnm.trainer import TrainConfig, compare_strategies, evaluate, read_config_items, train

log = logging.getLogger("owlsnm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(sorted({int(t) for t in text.split(",") if t.strip()}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not ks or ks[0] < 1:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def split_strategies(text: str) -> list[str]:
    """Split on commas, re-attaching bare numbers to a preceding ``custom:`` list."""
    out: list[str] = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if out and out[-1].startswith("custom:") and ":" not in tok:
            try:
                float(tok)
                out[-1] += "," + tok
                continue
            except ValueError:
                pass
        out.append(tok)
    return out


def _emit(rows) -> None:
    for r in rows:
        sys.stdout.write(json.dumps(r) + "\n")
    sys.stdout.flush()


def _data_paths(path: str, prefer: str) -> tuple[Path, Path | None]:
    """A directory holds ``train.txt`` and optionally ``test.txt``; a file stands alone."""
    p = Path(path)
    if p.is_dir():
        train_p, test_p = p / "train.txt", p / "test.txt"
        if prefer == "test" and test_p.exists():
            return test_p, None
        return train_p, test_p if test_p.exists() else None
    return p, None


def _load_config(args) -> TrainConfig:
    items = read_config_items(args.config) if args.config else {}
    for kv in args.set or []:
        key, sep, val = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        items[key.strip()] = val.strip()
    if args.seed is not None:
        items["seed"] = args.seed
    return TrainConfig.from_mapping(items)


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr, te = make_synthetic(args.K, args.d, args.n, args.noise, args.seed or 0)
    write_xc(tr, out / "train.txt")
    write_xc(te, out / "test.txt")
    _emit([{"train": str(out / "train.txt"), "test": str(out / "test.txt"),
            "n_train": tr.n_examples, "n_test": te.n_examples, "K": args.K, "d": args.d}])
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train_p, test_p = _data_paths(args.data, "train")
    tr = parse_xc(train_p)
    te = parse_xc(test_p) if test_p else None
    model = init_model(tr.n_features, cfg.e, tr.n_labels, seed=cfg.seed)
    log.info("training on %s: %d examples, K=%d", train_p, tr.n_examples, tr.n_labels)
    _, history = train(tr, model, cfg, eval_data=te)
    save_checkpoint(model, args.out)
    split = "test" if te is not None else "train"
    for snap in history:
        _emit(snap.report.rows(step=snap.step, epoch=snap.epoch, train_loss=snap.train_loss,
                               split=split, strategy=cfg.strategy))
    if args.figures and history:
        from owlsnm.reports import plot_history

        p = plot_history(history, Path(args.figures) / "history.png", k=min(cfg.eval_ks))
        log.info("wrote %s", p)
    return 0


def cmd_eval(args) -> int:
    path, _ = _data_paths(args.data, "test")
    ds = parse_xc(path)
    model = load_checkpoint(args.model)
    _emit(evaluate(model, ds, args.k, seed=args.seed or 0).rows(data=str(path)))
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    train_p, test_p = _data_paths(args.data, "train")
    tr = parse_xc(train_p)
    te = parse_xc(test_p) if test_p else tr
    base = 0 if args.seed is None else args.seed
    seeds = list(range(base, base + args.seeds))
    strategies = split_strategies(args.strategies)
    comp = compare_strategies(tr, te, cfg, strategies, seeds, ks=args.k, baseline=args.baseline)
    rows = comp.rows()
    for r in rows:
        r["baseline"] = comp.baseline
    _emit(rows)
    if args.figures:
        from owlsnm.reports import plot_comparison

        for metric in ("recall_ratio", "precision_ratio"):
            log.info("wrote %s", plot_comparison(rows, Path(args.figures) / f"compare_{metric}.png", metric))
    return 0


def cmd_inspect_theta(args) -> int:
    strategy = args.strategy
    if strategy == "topk":
        strategy = f"topk:{args.k}"
    w = vartheta_from_strategy(strategy, args.K, args.B, args.k)
    cfg = SnmConfig(args.B, w, k=min(args.k, args.B))
    theta = induced_theta(cfg, args.K)
    l1, l2 = theta_norms(theta)
    lines = ["index,weight"]
    lines += [f"{j},{t!r}" for j, t in enumerate(theta.tolist(), 1)]
    lines += [f"l1,{l1!r}", f"l2,{l2!r}", f"l2_bound,{theta_l2_bound(cfg, args.K)!r}"]
    sys.stdout.write("\n".join(lines) + "\n")
    if args.plot:
        from owlsnm.reports import plot_theta

        log.info("wrote %s", plot_theta(theta, args.plot, vartheta=w, title=f"{args.strategy}, K={args.K}, B={args.B}"))
    return 0


def cmd_verify_calibration(args) -> int:
    phi = PhiSpec.parse(args.phi if args.rho is None else f"{args.phi} rho={args.rho}")
    rng = np.random.default_rng(args.seed or 0)
    rep = calibration.calibration_sweep(args.kind, phi, None, args.k, args.trials, rng, K=args.K,
                                        grad_tol=args.grad_tol)
    out = {"kind": LossKind.coerce(args.kind).value, "phi": str(phi), "K": args.K, "k": args.k, **rep.as_dict()}
    _emit([out])
    return 0


def cmd_verify_invariants(args) -> int:
    results = invariants.run_suite(args.suite, args.seed or 0)
    _emit([r.as_dict() for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("failed checks: %s", ", ".join(failed))
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0 or the config's seed)")
    common.add_argument("--threads", type=int, default=1, help="worker cap; all work runs on one thread")
    common.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")

    p = _Parser(prog="owlsnm", description="Ordered weighted losses and stochastic negative mining.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic train/test split")
    s.add_argument("--K", type=int, required=True, help="number of classes")
    s.add_argument("--d", type=int, required=True, help="feature dimension")
    s.add_argument("--n", type=int, required=True, help="total examples before the 4:1 split")
    s.add_argument("--noise", type=float, default=0.3, help="noise-to-signal norm ratio")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    def training_flags(sp):
        sp.add_argument("--data", required=True, help="directory with train.txt/test.txt, or one data file")
        sp.add_argument("--config", help="file of key=value lines")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--figures", help="directory for PNG figures")

    t = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    training_flags(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="Recall@k and Precision@k of a checkpoint")
    e.add_argument("--model", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="data file, or a directory (uses test.txt)")
    e.add_argument("--k", type=_ks, default=(1, 3, 5), help="comma-separated k values")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", parents=[common], help="train every strategy per seed and compare")
    training_flags(c)
    c.add_argument("--strategies", required=True, help="e.g. topk:1,topk:16,negsample")
    c.add_argument("--seeds", type=int, default=5, help="number of seeds, counting up from --seed")
    c.add_argument("--k", type=_ks, default=(1, 3, 5), help="comma-separated k values")
    c.add_argument("--baseline", help="strategy the ratios divide by (default negsample)")
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("inspect-theta", parents=[common], help="induced weights as CSV")
    i.add_argument("--K", type=int, required=True)
    i.add_argument("--B", type=int, required=True)
    i.add_argument("--k", type=int, default=1)
    i.add_argument("--strategy", default="topk", help="topk[:k'], negsample, powerlaw:<alpha>, custom:<w1,...>")
    i.add_argument("--plot", help="PNG path for a plot of the weights")
    i.set_defaults(func=cmd_inspect_theta)

    v = sub.add_parser("verify-calibration", parents=[common], help="risk-minimiser agreement sweep (JSON)")
    v.add_argument("--K", type=int, default=5)
    v.add_argument("--k", type=int, default=2)
    v.add_argument("--kind", choices=[k.value for k in LossKind], default="powl")
    v.add_argument("--phi", default="logistic")
    v.add_argument("--rho", type=float, help="ramp width when --phi ramp")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--grad-tol", type=float, default=1e-8)
    v.set_defaults(func=cmd_verify_calibration)

    w = sub.add_parser("verify-invariants", parents=[common], help="run property suites (JSON lines)")
    w.add_argument("--suite", choices=["all", *invariants.SUITES], default="all")
    w.set_defaults(func=cmd_verify_invariants)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("--threads must be positive", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
