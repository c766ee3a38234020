"""Command-line interface.

Subcommands: gen-data, train, lower, infer, verify, energy, range-report,
grad-report.  Every command writes ``resolved_config.json`` next to its
outputs.

Settings resolve in three layers: built-in defaults, then command-line
flags, then a JSON config file (``--config`` or the ``IBRASNN_CONFIG``
environment variable), which wins.  The config is a flat object keyed by
option name (``"lr"``, ``"D"``, ...); an object under a subcommand name
(``{"train": {...}}``) applies to that command only and takes precedence
over the flat keys.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 non-finite
numbers.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as datasets
from .checkpoint import load_checkpoint, save_checkpoint
from .diagnostics import (grad_report_csv, gradient_scaling_probe, nonfinite_events, paired_range_runs,
                          range_coverage, standardize)
from .energy import EXCLUSIONS, EnergyModel, compare_modes, count_ops, format_table, price
from .errors import IbraError, NonFiniteError, VerificationError
from .lowering import LoweredGraph, lower_graph, verify_equivalence
from .network import LayerGraph, cnn, evaluate, make_activation, mlp, train_epoch
from .optim import SGD, Adam

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_ENV = "IBRASNN_CONFIG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# argument groups ------------------------------------------------------------

def _data_args(p):
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--generator", choices=datasets.GENERATORS, help="generate data in memory instead of --data")
    p.add_argument("--n", type=int, default=600, help="samples for --generator")
    p.add_argument("--data-seed", type=int, default=0, help="seed for --generator")


def _model_args(p):
    p.add_argument("--arch", choices=("mlp", "cnn"), default="mlp")
    p.add_argument("--neuron", choices=("ibra", "ilif", "lif", "relu", "clip"), default="ibra")
    p.add_argument("--D", type=float, default=5.11)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--T", type=int, default=1)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--v-th", type=float, default=1.0)
    p.add_argument("--hidden", type=int, nargs="+", default=[64, 64])
    p.add_argument("--channels", type=int, nargs="+", default=[8, 16])
    p.add_argument("--encoding", choices=("direct", "spike"), default="direct")
    p.add_argument("--no-batchnorm", action="store_true")


def _train_args(p):
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ibrasnn", description="IBRA-LIF spiking network engine")
    ap.add_argument("--version", action="version", version=f"ibrasnn {__version__}")
    ap.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as IBRT files")
    p.add_argument("--generator", choices=datasets.GENERATORS, required=True)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--k", type=int, default=2, help="clusters for blobs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a network and save a checkpoint")
    _data_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("lower", help="lower a trained checkpoint and verify equivalence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--precision", choices=("real32", "real64"), default="real64")
    _data_args(p)

    p = sub.add_parser("infer", help="predict with a trained or lowered checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _data_args(p)

    p = sub.add_parser("verify", help="compare a trained and a lowered checkpoint")
    p.add_argument("--trained", required=True)
    p.add_argument("--lowered", required=True)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out", required=True)
    _data_args(p)

    p = sub.add_parser("energy", help="count synaptic operations and price them")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--lowered", help="lowered checkpoint (lowered on the fly if omitted)")
    p.add_argument("--e-mac", type=float, default=4.6, help="pJ per MAC")
    p.add_argument("--e-ac", type=float, default=0.9, help="pJ per AC")
    p.add_argument("--lif-timesteps", type=int, default=4)
    p.add_argument("--out", required=True)
    _data_args(p)

    p = sub.add_parser("range-report", help="activation-range coverage with and without range alignment")
    p.add_argument("--checkpoint", nargs="*", default=[], help="report on these checkpoints instead of training")
    p.add_argument("--D", type=float, default=15.0, help="integer ceiling D_N shared by the paired runs")
    p.add_argument("--N", type=int, default=100, help="scaling factor of the range-aligned run")
    p.add_argument("--arch", choices=("auto", "mlp", "cnn"), default="auto")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_args(p)

    p = sub.add_parser("grad-report", help="per-layer gradient magnitude timeline of a training run")
    _data_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--probe-dn", type=int, default=15, help="D_N for the forced-activation probe")
    p.add_argument("--out", required=True)
    return ap


# config resolution ----------------------------------------------------------------

def _subparser(ap, command):
    for action in ap._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _all_dests(ap) -> set[str]:
    dests = set()
    for action in ap._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                dests |= {a.dest for a in sp._actions}
    return dests


def resolve(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        return args
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    sp = _subparser(ap, args.command)
    known = {a.dest: a for a in sp._actions}
    commands = {c for a in ap._actions if isinstance(a, argparse._SubParsersAction) for c in a.choices}
    every = _all_dests(ap)
    flat = {k: v for k, v in cfg.items() if k not in commands}
    scoped = cfg.get(args.command, {})
    for scope in (flat, scoped):
        for key, value in scope.items():
            dest = key.replace("-", "_")
            if dest not in every:
                raise UsageError(f"unknown config key {key!r}")
            if dest in known and dest not in ("help", "command"):
                action = known[dest]
                if action.choices is not None and value not in action.choices:
                    raise UsageError(f"config {key}={value!r} not in {sorted(action.choices)}")
                setattr(args, dest, value)
    return args


def _dump_config(out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    d = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    (out / "resolved_config.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# helpers ------------------------------------------------------------------------------

def _load_data(args):
    if args.data:
        x, y = datasets.load_dataset(args.data)
    elif args.generator:
        x, y = datasets.generate(args.generator, args.n, seed=args.data_seed)
    else:
        raise UsageError("give --data or --generator")
    return x, y


def _fit_input(x: np.ndarray, input_shape: tuple) -> np.ndarray:
    if tuple(x.shape[1:]) == tuple(input_shape):
        return x
    if int(np.prod(x.shape[1:])) == int(np.prod(input_shape)):
        return x.reshape((len(x),) + tuple(input_shape))
    raise UsageError(f"data samples of shape {x.shape[1:]} do not fit model input {tuple(input_shape)}")


def _build_model(args, x, y) -> LayerGraph:
    classes = int(y.max()) + 1 if len(y) else 2
    act = lambda: make_activation(args.neuron, D=args.D, N=args.N if args.neuron == "ibra" else 1,  # noqa: E731
                                  T_steps=args.T, alpha=args.alpha, v_th=args.v_th)
    if args.arch == "cnn":
        if x.ndim != 4:
            raise UsageError(f"cnn needs image data [n, C, H, W], got shape {x.shape}")
        return cnn(x.shape[1:], classes, channels=tuple(args.channels), act=act, seed=args.seed,
                   encoding=args.encoding)
    g = mlp(int(np.prod(x.shape[1:])), classes, hidden=tuple(args.hidden), act=act, seed=args.seed,
            batchnorm=not args.no_batchnorm)
    g.encoding = args.encoding
    return g


def _optimizer(args):
    if args.optimizer == "sgd":
        return SGD(args.lr, momentum=args.momentum)
    return Adam(args.lr)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _train(args, out: Path):
    x, y = _load_data(args)
    if len(x) == 0:
        raise UsageError("training set is empty")
    g = _build_model(args, x, y)
    x = _fit_input(x, g.input_shape)
    xtr, ytr, xte, yte = datasets.split(x, y, args.test_fraction, seed=args.seed)
    opt = _optimizer(args)
    rng = np.random.default_rng(args.seed)
    history, rows = [], []
    for ep in range(args.epochs):
        m = train_epoch(g, xtr, ytr, opt, rng, args.batch_size)
        history.append(m)
        test_acc = evaluate(g, xte, yte) if len(xte) else float("nan")
        rows.append([ep, _fmt(m["loss"]), _fmt(m["accuracy"]), _fmt(test_acc),
                     _fmt(max(m["grad_max"].values(), default=0.0))])
        print(f"epoch {ep:3d}  loss {m['loss']:.4f}  train acc {m['accuracy']:.4f}  test acc {test_acc:.4f}")
    metrics = _csv(["epoch", "loss", "train_accuracy", "test_accuracy", "grad_max"], rows)
    return g, history, metrics, (xtr, ytr, xte, yte)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8")


def _load_training(path) -> LayerGraph:
    g = load_checkpoint(path)
    if not isinstance(g, LayerGraph):
        raise UsageError(f"{path} is not a training-mode checkpoint")
    return g


# commands -------------------------------------------------------------------------------

def cmd_gen_data(args, out: Path) -> int:
    kw = {"k": args.k} if args.generator == "blobs" else {}
    x, y = datasets.generate(args.generator, args.n, seed=args.seed, **kw)
    datasets.save_dataset(out, x, y)
    counts = np.bincount(y, minlength=1) if len(y) else np.zeros(0, dtype=np.int64)
    print(f"{args.generator}: {len(x)} samples, features {tuple(x.shape[1:])}, class counts {counts.tolist()}")
    return EXIT_OK


def cmd_train(args, out: Path) -> int:
    g, history, metrics, split = _train(args, out)
    save_checkpoint(g, out / "checkpoint")
    _write(out, "metrics.csv", metrics)
    _write(out, "grad_report.csv", grad_report_csv(history))
    datasets.save_dataset(out / "heldout", split[2], split[3])
    return EXIT_OK


def _report_equivalence(out: Path, rep) -> None:
    rows = [[k, _fmt(v)] for k, v in sorted(rep.layer_rel_diff.items())]
    _write(out, "equivalence.csv", _csv(["layer", "max_rel_diff"], rows))
    _write(out, "equivalence.txt", rep.summary() + "\n")
    print(rep.summary())


def cmd_lower(args, out: Path) -> int:
    g = _load_training(args.checkpoint)
    low = lower_graph(g, precision=args.precision)
    if args.data or args.generator:
        corpus, _ = _load_data(args)
    elif (Path(args.checkpoint).parent / "heldout").exists():
        corpus, _ = datasets.load_dataset(Path(args.checkpoint).parent / "heldout")
    else:
        raise UsageError("no verification corpus: give --data or --generator")
    corpus = _fit_input(corpus, g.input_shape)
    save_checkpoint(low, out / "checkpoint")
    rep = verify_equivalence(g, low, corpus, tol=args.tol)
    _report_equivalence(out, rep)
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_verify(args, out: Path) -> int:
    g = _load_training(args.trained)
    low = load_checkpoint(args.lowered)
    if not isinstance(low, LoweredGraph):
        raise UsageError(f"{args.lowered} is not a lowered checkpoint")
    x, _ = _load_data(args)
    rep = verify_equivalence(g, low, _fit_input(x, g.input_shape), tol=args.tol)
    _report_equivalence(out, rep)
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_infer(args, out: Path) -> int:
    g = load_checkpoint(args.checkpoint)
    x, y = _load_data(args)
    x = _fit_input(x, g.input_shape)
    pred = g.predict(x)
    rows = [[i, int(p), int(t)] for i, (p, t) in enumerate(zip(pred, y))]
    _write(out, "predictions.csv", _csv(["index", "prediction", "label"], rows))
    acc = float(np.mean(pred == y)) if len(y) else float("nan")
    _write(out, "summary.txt", f"mode {g.mode}\nsamples {len(y)}\naccuracy {acc:.6f}\n")
    print(f"{g.mode} checkpoint: accuracy {acc:.4f} on {len(y)} samples")
    return EXIT_OK


def cmd_energy(args, out: Path) -> int:
    g = _load_training(args.checkpoint)
    low = load_checkpoint(args.lowered) if args.lowered else lower_graph(g)
    if not isinstance(low, LoweredGraph):
        raise UsageError(f"{args.lowered} is not a lowered checkpoint")
    x, _ = _load_data(args)
    x = _fit_input(x, g.input_shape)
    model = EnergyModel(args.e_mac, args.e_ac)
    rows = compare_modes(g, low, x, model, lif_timesteps=args.lif_timesteps)
    table = format_table(rows)
    _write(out, "energy.txt", table)
    keys = ["mode", "macs", "acs", "energy_mj", "energy_mj_per_sample", "ratio_vs_ann"]
    _write(out, "energy_modes.csv", _csv(keys, [[r["mode"], r["macs"], r["acs"], _fmt(r["energy_mj"]),
                                                  _fmt(r["energy_mj_per_sample"]), _fmt(r["ratio_vs_ann"])]
                                                 for r in rows]))
    _write(out, "energy_layers.csv", f"# {EXCLUSIONS}\n" + price(count_ops(low, x), model).to_csv())
    print(table, end="")
    return EXIT_OK


def cmd_range_report(args, out: Path) -> int:
    x, y = _load_data(args)
    reports = []
    if args.checkpoint:
        xs, _ = standardize(x)
        for path in args.checkpoint:
            g = _load_training(path)
            reports.append(range_coverage(g, _fit_input(xs, g.input_shape), label=Path(path).name))
    else:
        without, with_ra, _ = paired_range_runs(x, y, D=args.D, N=args.N, epochs=args.epochs, lr=args.lr,
                                                seed=args.seed, arch=args.arch)
        reports = [without, with_ra]
    summary = reports[0].summary_csv() + "".join(r.summary_csv().split("\n", 1)[1] for r in reports[1:])
    hist = reports[0].histogram_csv() + "".join(r.histogram_csv().split("\n", 1)[1] for r in reports[1:])
    text = "".join(r.text() for r in reports)
    text += "input normalization: per-feature z-score over the dataset\n"
    if len(reports) == 2 and not args.checkpoint:
        a, b = reports[0].mean_coverage(), reports[1].mean_coverage()
        text += f"mean coverage without RA {a:.4f}, with RA {b:.4f}; RA >= non-RA: {b >= a}\n"
    _write(out, "range_summary.csv", summary)
    _write(out, "range_histograms.csv", hist)
    _write(out, "range_report.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_grad_report(args, out: Path) -> int:
    _, history, metrics, _ = _train(args, out)
    _write(out, "metrics.csv", metrics)
    _write(out, "grad_report.csv", grad_report_csv(history))
    probe = gradient_scaling_probe(args.probe_dn)
    _write(out, "grad_probe.csv", _csv(list(probe), [[_fmt(v) if isinstance(v, float) else v
                                                      for v in probe.values()]]))
    events = nonfinite_events(history)
    lines = [f"non-finite gradient events: {len(events)}"]
    lines += [f"  epoch {ep}: {name}" for ep, name in events]
    lines.append(f"probe: activations forced to D_N={probe['d_n']} give max |dL/dW| {probe['grad_forced']:.6g}, "
                 f"unit activations {probe['grad_unit']:.6g}, ratio {probe['ratio']:.6g}; "
                 f"zero activations {probe['grad_zero']:.6g}")
    _write(out, "grad_report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_NUMERIC if events else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "lower": cmd_lower, "infer": cmd_infer, "verify": cmd_verify,
    "energy": cmd_energy, "range-report": cmd_range_report, "grad-report": cmd_grad_report,
}


def main(argv=None) -> int:
    try:
        args = resolve(argv)
    except UsageError as exc:
        print(f"ibrasnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    out = Path(args.out)
    try:
        _dump_config(out, args)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"ibrasnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        where = f" (layer {exc.layer})" if exc.layer else ""
        print(f"ibrasnn {args.command}: numeric failure{where}: {exc}", file=sys.stderr)
        if exc.report:
            _write(out, "nonfinite_report.csv", _csv(["parameter", "grad_max"],
                                                      [[k, _fmt(v)] for k, v in exc.report.items()]))
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"ibrasnn {args.command}: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (IbraError, OSError, ValueError) as exc:
        print(f"ibrasnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
