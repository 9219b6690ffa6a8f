"""Command-line entry point: ``hporacle {adapt,train,dnn-adapt,report}``.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic on stderr),
2 bad flags (argparse usage).
"""
import argparse
import glob
import os
import re
import sys
import warnings

import numpy as np

from . import dataset, dnn, driver
from .mesh import LSHAPE, MeshError, create_initial_mesh, read_snapshot, write_snapshot

SNAPSHOT = "mesh_{:04d}.txt"


class CliError(Exception):
    pass


def _fraction(s):
    v = float(s)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"{s} is not in [0, 1]")
    return v


def _open_fraction(s):
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"{s} is not in (0, 1)")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{s} is negative")
    return v


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"{s} is negative")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"{s} is not positive")
    return v


def build_parser():
    ap = argparse.ArgumentParser(prog="hporacle", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("adapt", help="self-adaptive two-grid hp loop, records the decision dataset")
    a.add_argument("--iters", type=_nonneg_int, default=20)
    a.add_argument("--accuracy", type=_nonneg_float, default=0.01, help="stop when max relative error (%%) drops below")
    a.add_argument("--threshold", type=_fraction, default=0.33, help="refine elements with error >= F * max")
    a.add_argument("--p0", type=int, default=2, help="initial polynomial order")
    a.add_argument("--dataset", required=True, help="decision dataset CSV to write")
    a.add_argument("--convergence", required=True, help="convergence CSV to write")
    a.add_argument("--mesh-out", help="directory for per-iteration mesh snapshots")
    a.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the loop is deterministic")

    t = sub.add_parser("train", help="train the refinement network on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--model-out", required=True)
    t.add_argument("--history", help="training history CSV (default: MODEL_OUT.history.csv)")
    t.add_argument("--epochs", type=_nonneg_int, default=200)
    t.add_argument("--lr", type=_positive_float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--split", type=_open_fraction, default=0.8, help="training fraction")
    t.add_argument("--dropout", type=float, default=0.2)
    t.add_argument("--class-weights", action="store_true", help="balanced weights on the h-class head")
    t.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("dnn-adapt", help="refine with a trained network, no reference mesh")
    d.add_argument("--model", required=True)
    d.add_argument("--iters", type=_nonneg_int, required=True)
    d.add_argument("--solve-each-iter", action="store_true", help="solve each mesh to log energy and error")
    d.add_argument("--convergence", required=True)
    d.add_argument("--mesh-out", required=True)
    d.add_argument("--resume", help="directory of snapshots; continue from the latest one")
    d.add_argument("--p0", type=int, default=2)

    r = sub.add_parser("report", help="plot-ready table and exponential fit of convergence CSVs")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--column", choices=["exact", "max_rel"], default="exact")
    r.add_argument("--combined", action="store_true", help="also fit all inputs as one series")
    r.add_argument("--out", help="write the table here instead of stdout")
    return ap


def _snapshot_dir(path):
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def _save_mesh(directory, k, mesh):
    if directory:
        write_snapshot(mesh, os.path.join(directory, SNAPSHOT.format(k)))


def latest_snapshot(directory):
    found = []
    for p in glob.glob(os.path.join(directory, "mesh_*.txt")):
        m = re.fullmatch(r"mesh_(\d+)\.txt", os.path.basename(p))
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise CliError(f"no mesh snapshots in {directory}")
    return max(found)


def cmd_adapt(args):
    config = driver.AdaptConfig(max_iterations=args.iters, accuracy=args.accuracy, threshold=args.threshold,
                                initial_order=args.p0, dataset_path=args.dataset)
    problem = driver.lshape_problem()
    out = _snapshot_dir(args.mesh_out)
    mesh = create_initial_mesh(args.p0)
    _save_mesh(out, 0, mesh)
    result = driver.self_adaptive_loop(config, problem, mesh, on_iteration=lambda k, m, _: _save_mesh(out, k, m))
    dataset.write_dataset(result.dataset, args.dataset)
    driver.write_convergence(result.convergence, args.convergence)
    last = result.convergence[-1] if result.convergence else None
    if last:
        print(f"{len(result.convergence)} iterations, {last.ndof_coarse} dofs, "
              f"exact error {last.exact_error:.4g}%, {len(result.dataset)} dataset rows")
    return 0


def cmd_train(args):
    try:
        records = dataset.read_dataset(args.dataset)
    except OSError as exc:
        raise CliError(f"cannot read dataset: {exc}") from None
    arch = dnn.Architecture(dropout=args.dropout)
    config = dnn.TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                             val_fraction=1.0 - args.split, class_weighting=args.class_weights, seed=args.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model, history = dnn.train(dnn.init_model(arch, args.seed), records, config)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    dnn.save_model(model, args.model_out)
    dnn.write_history(history, args.history or args.model_out + ".history.csv")
    if history:
        X, h, sons = dataset.as_arrays(records)
        _, va = dnn.split_indices(len(h), config.val_fraction, np.random.default_rng(config.seed))
        acc = dnn.accuracies(model, X[va], h[va], sons[va])
        names = ["h"] + [f"p{i}" for i in range(1, 5)]
        print(f"{len(history)} epochs; validation accuracy " + " ".join(f"{n}={a:.3f}" for n, a in zip(names, acc)))
    else:
        print("0 epochs; initial weights written")
    return 0


def cmd_dnn_adapt(args):
    model = dnn.load_model(args.model)
    if args.resume:
        k, path = latest_snapshot(args.resume)
        mesh = read_snapshot(path, LSHAPE)
    else:
        k, mesh = 0, create_initial_mesh(args.p0)
    out = _snapshot_dir(args.mesh_out)
    _save_mesh(out, k, mesh)
    config = driver.AdaptConfig(max_iterations=args.iters, initial_order=min(args.p0, 8))
    result = driver.dnn_driven_loop(config, driver.lshape_problem(), model, mesh=mesh, start_iteration=k + 1,
                                    solve_each=args.solve_each_iter,
                                    on_iteration=lambda i, m, _: _save_mesh(out, i, m))
    driver.write_convergence(result.convergence, args.convergence)
    print(f"{len(result.convergence)} iterations from snapshot {k}, {len(result.mesh)} active elements")
    return 0


def cmd_report(args):
    col = "exact_error" if args.column == "exact" else "max_rel_error"
    series = []
    for path in args.inputs:
        try:
            recs = driver.read_convergence(path)
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc}") from None
        series.append((path, [r.ndof_coarse for r in recs], [getattr(r, col) for r in recs]))
    if args.combined and len(series) > 1:
        series.append(("combined", sum((s[1] for s in series), []), sum((s[2] for s in series), [])))
    lines = ["series,ndof_cbrt,log10_err"]
    fits = []
    for name, n, e in series:
        if name != "combined":
            for ni, ei in zip(n, e):
                if ei > 0:
                    lines.append(f"{name},{np.cbrt(ni):.17g},{np.log10(ei):.17g}")
        fit = driver.convergence_fit(n, e)
        if fit is None:
            fits.append(f"# fit {name}: undefined (needs >= 3 points with positive error)")
        else:
            fits.append(f"# fit {name}: slope={fit[0]:.17g} intercept={fit[1]:.17g} r2={fit[2]:.17g}")
    text = "\n".join(lines + fits) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print("\n".join(fits))
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {"adapt": cmd_adapt, "train": cmd_train, "dnn-adapt": cmd_dnn_adapt, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, MeshError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"hporacle {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
