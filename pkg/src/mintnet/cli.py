"""Command-line entry point: ``mintnet <command> [flags]``.

Every command writes its artifacts and a ``summary.json`` into the output
directory and exits with 0 on success, 2 for configuration errors, 3 for
I/O errors, 4 when an inversion diverges and 5 when an audit misses its
threshold.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data, flow, mint, solver
from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigError, DivergenceError, IDXFormatError, IDXTruncatedError, IDXDimensionError
from .images import write_grid
from .masks import Orientation
from .train import eval_bpd, train_loop

logger = logging.getLogger("mintnet")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE, EXIT_AUDIT = 0, 2, 3, 4, 5
JACOBIAN_TOL = 1e-5
INVERT_TOL = 1e-6
INTERP_TOL = 1e-3


class AuditFailure(Exception):
    pass


def _out_dir(cfg):
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summary(out, summary):
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))


def load_data(cfg):
    """Train and test datasets for a run config."""
    d = cfg.data
    if d.source == "idx":
        train_ds = data.load_idx(d.path, d.labels_path, "train")
        if d.test_path:
            test_ds = data.load_idx(d.test_path, None, "test")
        else:
            n = len(train_ds)
            split = max(1, min(d.n_test, n // 5))
            test_ds = train_ds.subset(slice(n - split, n), "test")
            train_ds = train_ds.subset(slice(0, n - split))
        if d.downsample > 1:
            train_ds, test_ds = data.downsample(train_ds, d.downsample), data.downsample(test_ds, d.downsample)
        return train_ds.subset(slice(0, d.n_train)), test_ds.subset(slice(0, d.n_test))
    gen = data.synth_bars if d.source == "bars" else data.synth_noise
    rng = np.random.default_rng(d.seed)
    train_ds = gen(d.n_train, d.size, rng, "train")
    test_ds = gen(d.n_test, d.size, rng, "test")
    if d.downsample > 1:
        train_ds, test_ds = data.downsample(train_ds, d.downsample), data.downsample(test_ds, d.downsample)
    return train_ds, test_ds


def build_from_config(cfg, input_shape=None):
    m = cfg.model
    return flow.build_model(
        input_shape=tuple(input_shape or m.input_shape), pairs_per_stage=m.pairs_per_stage,
        squeezes=m.squeezes, k_groups=m.k_groups, filters=m.filters, kernel=m.kernel,
        activation=m.activation, rng=np.random.default_rng(cfg.seed), scheme=m.init,
        scale=m.init_scale, preprocess=flow.PreprocessConfig(lam=m.lam),
    )


def _model(args, cfg):
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        return model, str(args.checkpoint)
    return build_from_config(cfg), None


def _check_shape(model, ds):
    if tuple(ds.shape) != tuple(model.input_shape):
        raise ConfigError(f"data shape {ds.shape} does not match model input {model.input_shape}")


def _recorded_config(cfg):
    # where the run was written is not part of the experiment
    d = cfg.to_dict()
    d.pop("output")
    return d


def cmd_train(args, cfg):
    out = _out_dir(cfg)
    train_ds, test_ds = load_data(cfg)
    model = build_from_config(cfg, train_ds.shape)
    seed = cfg.train.eval_seed
    bpd_identity = eval_bpd(model, test_ds.images, seed)
    result = train_loop(model, train_ds, cfg.train, out_dir=out, eval_images=test_ds.images,
                        resume_from=args.checkpoint, extra={"config": _recorded_config(cfg)})
    bpd_final = eval_bpd(result.model, test_ds.images, seed)
    return {
        "steps": cfg.train.steps, "bpd_identity": bpd_identity, "bpd_eval": bpd_final,
        "bpd_improvement": bpd_identity - bpd_final,
        "final_loss": result.history[-1]["loss"] if result.history else None,
        "checkpoint": str(out / "checkpoint"),
    }


def cmd_eval(args, cfg):
    model, src = _model(args, cfg)
    _, test_ds = load_data(cfg)
    _check_shape(model, test_ds)
    return {"checkpoint": src, "n": len(test_ds), "bpd": eval_bpd(model, test_ds.images, cfg.train.eval_seed)}


def cmd_sample(args, cfg):
    out = _out_dir(cfg)
    model, src = _model(args, cfg)
    scfg = cfg.solver.to_config()
    res = flow.sample(model, args.n, scfg, rng=np.random.default_rng(cfg.seed))
    z2, _ = flow.forward(model, res.y)
    roundtrip = float(np.max(((z2 - res.z) ** 2).reshape(args.n, -1).mean(axis=1)))
    path = write_grid(out / "samples_grid", res.pixels)
    np.save(out / "samples_latent.npy", res.z)
    return {
        "checkpoint": src, "n": args.n, "alpha": scfg.alpha, "max_iters": scfg.max_iters,
        "image": path.name, "layer_iterations": res.report.layer_iterations,
        "max_layer_error": max(res.report.layer_errors), "roundtrip_error": roundtrip,
        "out_of_range_fraction": res.out_of_range,
        "converged": all(e <= scfg.tol for e in res.report.layer_errors),
    }


def _alpha_run(model, z, x_true, alpha, cfg):
    scfg = solver.SolverConfig(alpha=alpha, max_iters=cfg.solver.max_iters, tol=cfg.solver.tol,
                               record_trace=True)
    try:
        rep = flow.inverse(model, z, scfg)
    except DivergenceError as exc:
        return {"alpha": alpha, "diverged": True, "layer": exc.layer, "iteration": exc.iteration,
                "trace": [], "reconstruction_error": math.inf, "max_iterations": None}
    # error after t iterations: worst layer, holding each layer's final value once it stops
    length = max(len(t) for t in rep.traces)
    trace = [max(t[min(i, len(t) - 1)] for t in rep.traces) for i in range(length)]
    recon = float(np.max(((rep.x - x_true) ** 2).reshape(len(x_true), -1).mean(axis=1)))
    return {"alpha": alpha, "diverged": False, "trace": trace, "reconstruction_error": recon,
            "max_iterations": max(rep.layer_iterations),
            "converged": all(e <= scfg.tol for e in rep.layer_errors)}


def _best(runs):
    ok = [r for r in runs if not r["diverged"] and r["converged"]]
    if not ok:
        ok = [r for r in runs if not r["diverged"]]
        if not ok:
            return None
    return min(ok, key=lambda r: (r["max_iterations"], r["reconstruction_error"], r["alpha"]))


def cmd_invert_audit(args, cfg):
    out = _out_dir(cfg)
    model, src = _model(args, cfg)
    _, test_ds = load_data(cfg)
    _check_shape(model, test_ds)
    x, _ = flow.preprocess(test_ds.images[: args.n], model.preprocess, rng=np.random.default_rng(cfg.seed))
    z, _ = flow.forward(model, x)
    alphas = list(args.alphas or cfg.solver.alphas)
    runs = [_alpha_run(model, z, x, a, cfg) for a in alphas]
    if args.refine:
        best = _best(runs)
        centre = best["alpha"] if best else 1.0
        fine = [round(centre + 0.05 * k, 10) for k in range(-10, 11)]
        seen = {r["alpha"] for r in runs}
        runs += [_alpha_run(model, z, x, a, cfg) for a in fine if a > 0 and a not in seen]
    solver.write_trace_csv(out / "audit_invert.csv", [(r["alpha"], r["trace"]) for r in runs])
    best = _best(runs)
    passed = best is not None and best["reconstruction_error"] < INVERT_TOL
    summary = {
        "checkpoint": src, "n": int(x.shape[0]), "threshold": INVERT_TOL,
        "best_alpha": best["alpha"] if best else None,
        "runs": [{k: v for k, v in r.items() if k != "trace"} for r in runs],
        "passed": passed,
    }
    if not passed:
        raise AuditFailure(summary)
    return summary


def _fd_jacobian(fn, x, eps=1e-6):
    d = x.size
    J = np.zeros((d, d))
    flat = x.reshape(-1)
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        J[:, k] = (fn((flat + e).reshape(x.shape)) - fn((flat - e).reshape(x.shape))).reshape(-1) / (2 * eps)
    return J


def cmd_jacobian_audit(args, cfg):
    out = _out_dir(cfg)
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        src = str(args.checkpoint)
    else:
        m = cfg.model
        model = flow.build_model((2, 4, 4), pairs_per_stage=1, squeezes=0, k_groups=m.k_groups,
                                 filters=m.filters, kernel=m.kernel, activation=m.activation,
                                 rng=np.random.default_rng(cfg.seed), scheme="random",
                                 scale=m.init_scale or 1.0)
        src = None
    rng = np.random.default_rng(cfg.seed + 1)
    rows, worst_diag, worst_tri, worst_det = [], 0.0, 0.0, 0.0
    for i, layer in enumerate(model.layers()):
        xi = rng.normal(size=(1, layer.channels, *_spatial(model, i)))
        J = _fd_jacobian(lambda v: mint.forward(layer, v), xi)
        diag = mint.jac_diag(layer, xi).reshape(-1)
        diag_err = float(np.max(np.abs(np.diag(J) - diag)))
        tri = np.triu(J, 1) if Orientation(layer.orientation) is Orientation.LOWER else np.tril(J, -1)
        tri_err = float(np.max(np.abs(tri))) if tri.size else 0.0
        sign, logabs = np.linalg.slogdet(J)
        det_err = float(abs(mint.log_det(layer, xi)[0] - logabs)) if sign > 0 else math.inf
        rows.append({"layer": i, "orientation": Orientation(layer.orientation).value, "dim": int(xi.size),
                     "diag_error": diag_err, "triangularity_error": tri_err, "logdet_error": det_err})
        worst_diag, worst_tri, worst_det = max(worst_diag, diag_err), max(worst_tri, tri_err), max(worst_det, det_err)
    with open(out / "audit_jacobian.csv", "w") as fh:
        fh.write("layer,orientation,dim,diag_error,triangularity_error,logdet_error\n")
        for r in rows:
            fh.write(f"{r['layer']},{r['orientation']},{r['dim']},{r['diag_error']!r},"
                     f"{r['triangularity_error']!r},{r['logdet_error']!r}\n")
    passed = worst_diag < JACOBIAN_TOL and worst_tri < JACOBIAN_TOL
    summary = {"checkpoint": src, "input_shape": list(model.input_shape), "layers": rows,
               "max_diag_error": worst_diag, "max_triangularity_error": worst_tri,
               "max_logdet_error": worst_det, "threshold": JACOBIAN_TOL, "passed": passed}
    if not passed:
        raise AuditFailure(summary)
    return summary


def _spatial(model, layer_index):
    """Spatial size seen by the ``layer_index``-th Mint layer."""
    _, h, w = model.input_shape
    seen = 0
    for block in model.blocks:
        if isinstance(block, flow.Squeeze):
            h, w = h // block.k, w // block.k
        else:
            if layer_index < seen + 2:
                return h, w
            seen += 2
    raise IndexError(layer_index)


def cmd_interpolate(args, cfg):
    out = _out_dir(cfg)
    model, src = _model(args, cfg)
    _, test_ds = load_data(cfg)
    _check_shape(model, test_ds)
    idx = list(args.indices)
    if len(idx) != 4 or max(idx) >= len(test_ds) or min(idx) < 0:
        raise ConfigError(f"--indices needs four indices into the {len(test_ds)} test images, got {idx}")
    xs, _ = flow.preprocess(test_ds.images[idx], model.preprocess, rng=np.random.default_rng(cfg.seed))
    scfg = cfg.solver.to_config()
    grid = flow.interpolate(model, xs, 8, scfg)
    corner = float(np.mean((grid[0, 0] - xs[0]) ** 2))
    pixels, _ = flow.to_pixels(flow.postprocess(grid.reshape(-1, *model.input_shape), model.preprocess))
    path = write_grid(out / "samples_interp", pixels, cols=8)
    passed = corner < INTERP_TOL
    summary = {"checkpoint": src, "indices": idx, "image": path.name, "corner_error": corner,
               "threshold": INTERP_TOL, "passed": passed}
    if not passed:
        raise AuditFailure(summary)
    return summary


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "invert-audit": cmd_invert_audit,
    "jacobian-audit": cmd_jacobian_audit,
    "interpolate": cmd_interpolate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="mintnet", description="Masked invertible convolutional flows.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON run config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--alpha", type=float, help="fixed-point step size")
        s.add_argument("--iters", type=int, help="fixed-point iteration cap per layer")
        s.add_argument("--checkpoint", type=Path)
        if name == "sample":
            s.add_argument("--n", type=int, default=16)
        if name == "invert-audit":
            s.add_argument("--alphas", type=float, nargs="+")
            s.add_argument("--refine", action="store_true", help="coarse grid, then a 0.05 grid around the best")
            s.add_argument("--n", type=int, default=8, help="number of test images")
        if name == "interpolate":
            s.add_argument("--indices", type=int, nargs=4, default=[0, 1, 2, 3])
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    summary = {"command": args.command}
    try:
        cfg = config_mod.override(config_mod.load(args.config), seed=args.seed, out=args.out,
                                  alpha=args.alpha, iters=args.iters)
        out = _out_dir(cfg)
        summary.update(COMMANDS[args.command](args, cfg))
        code = EXIT_OK
    except AuditFailure as exc:
        summary.update(exc.args[0])
        code = EXIT_AUDIT
    except ConfigError as exc:
        summary["error"] = str(exc)
        code = EXIT_CONFIG
    except DivergenceError as exc:
        summary.update(error=str(exc), layer=exc.layer, iteration=exc.iteration)
        code = EXIT_DIVERGENCE
    except (OSError, CheckpointError, IDXFormatError, IDXTruncatedError, IDXDimensionError) as exc:
        summary["error"] = str(exc)
        code = EXIT_IO
    summary["exit_code"] = code
    if out is None and args.out is not None:
        # config failed to parse; the summary still goes where the user asked
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    if out is not None:
        _write_summary(out, summary)
    if code:
        print(f"mintnet {args.command}: failed ({summary.get('error', 'audit threshold missed')})", file=sys.stderr)
    else:
        print(f"mintnet {args.command}: ok -> {out / 'summary.json'}")
    return code


if __name__ == "__main__":
    sys.exit(main())
