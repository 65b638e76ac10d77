"""Inverting triangular-Jacobian maps.

Two solvers:

* :func:`invert_fixed_point`, the parallel diagonal-preconditioned iteration
  ``x <- x - alpha * (f(x) - z) / diag(J_f(x))``. Every coordinate moves at
  once, so the cost is a handful of forward passes.
* :func:`invert_sequential_oracle`, which solves one flat coordinate at a time
  in triangular order by bracketed bisection. It needs ``D`` coordinate solves
  and serves as ground truth.

Errors are reported as the normalized L2 ``||f(x) - z||^2 / D`` per example;
the solver converges on the worst example of the batch.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import mint
from .errors import BracketError, DivergenceError
from .masks import Orientation
from .tensor import normalized_l2


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 1.0
    max_iters: int = 120
    tol: float = 1e-8
    record_trace: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")

    @property
    def guaranteed(self):
        """Whether alpha lies in the local-convergence range (0, 2)."""
        return 0.0 < self.alpha < 2.0


@dataclass
class InversionResult:
    x: np.ndarray
    iterations_used: int
    final_error: float
    converged: bool
    alpha_guaranteed: bool
    trace: list = None


def invert_fixed_point(f, jd, z, x0, cfg=SolverConfig()):
    """Solve ``f(x) = z`` with the parallel fixed-point iteration.

    ``jd(x)`` returns the (strictly positive) Jacobian diagonal. If ``jd`` is
    None, ``f`` must return ``(f(x), diag)`` in one call.
    Stops after ``cfg.max_iters`` updates or once the worst per-example
    normalized error drops to ``cfg.tol``.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError(f"x0 shape {x.shape} does not match z shape {z.shape}")

    def evaluate(v):
        if jd is None:
            return f(v)
        return f(v), None

    fx, diag = evaluate(x)
    with np.errstate(over="ignore"):
        err = float(np.max(normalized_l2(fx, z)))
    trace = [err] if cfg.record_trace else None
    it = 0
    while it < cfg.max_iters and err > cfg.tol:
        if diag is None:
            diag = jd(x)
        # overflow is reported as DivergenceError below, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            x = x - cfg.alpha * (fx - z) / diag
            it += 1
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"fixed-point iterate became non-finite at iteration {it}", iteration=it)
            fx, diag = evaluate(x)
            err = float(np.max(normalized_l2(fx, z)))
        if not math.isfinite(err):
            raise DivergenceError(f"residual became non-finite at iteration {it}", iteration=it)
        if trace is not None:
            trace.append(err)
    return InversionResult(
        x=x,
        iterations_used=it,
        final_error=err,
        converged=err <= cfg.tol,
        alpha_guaranteed=cfg.guaranteed,
        trace=trace,
    )


def invert_mint(params, z, cfg=SolverConfig(), x0=None):
    """Invert one Mint layer, starting from ``z / t`` unless ``x0`` is given."""
    layer = mint.prepare(params)
    if x0 is None:
        x0 = z / layer.t[None, :, None, None]
    return invert_fixed_point(layer.forward_and_jac_diag, None, z, x0, cfg)


@dataclass
class SequentialResult:
    x: np.ndarray
    coordinate_solves: int
    evaluations: int


def invert_sequential_oracle(f, z, orientation, x_init=None, tol=1e-12, max_doublings=60):
    """Solve ``f(x) = z`` one coordinate at a time in triangular order.

    ``f`` must be triangular in ``orientation`` with each output increasing in
    its own coordinate. Coordinates are visited in channel-major raster order
    (reversed for upper) and each is found by bisection on an expanding bracket.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    zf = z.reshape(n, -1)
    D = zf.shape[1]
    x = (z.copy() if x_init is None else np.array(x_init, dtype=np.float64)).reshape(n, -1)
    order = range(D) if Orientation(orientation) is Orientation.LOWER else range(D - 1, -1, -1)
    evals = 0
    solves = 0

    def g(k, v):
        nonlocal evals
        evals += 1
        x[:, k] = v
        return f(x.reshape(z.shape)).reshape(n, -1)[:, k]

    for k in order:
        target = zf[:, k]
        centre = x[:, k].copy()
        width = np.ones(n)
        lo, hi = centre - width, centre + width
        glo, ghi = g(k, lo), g(k, hi)
        doublings = 0
        while np.any(glo > target) or np.any(ghi < target):
            doublings += 1
            if doublings > max_doublings:
                raise BracketError(
                    f"no bracket for coordinate {k} after {max_doublings} doublings; "
                    "f may be non-monotone or z out of range"
                )
            width = width * 2.0
            lo = np.where(glo > target, centre - width, lo)
            hi = np.where(ghi < target, centre + width, hi)
            glo, ghi = g(k, lo), g(k, hi)
        for _ in range(400):
            if np.all(hi - lo <= tol * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))):
                break
            mid = 0.5 * (lo + hi)
            if np.all((mid == lo) | (mid == hi)):
                break
            below = g(k, mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        x[:, k] = 0.5 * (lo + hi)
        solves += 1
    return SequentialResult(x=x.reshape(z.shape), coordinate_solves=solves, evaluations=evals)


def contraction_ratios(trace, floor=1e-26):
    """Successive ratios of residual norms ``sqrt(err_t / err_{t-1})``.

    Pairs whose earlier error is at or below ``floor`` are dropped: there the
    residual is dominated by rounding.
    """
    out = []
    for prev, cur in zip(trace[:-1], trace[1:]):
        if prev > floor:
            out.append(math.sqrt(cur / prev))
    return out


@dataclass
class ProbeRow:
    alpha: float
    iterations_to_tol: int | None
    final_error: float
    ratio: float
    diverged: bool = False
    trace: list = field(default_factory=list)


def convergence_probe(layer, shape, alphas, T=120, rng=None, tol=1e-24, tail=10, csv_path=None):
    """Run the fixed-point inversion of one Mint layer for several step sizes.

    A random ``x`` of ``shape`` is pushed forward to ``z`` and recovered from
    ``x0 = z / t``. For each alpha the late-stage contraction ratio is the
    geometric mean of the last ``tail`` residual-norm ratios. Divergence is
    recorded, not raised.
    """
    rng = np.random.default_rng(rng)
    x_true = rng.normal(size=shape)
    z = mint.forward(layer, x_true)
    rows = []
    for alpha in alphas:
        cfg = SolverConfig(alpha=alpha, max_iters=T, tol=tol, record_trace=True)
        try:
            res = invert_mint(layer, z, cfg)
        except DivergenceError as exc:
            rows.append(ProbeRow(alpha, None, math.inf, math.inf, diverged=True,
                                 trace=[math.inf] * (exc.iteration or 1)))
            continue
        ratios = contraction_ratios(res.trace)[-tail:]
        if not ratios:
            ratio = 0.0
        elif min(ratios) == 0.0:
            ratio = 0.0
        else:
            ratio = float(np.exp(np.mean(np.log(ratios))))
        rows.append(ProbeRow(
            alpha=alpha,
            iterations_to_tol=res.iterations_used if res.converged else None,
            final_error=res.final_error,
            ratio=ratio,
            trace=res.trace,
        ))
    if csv_path is not None:
        write_trace_csv(csv_path, [(r.alpha, r.trace) for r in rows])
    return rows


def write_trace_csv(path, traces):
    """Write ``(alpha, iter, error)`` rows for a list of ``(alpha, trace)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "iter", "error"])
        for alpha, trace in traces:
            for i, e in enumerate(trace):
                w.writerow([alpha, i, repr(float(e))])
