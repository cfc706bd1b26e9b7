"""Numerical verification of the training dynamics.

Three checks are implemented, each against an independent numerical
oracle rather than the analytic path it validates:

* a central finite-difference gradient oracle used to confirm every
  analytic gradient in the package;
* the singular-value evolution law for balanced deep factorizations,
  compared term by term against finite differences of the singular values
  along an explicit-Euler trajectory;
* the long-time limits of the adjacency matrix under the energy's own
  gradient flow (entries decay to 0 on dissimilar row pairs and to
  ``2 / (m + 2 s)`` on identical pairs and the diagonal, where ``2 s``
  counts ordered identical pairs), together with the monotone decay of
  the energy itself.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import gen_mask
from .errors import ConfigError, NumericalError
from .factorization import (
    FactorChain,
    ObjectiveConfig,
    _gaussian,
    apply_mask,
    balanced_init,
    default_lambda,
    evaluate_objective,
    mask_adjoint,
)
from .linalg import as_matrix, svd
from .regularizer import (
    COLUMN,
    ROW,
    SYMMETRIZED_SUM,
    AdaptiveRegularizer,
    Transformation,
    _grad_w_from,
    build_adjacency,
    dirichlet_energy,
)
from .training import gd_step


def finite_diff_grad(f, params, step=1e-5):
    """Central finite differences of a scalar function of an array pack.

    ``f`` receives the (perturbed) list of arrays and returns a float.
    Raises ``NumericalError`` naming the offending block and coordinate if
    a probe evaluates non-finite.
    """
    if not step > 0:
        raise ConfigError("finite-difference step must be > 0")
    work = [np.array(p, dtype=np.float64) for p in params]
    grads = []
    for bi, p in enumerate(work):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(work)
            flat[i] = orig - step
            fm = f(work)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError(f"non-finite probe at block {bi}, coordinate {i}")
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def _rel_err(analytic, reference, floor=1e-12):
    num = float(np.linalg.norm(np.asarray(analytic) - np.asarray(reference)))
    den = max(float(np.linalg.norm(np.asarray(reference))), floor)
    return num / den


def gradient_check_suite(seed=0, instances=20, fd_step=1e-5):
    """Finite-difference validation of every analytic gradient block.

    Builds seeded random completion problems (dims <= 8, depths 1..3,
    both adjacency variants, row and column regularizers active) and
    compares all factor and parameter-matrix gradients against central
    finite differences of the objective. Returns ``(max_rel_err, rows)``
    with one detail row per instance.
    """
    rng = np.random.default_rng(seed)
    variants = ("symmetrized-sum", "symmetric-exponent")
    worst = 0.0
    rows = []
    for idx in range(instances):
        m = int(rng.integers(2, 9))
        n = int(rng.integers(2, 9))
        depth = (1, 2, 3)[idx % 3]
        variant = variants[idx % 2]
        target = rng.standard_normal((m, n))
        mask = gen_mask("random", m, n, rate=0.2 + 0.4 * float(rng.random()),
                        seed=int(rng.integers(2**31)))
        y = apply_mask(mask, target)
        lam_r = 0.05 + 0.5 * float(rng.random())
        lam_c = 0.05 + 0.5 * float(rng.random())
        row_reg = AdaptiveRegularizer(
            w=0.5 * rng.standard_normal((m, m)), variant=variant,
            transform=Transformation(ROW), lam=lam_r,
        )
        col_reg = AdaptiveRegularizer(
            w=0.5 * rng.standard_normal((n, n)), variant=variant,
            transform=Transformation(COLUMN), lam=lam_c,
        )
        obj = ObjectiveConfig(mask=mask, y=y, row_reg=row_reg, col_reg=col_reg)
        width = min(m, n)
        dims = [n] + [width] * (depth - 1) + [m]
        chain = FactorChain(
            [0.5 * rng.standard_normal((dims[l + 1], dims[l])) for l in range(depth)]
        )

        ev = evaluate_objective(obj, chain, with_grads=True)
        analytic = list(ev.factor_grads) + [ev.w_row_grad, ev.w_col_grad]

        def f(ps):
            for l in range(depth):
                chain.factors[l] = ps[l]
            row_reg.w = ps[depth]
            col_reg.w = ps[depth + 1]
            return evaluate_objective(obj, chain, with_grads=False).loss

        params = list(chain.factors) + [row_reg.w, col_reg.w]
        fd = finite_diff_grad(f, params, step=fd_step)
        errs = [_rel_err(a, r) for a, r in zip(analytic, fd)]
        inst_max = max(errs)
        worst = max(worst, inst_max)
        rows.append(
            {
                "instance": idx,
                "m": m,
                "n": n,
                "depth": depth,
                "variant": variant,
                "max_rel_err": inst_max,
            }
        )
    return worst, rows


@dataclass
class Theorem1Record:
    iteration: int
    k: int
    lhs: float
    rhs: float
    rel_err: float
    gamma: float
    flagged: bool


@dataclass
class Theorem1Report:
    """Per-check comparison of measured and predicted singular-value rates."""

    m: int
    n: int
    depth: int
    step: float
    checks: int
    stride: int
    variant: str
    lambda_row: float
    lambda_col: float
    seed: int
    records: list = field(default_factory=list)
    per_k_median: dict = field(default_factory=dict)
    median_rel_err: float = math.nan
    min_gamma: float = math.nan
    flagged: int = 0

    def to_dict(self):
        return {
            "m": self.m,
            "n": self.n,
            "depth": self.depth,
            "step": self.step,
            "checks": self.checks,
            "stride": self.stride,
            "variant": self.variant,
            "lambda_row": self.lambda_row,
            "lambda_col": self.lambda_col,
            "seed": self.seed,
            "median_rel_err": self.median_rel_err,
            "per_k_median": {str(k): v for k, v in self.per_k_median.items()},
            "min_gamma": self.min_gamma,
            "flagged": self.flagged,
            "records": [
                {
                    "iteration": r.iteration,
                    "k": r.k,
                    "lhs": r.lhs,
                    "rhs": r.rhs,
                    "rel_err": r.rel_err,
                    "gamma": r.gamma,
                    "flagged": r.flagged,
                }
                for r in self.records
            ],
        }


def verify_theorem1(
    m,
    n,
    depth,
    step=1e-3,
    checks=200,
    stride=1,
    variant=SYMMETRIZED_SUM,
    lambda_row=None,
    lambda_col=None,
    seed=0,
    singular_values=None,
    missing_rate=0.3,
    track_top=3,
):
    """Check the predicted singular-value dynamics along an Euler flow.

    From a balanced initialization with distinct singular values, the
    whole parameter set follows plain gradient descent with the given
    step. At each checked iteration ``t`` the measured rate
    ``(sigma_k(t+1) - sigma_k(t-1)) / (2 step)`` is compared with

        -depth * (sigma_k^2) ** (1 - 1/depth) * <grad_fid, u_k v_k^T>
        - 2 * depth * (sigma_k^2) ** (3/2 - 1/depth) * gamma_k,

    where ``grad_fid`` is the data-fidelity gradient and
    ``gamma_k = lam_r * u_k' L_r u_k + lam_c * v_k' L_c v_k >= 0``.
    Checks where a singular value moves by more than half its gap to the
    nearest neighbor are flagged as potential crossings and excluded from
    the summary medians.
    """
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((m, n))
    mask = gen_mask("random", m, n, rate=missing_rate, seed=seed + 1)
    y = apply_mask(mask, target)
    lam = default_lambda(y, m, n)
    lam_r = lam if lambda_row is None else float(lambda_row)
    lam_c = lam if lambda_col is None else float(lambda_col)

    k = min(m, n)
    if singular_values is None:
        singular_values = np.linspace(1.5, 0.5, k)
    singular_values = np.asarray(singular_values, dtype=np.float64)
    if np.min(np.abs(np.diff(np.sort(singular_values)))) < 1e-6:
        raise ConfigError("initial singular values must be distinct")

    chain = balanced_init(m, n, depth, singular_values, rng=rng)
    row_reg = AdaptiveRegularizer(
        w=_gaussian(rng, (m, m), 1e-5), variant=variant, transform=Transformation(ROW), lam=lam_r
    )
    col_reg = AdaptiveRegularizer(
        w=_gaussian(rng, (n, n), 1e-5), variant=variant, transform=Transformation(COLUMN), lam=lam_c
    )
    obj = ObjectiveConfig(mask=mask, y=y, row_reg=row_reg, col_reg=col_reg)

    iters = checks * stride + 1
    track = min(track_top, k)
    sigma_hist = np.zeros((iters + 1, k))
    pending = []

    for t in range(iters + 1):
        ev = evaluate_objective(obj, chain, with_grads=True)
        dec = svd(ev.xhat)
        sigma_hist[t] = dec.sigma
        if 1 <= t <= iters - 1 and t % stride == 0:
            grad_fid = mask_adjoint(mask, ev.residual)
            lap_r = ev.row_pair.lap
            lap_c = ev.col_pair.lap
            for kk in range(track):
                u = dec.u[:, kk]
                v = dec.v[:, kk]
                gamma = lam_r * float(u @ lap_r @ u) + lam_c * float(v @ lap_c @ v)
                s2 = float(dec.sigma[kk]) ** 2
                rhs = (
                    -depth * s2 ** (1.0 - 1.0 / depth) * float(u @ grad_fid @ v)
                    - 2.0 * depth * s2 ** (1.5 - 1.0 / depth) * gamma
                )
                pending.append((t, kk, rhs, gamma))
        if t < iters:
            params = list(chain.factors) + [row_reg.w, col_reg.w]
            grads = list(ev.factor_grads) + [ev.w_row_grad, ev.w_col_grad]
            new = gd_step(params, grads, step)
            chain.factors[:] = new[:depth]
            row_reg.w = new[depth]
            col_reg.w = new[depth + 1]

    report = Theorem1Report(
        m=m, n=n, depth=depth, step=step, checks=checks, stride=stride, variant=variant,
        lambda_row=lam_r, lambda_col=lam_c, seed=seed,
    )
    for t, kk, rhs, gamma in pending:
        lhs = (sigma_hist[t + 1, kk] - sigma_hist[t - 1, kk]) / (2.0 * step)
        others = np.delete(sigma_hist[t], kk)
        gap = float(np.min(np.abs(others - sigma_hist[t, kk]))) if others.size else math.inf
        movement = abs(sigma_hist[t + 1, kk] - sigma_hist[t - 1, kk])
        flagged = movement > 0.5 * gap
        rel = abs(lhs - rhs) / max(abs(rhs), 1e-12)
        report.records.append(
            Theorem1Record(
                iteration=t, k=kk, lhs=float(lhs), rhs=float(rhs), rel_err=float(rel),
                gamma=float(gamma), flagged=bool(flagged),
            )
        )
    clean = [r for r in report.records if not r.flagged]
    report.flagged = len(report.records) - len(clean)
    report.min_gamma = min((r.gamma for r in report.records), default=math.nan)
    if clean:
        report.median_rel_err = float(np.median([r.rel_err for r in clean]))
        for kk in range(track):
            errs = [r.rel_err for r in clean if r.k == kk]
            if errs:
                report.per_k_median[kk] = float(np.median(errs))
    return report


def duplicated_row_instance(m, dup, n_cols=None):
    """Unit-norm, strictly positive rows with a controlled duplication.

    The first ``dup`` rows are identical; the remaining rows are mutually
    distinct spike patterns, so the identical-pair count is exactly
    ``dup * (dup - 1) / 2``.
    """
    if not 1 <= dup <= m:
        raise ConfigError(f"dup must lie in [1, {m}], got {dup}")
    distinct = m - dup + 1
    if n_cols is None:
        n_cols = max(3, distinct)
    if n_cols < distinct:
        raise ConfigError(f"need at least {distinct} columns for distinct rows")

    def pattern(i):
        v = np.ones(n_cols)
        v[i] = 9.0
        return v / np.linalg.norm(v)

    x = np.empty((m, n_cols))
    for i in range(dup):
        x[i] = pattern(0)
    for j in range(1, distinct):
        x[dup + j - 1] = pattern(j)
    return x


@dataclass
class Theorem2Report:
    """Adjacency-flow limits, rates, and the energy trace."""

    m: int
    n_cols: int
    s: int
    gamma: float
    variant: str
    epsilon_init: float
    step: float
    iters: int
    same_mask: np.ndarray
    a_star: np.ndarray
    snapshot_iters: list = field(default_factory=list)
    a_snapshots: list = field(default_factory=list)
    reg_values: np.ndarray = None
    symmetry_drift: float = 0.0
    final_errors: np.ndarray = None
    max_err_s1: float = 0.0
    max_err_s2_diag: float = 0.0
    d_hat: float = 0.0
    stationary: bool = False
    no_decay_flag: bool = False
    half_time_s1_min: float = math.inf
    half_time_s2_max: float = 0.0
    rate_order_ok: bool = True

    def to_dict(self):
        times = [it * self.step for it in self.snapshot_iters]
        errs = [float(np.max(np.abs(a - self.a_star))) for a in self.a_snapshots]
        return {
            "m": self.m,
            "n_cols": self.n_cols,
            "s": self.s,
            "gamma": self.gamma,
            "variant": self.variant,
            "epsilon_init": self.epsilon_init,
            "step": self.step,
            "iters": self.iters,
            "symmetry_drift": self.symmetry_drift,
            "max_err_s1": self.max_err_s1,
            "max_err_s2_diag": self.max_err_s2_diag,
            "d_hat": self.d_hat,
            "stationary": self.stationary,
            "no_decay_flag": self.no_decay_flag,
            "half_time_s1_min": self.half_time_s1_min,
            "half_time_s2_max": self.half_time_s2_max,
            "rate_order_ok": self.rate_order_ok,
            "limit_matrix": self.a_star.tolist(),
            "final_adjacency": self.a_snapshots[-1].tolist() if self.a_snapshots else None,
            "snapshot_times": times,
            "snapshot_max_errors": errs,
            "reg_value_first": float(self.reg_values[0]),
            "reg_value_last": float(self.reg_values[-1]),
        }


def verify_theorem2(x_rows, variant=SYMMETRIZED_SUM, epsilon_init=0.0, step=0.05,
                    iters=60000, snapshots=256):
    """Integrate the adjacency flow and compare against its predicted limit.

    Preconditions (validated): every row of ``x_rows`` has unit Euclidean
    norm and all entries are strictly positive. The parameter matrix
    starts at ``epsilon_init`` times the all-ones matrix and follows
    ``w <- w - step * grad`` of the energy. Symmetry of ``w`` must be
    preserved to 1e-12 at every step. The empirical decay rate is a
    least-squares slope of the log maximum entry error over the final
    third of the snapshots; only its sign is meaningful.
    """
    x = as_matrix(x_rows, "row matrix")
    m, n_cols = x.shape
    norms2 = np.sum(x * x, axis=1)
    if np.max(np.abs(norms2 - 1.0)) > 1e-9:
        raise ConfigError("every row must have unit Euclidean norm")
    if np.min(x) <= 0.0:
        raise ConfigError("all entries must be strictly positive")
    if iters < 2:
        raise ConfigError("iters must be >= 2")

    same = np.zeros((m, m), dtype=bool)
    for i in range(m):
        for j in range(m):
            if i != j and np.max(np.abs(x[i] - x[j])) <= 1e-12:
                same[i, j] = True
    s = int(same.sum()) // 2
    gamma = 2.0 / (m + 2 * s)
    diag = np.eye(m, dtype=bool)
    s2_mask = same
    s1_mask = ~same & ~diag
    a_star = np.where(s2_mask | diag, gamma, 0.0)

    snap_iters = sorted(set(np.linspace(0, iters, num=min(snapshots, iters + 1)).astype(int).tolist()))
    snap_set = set(snap_iters)

    w = np.full((m, m), float(epsilon_init))
    reg_values = np.empty(iters + 1)
    drift = 0.0
    a_snaps = []
    for t in range(iters + 1):
        d = float(np.max(np.abs(w - w.T)))
        drift = max(drift, d)
        if d > 1e-12:
            raise NumericalError(f"parameter symmetry drifted to {d:g} at step {t}")
        pair = build_adjacency(w, variant)
        value = dirichlet_energy(x, pair.lap)
        reg_values[t] = value
        if t in snap_set:
            a_snaps.append(pair.a.copy())
        if t < iters:
            grad = _grad_w_from(pair, variant, x, value)
            w = w - step * grad

    report = Theorem2Report(
        m=m, n_cols=n_cols, s=s, gamma=gamma, variant=variant,
        epsilon_init=float(epsilon_init), step=step, iters=iters,
        same_mask=same, a_star=a_star, snapshot_iters=snap_iters,
        a_snapshots=a_snaps, reg_values=reg_values, symmetry_drift=drift,
    )
    final_err = np.abs(a_snaps[-1] - a_star)
    report.final_errors = final_err
    report.max_err_s1 = float(final_err[s1_mask].max()) if s1_mask.any() else 0.0
    report.max_err_s2_diag = float(final_err[s2_mask | diag].max())
    report.stationary = not s1_mask.any()

    err_series = np.array([float(np.max(np.abs(a - a_star))) for a in a_snaps])
    times = np.array(snap_iters, dtype=np.float64) * step
    if not report.stationary:
        start = (2 * len(err_series)) // 3
        tail_t = times[start:]
        tail_e = err_series[start:]
        keep = tail_e > 0
        if keep.sum() >= 2:
            slope = np.polyfit(tail_t[keep], np.log(tail_e[keep]), 1)[0]
            report.d_hat = float(-slope)
        report.no_decay_flag = report.d_hat <= 0.0

        gap0 = np.abs(a_snaps[0] - a_star)
        half_times = np.full((m, m), math.inf)
        for idx, a in enumerate(a_snaps):
            err = np.abs(a - a_star)
            hit = (err <= 0.5 * gap0) & np.isinf(half_times)
            half_times[hit] = times[idx]
        if s2_mask.any():
            report.half_time_s2_max = float(half_times[s2_mask].max())
        report.half_time_s1_min = float(half_times[s1_mask].min())
        if s2_mask.any():
            report.rate_order_ok = report.half_time_s2_max <= report.half_time_s1_min
    return report


def check_corollary1(report):
    """Energy decay checks implied by the adjacency-flow limit.

    The energy must stay non-negative, never increase by more than 1e-10
    between consecutive steps, satisfy the ``t = 0`` bound
    ``2 m (m - 1) / gamma``, and (when dissimilar rows exist) show a
    strictly negative log-linear tail slope.
    """
    r = np.asarray(report.reg_values)
    detail = {
        "r_min": float(r.min()),
        "r_nonnegative": bool(r.min() >= -1e-12),
        "max_increase": float(np.max(np.diff(r))) if r.size > 1 else 0.0,
        "bound_at_zero": bool(r[0] <= 2.0 * report.m * (report.m - 1) / report.gamma + 1e-12),
    }
    detail["nonincreasing"] = detail["max_increase"] <= 1e-10
    if report.stationary:
        detail["log_tail_slope"] = 0.0
        detail["tail_slope_negative"] = True  # energy is identically zero
    else:
        third = (2 * r.size) // 3
        tail = r[third:]
        t = (np.arange(r.size, dtype=np.float64) * report.step)[third:]
        keep = tail > 0
        slope = float(np.polyfit(t[keep], np.log(tail[keep]), 1)[0]) if keep.sum() >= 2 else 0.0
        detail["log_tail_slope"] = slope
        detail["tail_slope_negative"] = slope < 0.0
    detail["passed"] = (
        detail["r_nonnegative"]
        and detail["nonincreasing"]
        and detail["bound_at_zero"]
        and detail["tail_slope_negative"]
    )
    return detail


def check_balancedness(chain):
    """Largest balancedness residual
    ``max_l ||factors[l+1].T factors[l+1] - factors[l] factors[l].T||_max``."""
    if chain.depth < 2:
        raise ConfigError("balancedness needs depth >= 2")
    worst = 0.0
    for l in range(chain.depth - 1):
        a = chain.factors[l + 1].T @ chain.factors[l + 1]
        b = chain.factors[l] @ chain.factors[l].T
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst
