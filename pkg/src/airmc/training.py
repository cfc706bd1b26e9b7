"""Parameter updates and the training loop.

Two optimizers are provided: bias-corrected Adam (the practical default)
and plain gradient descent, which doubles as an explicit-Euler integrator
of the gradient flow for the dynamics checks. The loop trains all
parameters jointly (factors plus both adjacency parameter matrices when
present), applies the regularizer-delta stopping rule, and records a
trajectory log.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .factorization import (
    FactorChain,
    balanced_init,
    chain_shapes,
    evaluate_objective,
    _gaussian,
)
from .linalg import svd

STOP_THRESHOLD = "threshold"
STOP_MAX_ITERS = "max_iters"
STOP_DIVERGENCE = "divergence"
STOP_OBS_TARGET = "obs_mse_target"

# The regularizer-delta test is suppressed for this many check strides so
# the large literal default threshold cannot fire on the initial plateau.
WARMUP_CHECKS = 10


@dataclass
class AdamState:
    """Adam moment accumulators plus hyperparameters.

    ``work`` holds per-parameter scratch buffers so an update allocates
    only the returned parameter arrays.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    work: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("adam lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("adam eps must be > 0")


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Fresh zero-moment state matching the parameter shapes."""
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        t=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        work=[np.empty_like(p) for p in params],
    )


def adam_step(state, params, grads):
    """One bias-corrected Adam update.

    Moment buffers are updated in place; new parameter arrays are
    returned. Deterministic. The update is evaluated as
    ``lr * sqrt(b2c) / b1c * m / (sqrt(v) + eps * sqrt(b2c))`` with
    ``b1c``/``b2c`` the bias corrections, which equals the textbook
    bias-corrected form exactly.
    """
    state.t += 1
    b1 = state.beta1
    b2 = state.beta2
    b1c = 1.0 - b1 ** state.t
    b2c = 1.0 - b2 ** state.t
    scale = state.lr * np.sqrt(b2c) / b1c
    eps_t = state.eps * np.sqrt(b2c)
    out = []
    for p, g, m, v, s in zip(params, grads, state.m, state.v, state.work):
        np.multiply(m, b1, out=m)
        np.multiply(g, 1.0 - b1, out=s)
        np.add(m, s, out=m)
        np.multiply(g, g, out=s)
        np.multiply(s, 1.0 - b2, out=s)
        np.multiply(v, b2, out=v)
        np.add(v, s, out=v)
        np.sqrt(v, out=s)
        np.add(s, eps_t, out=s)
        np.divide(m, s, out=s)
        np.multiply(s, scale, out=s)
        out.append(np.subtract(p, s))
    return out, state


def gd_step(params, grads, step):
    """Plain gradient descent, i.e. one explicit Euler step of the flow."""
    if not step > 0:
        raise ConfigError("gd step must be > 0")
    return [p - step * g for p, g in zip(params, grads)]


@dataclass
class InitSpec:
    """How to draw the initial parameters.

    ``gaussian`` draws every entry i.i.d. normal(0, variance);
    ``balanced`` builds an exactly balanced chain with the given product
    singular values. Adjacency parameter matrices (when the objective has
    adaptive regularizers) are always drawn normal(0, variance) after the
    factors, from the same seeded stream.
    """

    kind: str = "gaussian"
    depth: int = 3
    width: int | None = None
    variance: float = 1e-5
    singular_values: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "balanced"):
            raise ConfigError(f"unknown init kind {self.kind!r}")
        if self.kind == "balanced" and self.singular_values is None:
            raise ConfigError("balanced init needs singular values")
        if not self.variance > 0:
            raise ConfigError("init variance must be > 0")


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("adam", "gd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate / step must be > 0")


@dataclass
class TrainConfig:
    objective: object
    init: InitSpec
    optimizer: OptimizerSpec
    max_iters: int
    delta: float
    check_every: int = 100
    log_every: int = 100
    track_sigmas: int = 0
    snapshot_iters: tuple = ()
    obs_mse_target: float | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not self.delta >= 0:
            raise ConfigError("delta must be >= 0")
        if self.check_every < 1 or self.log_every < 1:
            raise ConfigError("strides must be >= 1")
        if self.track_sigmas < 0:
            raise ConfigError("track_sigmas must be >= 0")


@dataclass
class TrajectoryRecord:
    iteration: int
    loss: float
    fidelity: float
    reg_row: float
    reg_col: float
    mse_obs: float
    mse_unobs: float
    sigmas: tuple


@dataclass
class TrajectoryLog:
    """Per-iteration metrics plus optional adjacency snapshots."""

    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (iteration, side, adjacency)

    def column(self, name):
        return [getattr(r, name) for r in self.records]


@dataclass
class TrainResult:
    chain: FactorChain
    row_reg: object
    col_reg: object
    log: TrajectoryLog
    stop_reason: str
    iterations: int


def _init_parameters(cfg):
    obj = cfg.objective
    m, n = obj.mask.rows, obj.mask.cols
    spec = cfg.init
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian":
        chain = FactorChain(
            [_gaussian(rng, s, spec.variance) for s in chain_shapes(m, n, spec.depth, spec.width)]
        )
    else:
        chain = balanced_init(m, n, spec.depth, spec.singular_values, rng=rng)
    row_reg = col_reg = None
    if obj.row_reg is not None:
        row_reg = replace(obj.row_reg, w=_gaussian(rng, (m, m), spec.variance))
    if obj.col_reg is not None:
        col_reg = replace(obj.col_reg, w=_gaussian(rng, (n, n), spec.variance))
    return chain, row_reg, col_reg


def train(cfg, truth=None):
    """Run the completion until a stopping condition fires.

    Stops on (a) the regularizer-delta rule (both adaptive regularizers
    present, consecutive check-stride energies within ``delta``, after a
    warm-up of ``10 * check_every`` iterations), (b) ``max_iters``,
    (c) a non-finite loss (divergence; partial results are returned), or
    (d) the optional observed-MSE target. Bit-reproducible for a fixed
    config and seed.
    """
    chain, row_reg, col_reg = _init_parameters(cfg)
    live = replace(cfg.objective, row_reg=row_reg, col_reg=col_reg)

    unobs = None
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        if truth.shape != (live.mask.rows, live.mask.cols):
            raise ConfigError("ground truth shape does not match the mask")
        ui, uj = live.mask.complement()
        unobs = (ui, uj) if ui.size else None

    def params_of():
        out = list(chain.factors)
        if row_reg is not None:
            out.append(row_reg.w)
        if col_reg is not None:
            out.append(col_reg.w)
        return out

    def write_back(new):
        k = chain.depth
        chain.factors[:] = new[:k]
        if row_reg is not None:
            row_reg.w = new[k]
            k += 1
        if col_reg is not None:
            col_reg.w = new[k]

    adam = adam_init(params_of(), lr=cfg.optimizer.lr) if cfg.optimizer.kind == "adam" else None
    log = TrajectoryLog()
    snapshot_at = set(int(i) for i in cfg.snapshot_iters)
    both_regs = row_reg is not None and col_reg is not None
    prev_check = None
    stop_reason = STOP_MAX_ITERS
    completed = 0

    def record(it, ev):
        mse_obs = float(np.mean(np.square(ev.residual)))
        mse_unobs = math.nan
        if unobs is not None:
            d = ev.xhat[unobs] - truth[unobs]
            mse_unobs = float(np.mean(np.square(d)))
        sig = ()
        if cfg.track_sigmas > 0:
            sig = tuple(float(s) for s in svd(ev.xhat).sigma[: cfg.track_sigmas])
        log.records.append(
            TrajectoryRecord(
                iteration=it,
                loss=float(ev.loss),
                fidelity=float(ev.fidelity),
                reg_row=float(ev.reg_row),
                reg_col=float(ev.reg_col),
                mse_obs=mse_obs,
                mse_unobs=mse_unobs,
                sigmas=sig,
            )
        )

    snapped = set()

    def snapshot(it, ev):
        if it in snapped:
            return
        snapped.add(it)
        if row_reg is not None and ev.row_pair is not None:
            log.snapshots.append((it, "row", ev.row_pair.a.copy()))
        if col_reg is not None and ev.col_pair is not None:
            log.snapshots.append((it, "col", ev.col_pair.a.copy()))

    stopped = False
    ev = None
    for _ in range(cfg.max_iters):
        ev = evaluate_objective(live, chain, with_grads=True)
        if not math.isfinite(ev.loss):
            stop_reason = STOP_DIVERGENCE
            stopped = True
            break
        if completed % cfg.log_every == 0:
            record(completed, ev)
        if completed in snapshot_at:
            snapshot(completed, ev)
        if completed % cfg.check_every == 0 and completed > 0:
            if cfg.obs_mse_target is not None:
                if float(np.mean(np.square(ev.residual))) <= cfg.obs_mse_target:
                    stop_reason = STOP_OBS_TARGET
                    stopped = True
                    break
            if both_regs and prev_check is not None and completed >= WARMUP_CHECKS * cfg.check_every:
                dr = abs(ev.raw_row - prev_check[0])
                dc = abs(ev.raw_col - prev_check[1])
                if dr < cfg.delta and dc < cfg.delta:
                    stop_reason = STOP_THRESHOLD
                    stopped = True
                    break
            prev_check = (ev.raw_row, ev.raw_col)

        grads = list(ev.factor_grads)
        if row_reg is not None:
            grads.append(ev.w_row_grad)
        if col_reg is not None:
            grads.append(ev.w_col_grad)
        params = params_of()
        if adam is not None:
            params, adam = adam_step(adam, params, grads)
        else:
            params = gd_step(params, grads, cfg.optimizer.lr)
        write_back(params)
        completed += 1

    if not stopped:
        ev = evaluate_objective(live, chain, with_grads=False)
        if not math.isfinite(ev.loss):
            stop_reason = STOP_DIVERGENCE
    if ev is not None and (not log.records or log.records[-1].iteration != completed):
        if math.isfinite(ev.loss):
            record(completed, ev)
        if completed in snapshot_at:
            snapshot(completed, ev)

    return TrainResult(
        chain=chain,
        row_reg=row_reg,
        col_reg=col_reg,
        log=log,
        stop_reason=stop_reason,
        iterations=completed,
    )
