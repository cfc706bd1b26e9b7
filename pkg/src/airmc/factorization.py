"""Deep matrix factorization: factor chains, the observation operator,
and the completion objective with its exact gradients.

The unknown matrix is represented as a product of factors
``xhat = factors[L-1] @ ... @ factors[0]`` with ``factors[l]`` of shape
``r[l+1] x r[l]``, ``r[0] = n`` and ``r[L] = m``. The objective is

    0.5 * ||y - observe(xhat)||**2
    + lam_r * energy of xhat under the row regularizer
    + lam_c * energy of xhat.T under the column regularizer
    + sum of fixed weighted Dirichlet energies,

and all gradients are computed analytically (chain rule through the
product plus the Laplacian quadratic-form gradients).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .linalg import as_matrix
from .regularizer import (
    COLUMN,
    ROW,
    AdaptiveRegularizer,
    Transformation,
    _grad_w_from,
    build_adjacency,
)


@dataclass(frozen=True)
class SamplingMask:
    """Set of observed entries of an ``rows``-by-``cols`` matrix.

    Index pairs are stored row-major sorted and free of duplicates, so the
    observation vector extracted by :func:`apply_mask` is well defined.
    """

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray

    @property
    def o(self):
        return int(self.row_idx.size)

    def observed_pairs(self):
        return list(zip(self.row_idx.tolist(), self.col_idx.tolist()))

    def complement(self):
        """Index arrays of the unobserved entries, row-major sorted."""
        grid = np.ones((self.rows, self.cols), dtype=bool)
        grid[self.row_idx, self.col_idx] = False
        return np.nonzero(grid)


def make_mask(rows, cols, observed):
    """Build a :class:`SamplingMask` from (i, j) pairs.

    Validates index ranges and rejects duplicates; pairs are sorted
    row-major regardless of input order.
    """
    if rows < 1 or cols < 1:
        raise ConfigError(f"mask shape must be positive, got {rows}x{cols}")
    pairs = np.asarray(list(observed), dtype=np.int64)
    if pairs.size == 0:
        raise ConfigError("mask must observe at least one entry")
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ConfigError("observed entries must be (row, col) pairs")
    i, j = pairs[:, 0], pairs[:, 1]
    if i.min() < 0 or i.max() >= rows or j.min() < 0 or j.max() >= cols:
        raise ConfigError("observed index out of range")
    linear = i * cols + j
    order = np.argsort(linear, kind="stable")
    linear = linear[order]
    if np.any(np.diff(linear) == 0):
        raise ConfigError("duplicate observed entries")
    return SamplingMask(rows=rows, cols=cols, row_idx=linear // cols, col_idx=linear % cols)


def mask_from_grid(grid):
    """Mask observing the True entries of a boolean matrix."""
    grid = np.asarray(grid, dtype=bool)
    if grid.ndim != 2:
        raise ConfigError("mask grid must be 2-D")
    if not grid.any():
        raise ConfigError("mask must observe at least one entry")
    i, j = np.nonzero(grid)
    return SamplingMask(rows=grid.shape[0], cols=grid.shape[1], row_idx=i, col_idx=j)


def apply_mask(mask, x):
    """Extract the observed entries of ``x`` in mask order."""
    x = as_matrix(x, "masked matrix")
    if x.shape != (mask.rows, mask.cols):
        raise ConfigError(f"matrix shape {x.shape} does not match mask shape {(mask.rows, mask.cols)}")
    return x[mask.row_idx, mask.col_idx]


def mask_adjoint(mask, values):
    """Adjoint of :func:`apply_mask`: scatter a vector back onto the grid."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (mask.o,):
        raise ConfigError(f"expected vector of length {mask.o}, got shape {values.shape}")
    out = np.zeros((mask.rows, mask.cols))
    out[mask.row_idx, mask.col_idx] = values
    return out


@dataclass
class FactorChain:
    """Ordered factors whose product is the completed matrix."""

    factors: list

    def __post_init__(self):
        if not self.factors:
            raise ConfigError("factor chain must contain at least one factor")
        self.factors = [as_matrix(f, f"factor {l}") for l, f in enumerate(self.factors)]
        for l in range(len(self.factors) - 1):
            if self.factors[l + 1].shape[1] != self.factors[l].shape[0]:
                raise ConfigError(
                    f"factor {l + 1} with shape {self.factors[l + 1].shape} does not chain "
                    f"onto factor {l} with shape {self.factors[l].shape}"
                )

    @property
    def depth(self):
        return len(self.factors)

    @property
    def shape(self):
        return self.factors[-1].shape[0], self.factors[0].shape[1]


def forward_product(chain):
    """Product ``factors[L-1] @ ... @ factors[0]``, highest index first."""
    acc = chain.factors[-1]
    for f in reversed(chain.factors[:-1]):
        acc = acc @ f
    return acc


def path_laplacian(dim):
    """Second-difference Laplacian of the path graph on ``dim`` nodes.

    Used as the built-in fixed regularizer standing in for total-variation
    smoothing along one matrix dimension.
    """
    if dim < 2:
        raise ConfigError("path laplacian needs dimension >= 2")
    lap = np.zeros((dim, dim))
    idx = np.arange(dim - 1)
    lap[idx, idx + 1] = -1.0
    lap[idx + 1, idx] = -1.0
    lap[np.arange(dim), np.arange(dim)] = 2.0
    lap[0, 0] = lap[-1, -1] = 1.0
    return lap


@dataclass
class ObjectiveConfig:
    """Completion objective: mask, observations, and regularizers.

    ``row_reg``/``col_reg`` are optional :class:`AdaptiveRegularizer`
    instances whose transformation tags must be ``row`` and ``column``
    respectively. ``fixed_laps`` holds ``(laplacian, side, weight)``
    triples with side ``"row"`` or ``"column"`` for non-adaptive
    baselines.
    """

    mask: SamplingMask
    y: np.ndarray
    row_reg: AdaptiveRegularizer | None = None
    col_reg: AdaptiveRegularizer | None = None
    fixed_laps: list = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.shape != (self.mask.o,):
            raise ConfigError(f"observation vector has shape {self.y.shape}, expected ({self.mask.o},)")
        if not np.all(np.isfinite(self.y)):
            raise ConfigError("observation vector contains non-finite entries")
        m, n = self.mask.rows, self.mask.cols
        if self.row_reg is not None:
            if self.row_reg.transform.tag != ROW:
                raise ConfigError("row_reg must carry the row transformation")
            if self.row_reg.w.shape[0] != m:
                raise ConfigError(f"row_reg parameter matrix must be {m}x{m}")
        if self.col_reg is not None:
            if self.col_reg.transform.tag != COLUMN:
                raise ConfigError("col_reg must carry the column transformation")
            if self.col_reg.w.shape[0] != n:
                raise ConfigError(f"col_reg parameter matrix must be {n}x{n}")
        checked = []
        for lap, side, weight in self.fixed_laps:
            lap = as_matrix(lap, "fixed laplacian")
            if side not in (ROW, COLUMN):
                raise ConfigError(f"fixed laplacian side must be 'row' or 'column', got {side!r}")
            dim = m if side == ROW else n
            if lap.shape != (dim, dim):
                raise ConfigError(f"fixed {side} laplacian must be {dim}x{dim}, got {lap.shape}")
            if np.max(np.abs(lap - lap.T)) > 1e-12:
                raise ConfigError("fixed laplacian must be symmetric")
            if not weight >= 0.0:
                raise ConfigError("fixed laplacian weight must be >= 0")
            checked.append((lap, side, float(weight)))
        self.fixed_laps = checked

    def adaptive_regs(self):
        return [r for r in (self.row_reg, self.col_reg) if r is not None]


@dataclass
class Evaluation:
    """One objective evaluation, optionally with gradients.

    ``reg_row``/``reg_col`` are the weighted penalty terms entering the
    loss; ``raw_row``/``raw_col`` the unweighted energies used by the
    stopping rule.
    """

    xhat: np.ndarray
    residual: np.ndarray
    loss: float
    fidelity: float
    reg_row: float
    reg_col: float
    fixed: float
    raw_row: float
    raw_col: float
    factor_grads: list | None = None
    w_row_grad: np.ndarray | None = None
    w_col_grad: np.ndarray | None = None
    row_pair: object = None
    col_pair: object = None

    @property
    def parts(self):
        return {
            "fidelity": self.fidelity,
            "reg_row": self.reg_row,
            "reg_col": self.reg_col,
            "fixed": self.fixed,
        }


def evaluate_objective(cfg, chain, with_grads=True):
    """Evaluate the completion objective and (optionally) all gradients.

    The factor gradients follow the chain rule through the product: with
    ``g`` the gradient of the loss with respect to ``xhat``,

        grad[l] = (factors[L-1] ... factors[l+1]).T @ g
                  @ (factors[l-1] ... factors[0]).T

    with empty products read as identities. Regularizer parameter
    gradients are the weighted energy gradients at the current ``xhat``.
    """
    factors = chain.factors
    depth = len(factors)
    if chain.shape != (cfg.mask.rows, cfg.mask.cols):
        raise ConfigError(f"chain produces {chain.shape}, mask expects {(cfg.mask.rows, cfg.mask.cols)}")

    # suffix[l] = factors[l-1] @ ... @ factors[0]; None stands for identity
    suffix = [None] * depth
    acc = None
    for l in range(1, depth):
        acc = factors[l - 1] if acc is None else factors[l - 1] @ acc
        suffix[l] = acc
    xhat = factors[-1] if depth == 1 else factors[-1] @ suffix[-1]

    residual = xhat[cfg.mask.row_idx, cfg.mask.col_idx] - cfg.y
    fidelity = 0.5 * float(residual @ residual)

    grad_x = None
    if with_grads:
        grad_x = np.zeros_like(xhat)
        grad_x[cfg.mask.row_idx, cfg.mask.col_idx] = residual

    reg_row = reg_col = 0.0
    raw_row = raw_col = 0.0
    w_row_grad = w_col_grad = None
    row_pair = col_pair = None

    if cfg.row_reg is not None:
        reg = cfg.row_reg
        row_pair = build_adjacency(reg.w, reg.variant)
        lx = row_pair.lap @ xhat
        raw_row = float(np.sum(xhat * lx))
        reg_row = reg.lam * raw_row
        if with_grads:
            grad_x += (2.0 * reg.lam) * lx
            w_row_grad = reg.lam * _grad_w_from(row_pair, reg.variant, xhat, raw_row)

    if cfg.col_reg is not None:
        reg = cfg.col_reg
        col_pair = build_adjacency(reg.w, reg.variant)
        xt = np.ascontiguousarray(xhat.T)
        lx = col_pair.lap @ xt
        raw_col = float(np.sum(xt * lx))
        reg_col = reg.lam * raw_col
        if with_grads:
            grad_x += (2.0 * reg.lam) * lx.T
            w_col_grad = reg.lam * _grad_w_from(col_pair, reg.variant, xt, raw_col)

    fixed = 0.0
    for lap, side, weight in cfg.fixed_laps:
        if side == ROW:
            lx = lap @ xhat
            fixed += weight * float(np.sum(xhat * lx))
            if with_grads:
                grad_x += (2.0 * weight) * lx
        else:
            xl = xhat @ lap
            fixed += weight * float(np.sum(xhat * xl))
            if with_grads:
                grad_x += (2.0 * weight) * xl

    loss = fidelity + reg_row + reg_col + fixed

    factor_grads = None
    if with_grads:
        factor_grads = [None] * depth
        p = grad_x
        for l in range(depth - 1, -1, -1):
            factor_grads[l] = p if suffix[l] is None else p @ suffix[l].T
            if l > 0:
                p = factors[l].T @ p

    return Evaluation(
        xhat=xhat,
        residual=residual,
        loss=loss,
        fidelity=fidelity,
        reg_row=reg_row,
        reg_col=reg_col,
        fixed=fixed,
        raw_row=raw_row,
        raw_col=raw_col,
        factor_grads=factor_grads,
        w_row_grad=w_row_grad,
        w_col_grad=w_col_grad,
        row_pair=row_pair,
        col_pair=col_pair,
    )


def total_loss(cfg, chain):
    """Objective value and its named parts."""
    ev = evaluate_objective(cfg, chain, with_grads=False)
    return ev.loss, ev.parts


def grad_chain(cfg, chain):
    """All parameter gradients of the objective.

    Returns ``(factor_grads, w_grads)`` where ``w_grads`` maps ``"row"``
    and ``"column"`` to the weighted parameter-matrix gradients (None when
    the corresponding regularizer is absent).
    """
    ev = evaluate_objective(cfg, chain, with_grads=True)
    return ev.factor_grads, {"row": ev.w_row_grad, "column": ev.w_col_grad}


def default_lambda(y, m, n):
    """Default regularizer weight: observed value range over the entry count.

    Chosen so the fidelity and regularization terms start at a similar
    order of magnitude.
    """
    y = np.asarray(y, dtype=np.float64)
    return float(y.max() - y.min()) / (m * n)


def air_objective(mask, y, variant="symmetrized-sum", lambda_row=None, lambda_col=None):
    """Objective with adaptive row and column regularizers.

    The regularizer parameter matrices here are placeholders; the trainer
    draws the actual initial values from its seed.
    """
    lam = default_lambda(y, mask.rows, mask.cols)
    lam_r = lam if lambda_row is None else float(lambda_row)
    lam_c = lam if lambda_col is None else float(lambda_col)
    row_reg = AdaptiveRegularizer(
        w=np.zeros((mask.rows, mask.rows)), variant=variant,
        transform=Transformation(ROW), lam=lam_r,
    )
    col_reg = AdaptiveRegularizer(
        w=np.zeros((mask.cols, mask.cols)), variant=variant,
        transform=Transformation(COLUMN), lam=lam_c,
    )
    return ObjectiveConfig(mask=mask, y=y, row_reg=row_reg, col_reg=col_reg)


def tv_objective(mask, y, weight_row=None, weight_col=None):
    """Objective with fixed path-graph Laplacians on both sides."""
    lam = default_lambda(y, mask.rows, mask.cols)
    w_r = lam if weight_row is None else float(weight_row)
    w_c = lam if weight_col is None else float(weight_col)
    return ObjectiveConfig(
        mask=mask,
        y=y,
        fixed_laps=[
            (path_laplacian(mask.rows), ROW, w_r),
            (path_laplacian(mask.cols), COLUMN, w_c),
        ],
    )


def chain_shapes(m, n, depth, width=None):
    """Factor shapes for an ``m``-by-``n`` product of the given depth."""
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    if width is None:
        width = min(m, n)
    if width < 1:
        raise ConfigError("width must be >= 1")
    dims = [n] + [width] * (depth - 1) + [m]
    return [(dims[l + 1], dims[l]) for l in range(depth)]


def _gaussian(rng, shape, variance):
    return rng.standard_normal(shape) * np.sqrt(variance)


def gaussian_init(m, n, depth=3, width=None, variance=1e-5, seed=0, row_w=False, col_w=False):
    """I.i.d. normal(0, variance) factors and regularizer parameter matrices.

    One seeded stream draws the factors in order and then, when requested,
    the row and column parameter matrices, so results are reproducible
    from the seed alone.
    """
    if not variance > 0:
        raise ConfigError("variance must be > 0")
    rng = np.random.default_rng(seed)
    chain = FactorChain([_gaussian(rng, s, variance) for s in chain_shapes(m, n, depth, width)])
    w_row = _gaussian(rng, (m, m), variance) if row_w else None
    w_col = _gaussian(rng, (n, n), variance) if col_w else None
    return chain, w_row, w_col


def _random_orthogonal(rng, dim):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def balanced_init(m, n, depth, singular_values, seed=0, rng=None):
    """Factor chain that is exactly balanced with a prescribed product SVD.

    Builds ``factors[l] = q[l+1] @ diag(s ** (1/depth)) @ q[l].T`` with
    independently sampled orthogonal blocks, which guarantees
    ``factors[l+1].T @ factors[l+1] == factors[l] @ factors[l].T`` and
    gives the product exactly the requested singular values.
    """
    s = np.asarray(singular_values, dtype=np.float64)
    k = min(m, n)
    if s.shape != (k,):
        raise ConfigError(f"need {k} singular values, got shape {s.shape}")
    if np.any(s < 0):
        raise ConfigError("singular values must be non-negative")
    if rng is None:
        rng = np.random.default_rng(seed)
    root = np.diag(s ** (1.0 / depth))
    qs = [_random_orthogonal(rng, n)[:, :k]]
    qs.extend(_random_orthogonal(rng, k) for _ in range(depth - 1))
    qs.append(_random_orthogonal(rng, m)[:, :k])
    return FactorChain([qs[l + 1] @ root @ qs[l].T for l in range(depth)])
