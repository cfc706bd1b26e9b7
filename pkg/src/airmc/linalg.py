"""Dense float64 matrices and the singular value decomposition contract.

Matrices are plain 2-D ``numpy.ndarray`` objects with ``float64`` entries.
Every public operation in the package validates its matrix arguments with
:func:`as_matrix`, so downstream code can assume finite float64 input.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError


def as_matrix(x, name="matrix"):
    """Coerce ``x`` to a finite float64 2-D array or raise.

    Raises ``ConfigError`` for wrong dimensionality and ``NumericalError``
    for NaN/Inf entries.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ConfigError(f"{name} must be a 2-D array with positive shape, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``x = u @ diag(sigma) @ v.T``.

    ``u`` is m-by-k and ``v`` is n-by-k with orthonormal columns,
    ``sigma`` is length k = min(m, n), non-negative and descending.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def svd(x):
    """Singular value decomposition of a dense matrix.

    Deterministic for a fixed input. Raises ``NumericalError`` if the
    underlying iteration fails to converge instead of returning garbage.
    """
    a = as_matrix(x, "svd input")
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd did not converge: {exc}") from exc
    return SvdResult(u=u, sigma=s, v=vh.T)

