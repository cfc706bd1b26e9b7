"""Completion quality metrics."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .linalg import as_matrix

NMAE_ABSOLUTE = "absolute"
NMAE_SQUARED = "squared"


def _split_errors(xhat, truth, mask):
    xhat = as_matrix(xhat, "estimate")
    truth = as_matrix(truth, "ground truth")
    if xhat.shape != truth.shape:
        raise ConfigError(f"estimate shape {xhat.shape} does not match truth shape {truth.shape}")
    if xhat.shape != (mask.rows, mask.cols):
        raise ConfigError("mask shape does not match the matrices")
    ui, uj = mask.complement()
    obs = xhat[mask.row_idx, mask.col_idx] - truth[mask.row_idx, mask.col_idx]
    unobs = xhat[ui, uj] - truth[ui, uj]
    return obs, unobs


def nmae(xhat, truth, mask, variant=NMAE_ABSOLUTE):
    """Normalized mean error over the unobserved entries.

    The ``absolute`` variant (default) sums absolute errors, the
    ``squared`` variant sums squared errors; both divide by the number of
    unobserved entries times the ground-truth value range.
    """
    if variant not in (NMAE_ABSOLUTE, NMAE_SQUARED):
        raise ConfigError(f"unknown nmae variant {variant!r}")
    _, unobs = _split_errors(xhat, truth, mask)
    if unobs.size == 0:
        raise ConfigError("nmae needs at least one unobserved entry")
    truth = np.asarray(truth, dtype=np.float64)
    value_range = float(truth.max() - truth.min())
    if value_range == 0.0:
        raise ConfigError("ground truth value range is zero")
    if variant == NMAE_ABSOLUTE:
        total = float(np.sum(np.abs(unobs)))
    else:
        total = float(np.sum(np.square(unobs)))
    return total / (unobs.size * value_range)


def mse_split(xhat, truth, mask):
    """Mean squared error on the observed and unobserved entries."""
    obs, unobs = _split_errors(xhat, truth, mask)
    if obs.size == 0 or unobs.size == 0:
        raise ConfigError("both observed and unobserved entry sets must be non-empty")
    return float(np.mean(np.square(obs))), float(np.mean(np.square(unobs)))


@dataclass
class EvalResult:
    """Final metrics of one completion run, serialized by write_outputs.

    ``nmae`` and ``mse_unobserved`` are None when no ground truth was
    supplied; present metrics must be finite and non-negative.
    """

    nmae: float | None
    nmae_variant: str
    mse_observed: float | None
    mse_unobserved: float | None
    iterations: int
    stop_reason: str
    config: dict

    def __post_init__(self):
        for name in ("nmae", "mse_observed", "mse_unobserved"):
            v = getattr(self, name)
            if v is None:
                continue
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")

    def to_dict(self):
        return {
            "nmae": self.nmae,
            "nmae_variant": self.nmae_variant,
            "mse_observed": self.mse_observed,
            "mse_unobserved": self.mse_unobserved,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "config": self.config,
        }
