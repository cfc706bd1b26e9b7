"""File formats, mask generation, and synthetic data.

Stable on-disk contracts:

* matrices: headerless CSV of comma-separated numbers, or plain-text PGM
  (magic ``P2``) with pixel values scaled into [0, 1];
* run results: a single JSON object with keys ``nmae``, ``nmae_variant``,
  ``mse_observed``, ``mse_unobserved``, ``iterations``, ``stop_reason``,
  ``config``;
* trajectories: CSV with header
  ``iter,loss,fidelity,reg_row,reg_col,mse_obs,mse_unobs,sigma_1..sigma_K``;
* adjacency snapshots: CSV matrices named ``A_row_<iter>.csv`` /
  ``A_col_<iter>.csv``.
"""

import json
import math
import os

import numpy as np

from .errors import ConfigError, DataFormatError
from .factorization import mask_from_grid
from .linalg import as_matrix

FORMAT_CSV = "csv"
FORMAT_PGM = "pgm"


def gen_mask(kind, rows, cols, rate=0.0, seed=0, top=0, left=0, height=0, width=0, path=None):
    """Generate a :class:`SamplingMask` for one of the missing patterns.

    ``random`` removes exactly ``floor(rate * rows * cols)`` entries,
    chosen uniformly without replacement (deterministic per seed).
    ``patch`` removes the given rectangle. ``texture`` and ``file`` read a
    0/1 matrix from ``path`` and remove the entries where it is 0.
    The returned mask lists the observed complement.
    """
    total = rows * cols
    if kind == "random":
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"missing rate must lie in [0, 1), got {rate}")
        n_missing = int(math.floor(rate * total))
        if n_missing >= total:
            raise ConfigError("mask would remove every entry")
        grid = np.ones((rows, cols), dtype=bool)
        if n_missing:
            rng = np.random.default_rng(seed)
            missing = rng.choice(total, size=n_missing, replace=False)
            grid.flat[missing] = False
        return mask_from_grid(grid)
    if kind == "patch":
        if height < 1 or width < 1:
            raise ConfigError("patch must have positive height and width")
        if top < 0 or left < 0 or top + height > rows or left + width > cols:
            raise ConfigError("patch rectangle falls outside the matrix")
        if height == rows and width == cols:
            raise ConfigError("mask would remove every entry")
        grid = np.ones((rows, cols), dtype=bool)
        grid[top : top + height, left : left + width] = False
        return mask_from_grid(grid)
    if kind in ("texture", "file"):
        fmt = FORMAT_PGM if str(path).endswith(".pgm") else FORMAT_CSV
        values = load_matrix(path, fmt)
        if values.shape != (rows, cols):
            raise ConfigError(
                f"mask file shape {values.shape} does not match data shape {(rows, cols)}"
            )
        if not np.all((values == 0.0) | (values == 1.0)):
            raise ConfigError("mask file must contain only 0 and 1 entries")
        grid = values != 0.0
        if not grid.any():
            raise ConfigError("mask would remove every entry")
        return mask_from_grid(grid)
    raise ConfigError(f"unknown mask kind {kind!r}")


def synth_lowrank(m, n, rank, seed=0):
    """Random matrix of exact numerical rank, rescaled to unit max entry."""
    if rank < 1 or rank > min(m, n):
        raise ConfigError(f"rank must lie in [1, {min(m, n)}], got {rank}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
    return x / np.max(np.abs(x))


def synth_blocks(m, n, grid_rows, grid_cols, levels, seed=0):
    """Piecewise-constant block matrix with quantized values.

    The matrix is split into a ``grid_rows``-by-``grid_cols`` grid of equal
    blocks; each block takes one of ``levels`` equispaced values in [0, 1].
    Rows and columns inside a block stripe are duplicated by construction.
    """
    if grid_rows < 1 or grid_cols < 1 or m % grid_rows != 0 or n % grid_cols != 0:
        raise ConfigError(f"grid {grid_rows}x{grid_cols} does not divide shape {m}x{n}")
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    rng = np.random.default_rng(seed)
    palette = np.linspace(0.0, 1.0, levels)
    values = palette[rng.integers(0, levels, size=(grid_rows, grid_cols))]
    return np.kron(values, np.ones((m // grid_rows, n // grid_cols)))


def _parse_csv(path):
    rows = []
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split(",")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} fields, got {len(tokens)}")
            row = []
            for tok in tokens:
                try:
                    v = float(tok)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: non-numeric field {tok.strip()!r}") from None
                if not math.isfinite(v):
                    raise DataFormatError(f"{path}:{lineno}: non-finite value {tok.strip()!r}")
                row.append(v)
            rows.append(row)
    if not rows:
        raise DataFormatError(f"{path}: empty matrix file")
    return np.array(rows)


def _parse_pgm(path):
    tokens = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0]
            tokens.extend((tok, lineno) for tok in line.split())
    if not tokens:
        raise DataFormatError(f"{path}: empty file")
    magic, lineno = tokens[0]
    if magic != "P2":
        raise DataFormatError(f"{path}:{lineno}: unsupported magic number {magic!r} (want P2)")

    def take_int(idx, what):
        if idx >= len(tokens):
            raise DataFormatError(f"{path}: truncated file, missing {what}")
        tok, ln = tokens[idx]
        try:
            return int(tok)
        except ValueError:
            raise DataFormatError(f"{path}:{ln}: bad {what} {tok!r}") from None

    width = take_int(1, "width")
    height = take_int(2, "height")
    maxval = take_int(3, "maxval")
    if width < 1 or height < 1:
        raise DataFormatError(f"{path}: bad image dimensions {width}x{height}")
    if maxval < 1:
        raise DataFormatError(f"{path}: maxval must be >= 1, got {maxval}")
    need = width * height
    if len(tokens) - 4 != need:
        raise DataFormatError(f"{path}: expected {need} pixels, found {len(tokens) - 4}")
    pixels = np.empty(need)
    for i in range(need):
        tok, ln = tokens[4 + i]
        try:
            v = int(tok)
        except ValueError:
            raise DataFormatError(f"{path}:{ln}: non-numeric pixel {tok!r}") from None
        if v < 0 or v > maxval:
            raise DataFormatError(f"{path}:{ln}: pixel value {v} outside [0, {maxval}]")
        pixels[i] = v
    return pixels.reshape(height, width) / maxval


def load_matrix(path, fmt=FORMAT_CSV):
    """Read a matrix from disk; raises ``DataFormatError`` with the line
    number on malformed input. PGM values are scaled into [0, 1]."""
    if fmt == FORMAT_CSV:
        return _parse_csv(path)
    if fmt == FORMAT_PGM:
        return _parse_pgm(path)
    raise ConfigError(f"unknown matrix format {fmt!r}")


def save_matrix(path, x, fmt=FORMAT_CSV):
    """Write a matrix; CSV round-trips exactly through :func:`load_matrix`."""
    x = as_matrix(x, "matrix to save")
    if fmt == FORMAT_CSV:
        lines = [",".join(repr(float(v)) for v in row) for row in x]
        _write_text(path, "\n".join(lines) + "\n")
    elif fmt == FORMAT_PGM:
        maxval = 255
        pixels = np.clip(np.rint(x * maxval), 0, maxval).astype(int)
        lines = ["P2", f"{x.shape[1]} {x.shape[0]}", str(maxval)]
        lines.extend(" ".join(str(v) for v in row) for row in pixels)
        _write_text(path, "\n".join(lines) + "\n")
    else:
        raise ConfigError(f"unknown matrix format {fmt!r}")


def _write_text(path, text):
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _fmt(v):
    return repr(float(v))


def trajectory_csv_text(log, track_sigmas=None):
    """Render a trajectory log as CSV text (header always present)."""
    if track_sigmas is None:
        track_sigmas = len(log.records[0].sigmas) if log.records else 0
    header = ["iter", "loss", "fidelity", "reg_row", "reg_col", "mse_obs", "mse_unobs"]
    header.extend(f"sigma_{k + 1}" for k in range(track_sigmas))
    lines = [",".join(header)]
    for r in log.records:
        row = [
            str(r.iteration),
            _fmt(r.loss),
            _fmt(r.fidelity),
            _fmt(r.reg_row),
            _fmt(r.reg_col),
            _fmt(r.mse_obs),
            _fmt(r.mse_unobs),
        ]
        sig = list(r.sigmas[:track_sigmas])
        sig.extend([math.nan] * (track_sigmas - len(sig)))
        row.extend(_fmt(s) for s in sig)
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_outputs(result, log, json_path=None, trajectory_path=None, snapshot_dir=None):
    """Write the result JSON, the trajectory CSV, and adjacency snapshots."""
    if json_path is not None:
        _write_text(json_path, json.dumps(result.to_dict(), indent=2) + "\n")
    if trajectory_path is not None:
        _write_text(trajectory_path, trajectory_csv_text(log))
    if snapshot_dir is not None and log.snapshots:
        os.makedirs(snapshot_dir, exist_ok=True)
        for iteration, side, a in log.snapshots:
            save_matrix(os.path.join(snapshot_dir, f"A_{side}_{iteration}.csv"), a)
