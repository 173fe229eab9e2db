"""Matrix-free linear operators for measurement and analysis transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.fft import dctn, idctn


@dataclass(frozen=True)
class LinearOperator:
    """A rows x cols map given by forward/adjoint closures.

    Operators are immutable after construction and safe for concurrent
    forward/adjoint calls; any transform workspace is created per call.
    """

    rows: int
    cols: int
    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    tag: str = "op"

    @property
    def shape(self):
        return (self.rows, self.cols)


@dataclass(frozen=True)
class GroupLayout:
    """Partition of the q analysis rows into contiguous groups.

    ``sizes[g]`` is the dimension of group g; ``potential_index[g]`` points
    into the model's potential list.  Scalar models are the special case of
    all sizes equal to one.
    """

    sizes: np.ndarray
    potential_index: np.ndarray
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=int)
        pidx = np.asarray(self.potential_index, dtype=int)
        if sizes.ndim != 1 or np.any(sizes < 1):
            raise ValueError("group sizes must be positive integers")
        if pidx.shape != sizes.shape:
            raise ValueError("one potential index per group is required")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "potential_index", pidx)
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        object.__setattr__(self, "starts", starts)

    @classmethod
    def scalar(cls, q, potential_index=None):
        if potential_index is None:
            potential_index = np.arange(q)
        return cls(np.ones(q, dtype=int), np.asarray(potential_index, dtype=int))

    @property
    def q(self) -> int:
        return int(self.sizes.sum())

    @property
    def ngroups(self) -> int:
        return len(self.sizes)

    def expand(self, per_group):
        """Repeat a per-group vector to per-coefficient length."""
        return np.repeat(np.asarray(per_group, dtype=float), self.sizes)

    def group_sum(self, per_coeff):
        """Sum a per-coefficient vector within each group."""
        return np.add.reduceat(np.asarray(per_coeff, dtype=float), self.starts)

    def norms(self, s):
        """Euclidean norm of each group subvector of s."""
        return np.sqrt(self.group_sum(np.asarray(s) ** 2))


def adjoint_gap(op: LinearOperator, rng=None, probes=20):
    """Largest normalized defect |<Au, v> - <u, A^T v>| over random probes."""
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(probes):
        u = rng.standard_normal(op.cols)
        v = rng.standard_normal(op.rows)
        au = op.forward(u)
        atv = op.adjoint(v)
        gap = abs(au @ v - u @ atv) / (np.linalg.norm(au) * np.linalg.norm(v) + 1.0)
        worst = max(worst, gap)
    return worst


def materialize(op: LinearOperator, max_cols=4096):
    """Dense matrix of the operator by probing with unit vectors."""
    if op.cols > max_cols:
        raise ValueError(f"refusing to materialize {op.cols} columns")
    m = np.empty((op.rows, op.cols))
    e = np.zeros(op.cols)
    for j in range(op.cols):
        e[j] = 1.0
        m[:, j] = op.forward(e)
        e[j] = 0.0
    return m


def make_dense(matrix) -> LinearOperator:
    """Wrap a rectangular array as an operator with exact products."""
    a = np.array(matrix, dtype=float)
    if a.ndim != 2:
        raise ValueError("a rectangular two-dimensional array is required")
    return LinearOperator(
        rows=a.shape[0],
        cols=a.shape[1],
        forward=lambda u, a=a: a @ u,
        adjoint=lambda v, a=a: a.T @ v,
        tag="dense",
    )


def make_identity(n) -> LinearOperator:
    return LinearOperator(n, n, lambda u: u.copy(), lambda v: v.copy(), tag="identity")


def make_finite_difference_2d(height, width, direction) -> LinearOperator:
    """First-order differences along one axis of an image.

    Boundary rows that would wrap around are omitted, so the output has
    height*(width-1) entries for "horiz" and (height-1)*width for "vert".
    """
    if height < 2 or width < 2:
        raise ValueError("image dimensions must be at least 2x2")
    if direction not in ("horiz", "vert"):
        raise ValueError("direction must be 'horiz' or 'vert'")
    n = height * width
    if direction == "horiz":
        rows = height * (width - 1)

        def forward(u):
            im = u.reshape(height, width)
            return (im[:, 1:] - im[:, :-1]).ravel()

        def adjoint(v):
            d = v.reshape(height, width - 1)
            out = np.zeros((height, width))
            out[:, 1:] += d
            out[:, :-1] -= d
            return out.ravel()

    else:
        rows = (height - 1) * width

        def forward(u):
            im = u.reshape(height, width)
            return (im[1:, :] - im[:-1, :]).ravel()

        def adjoint(v):
            d = v.reshape(height - 1, width)
            out = np.zeros((height, width))
            out[1:, :] += d
            out[:-1, :] -= d
            return out.ravel()

    return LinearOperator(rows, n, forward, adjoint, tag=f"diff-{direction}")


def make_isotropic_tv_2d(height, width) -> LinearOperator:
    """Paired (dx, dy) differences on the inner grid, interleaved per pixel.

    Output rows come in contiguous pairs so that size-2 group potentials on
    the pairs yield the isotropic total-variation penalty sum ||(dx, dy)||.
    """
    if height < 2 or width < 2:
        raise ValueError("image dimensions must be at least 2x2")
    n = height * width
    hh, ww = height - 1, width - 1
    rows = 2 * hh * ww

    def forward(u):
        im = u.reshape(height, width)
        dx = im[:hh, 1:] - im[:hh, :ww]
        dy = im[1:, :ww] - im[:hh, :ww]
        return np.stack([dx, dy], axis=-1).ravel()

    def adjoint(v):
        d = v.reshape(hh, ww, 2)
        out = np.zeros((height, width))
        out[:hh, 1:] += d[:, :, 0]
        out[:hh, :ww] -= d[:, :, 0]
        out[1:, :ww] += d[:, :, 1]
        out[:hh, :ww] -= d[:, :, 1]
        return out.ravel()

    return LinearOperator(rows, n, forward, adjoint, tag="tv-pairs")


def _haar_level_1d(a, inverse=False):
    """One orthonormal Haar split along the last axis (length must be even).

    The pairwise butterfly (p+q, p-q)/sqrt(2) is its own inverse; only the
    interleaving differs between analysis and synthesis.
    """
    m = a.shape[-1]
    half = m // 2
    if not inverse:
        p, q = a[..., 0::2], a[..., 1::2]
        return np.concatenate([(p + q), (p - q)], axis=-1) / np.sqrt(2.0)
    avg, det = a[..., :half], a[..., half:]
    out = np.empty_like(a)
    out[..., 0::2] = avg + det
    out[..., 1::2] = avg - det
    return out / np.sqrt(2.0)


def make_haar_wavelet_2d(side, levels=None) -> LinearOperator:
    """Orthonormal separable 2-D Haar transform with all coefficients.

    ``side`` must be a power of two; each level transforms the current
    low-pass block along both axes.  Defaults to log2(side) - 2 levels
    (at least one).
    """
    if side < 2 or side & (side - 1):
        raise ValueError("side must be a power of two")
    lmax = int(np.log2(side))
    if levels is None:
        levels = max(lmax - 2, 1)
    if not 1 <= levels <= lmax:
        raise ValueError(f"levels must lie in [1, {lmax}]")
    n = side * side

    def forward(u):
        im = u.reshape(side, side).copy()
        s = side
        for _ in range(levels):
            block = im[:s, :s]
            block = _haar_level_1d(block)
            block = _haar_level_1d(block.swapaxes(0, 1)).swapaxes(0, 1)
            im[:s, :s] = block
            s //= 2
        return im.ravel()

    def adjoint(c):
        im = c.reshape(side, side).copy()
        s = side >> (levels - 1)
        for _ in range(levels):
            block = im[:s, :s]
            block = _haar_level_1d(block.swapaxes(0, 1), inverse=True).swapaxes(0, 1)
            block = _haar_level_1d(block, inverse=True)
            im[:s, :s] = block
            s *= 2
        return im.ravel()

    return LinearOperator(n, n, forward, adjoint, tag=f"haar-{levels}")


def make_partial_orthotransform_2d(height, width, selected_columns) -> LinearOperator:
    """Selected transform-domain columns of the orthonormal 2-D DCT-II.

    The forward map computes the full normalized DCT of the image and keeps
    every coefficient in the chosen columns (column-major blocks, height
    entries per column), mirroring dense-column sampling of an orthonormal
    measurement transform.
    """
    cols = np.asarray(selected_columns, dtype=int)
    if cols.size != len(set(cols.tolist())):
        raise ValueError("selected columns must be distinct")
    if cols.size and (cols.min() < 0 or cols.max() >= width):
        raise ValueError("selected columns out of range")
    n = height * width
    m = height * cols.size

    def forward(u):
        c = dctn(u.reshape(height, width), type=2, norm="ortho")
        return c[:, cols].ravel(order="F")

    def adjoint(v):
        c = np.zeros((height, width))
        if cols.size:
            c[:, cols] = v.reshape(height, cols.size, order="F")
        return idctn(c, type=2, norm="ortho").ravel()

    return LinearOperator(m, n, forward, adjoint, tag=f"dct-cols-{cols.size}")


def stack(ops, weights=None) -> LinearOperator:
    """Vertical concatenation of operators with per-block scalar weights."""
    ops = list(ops)
    if not ops:
        raise ValueError("at least one operator is required")
    cols = ops[0].cols
    if any(op.cols != cols for op in ops):
        raise ValueError("all stacked operators must share their column count")
    if weights is None:
        weights = np.ones(len(ops))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(ops),):
        raise ValueError("one weight per block is required")
    rows = int(sum(op.rows for op in ops))
    offsets = np.concatenate(([0], np.cumsum([op.rows for op in ops])))

    def forward(u):
        return np.concatenate([w * op.forward(u) for op, w in zip(ops, weights)])

    def adjoint(v):
        out = np.zeros(cols)
        for op, w, lo, hi in zip(ops, weights, offsets[:-1], offsets[1:]):
            out += w * op.adjoint(v[lo:hi])
        return out

    return LinearOperator(rows, cols, forward, adjoint, tag="stack")
