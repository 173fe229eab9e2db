"""Reusable model builders: reference instances, image models, design setups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imaging
from .linops import (
    GroupLayout,
    make_dense,
    make_finite_difference_2d,
    make_haar_wavelet_2d,
    make_isotropic_tv_2d,
    make_partial_orthotransform_2d,
    stack,
)
from .potentials import PotentialSpec
from .varinf import ModelSpec

# Default image-prior scales, calibrated for unit-range images at desk
# resolution (the wavelet/difference ratio 7:4 follows common practice for
# this prior family; the overall scale was tuned on the synthetic corpus).
TAU_A = 0.07 * 256
TAU_R = 0.04 * 256


def one_dim_model(y=0.0, tau=1.0, sigma2=1.0, potential=None):
    """The scalar reference instance X = B = [1]."""
    pot = potential or PotentialSpec.laplace(tau)
    return ModelSpec(
        X=make_dense([[1.0]]),
        B=make_dense([[1.0]]),
        y=np.array([float(y)]),
        sigma2=float(sigma2),
        potentials=[pot],
        layout=GroupLayout.scalar(1, np.zeros(1, dtype=int)),
    )


def random_gaussian_model(n=8, m=6, q=None, seed=0, tau=1.0, sigma2=0.5,
                          y_scale=1.0):
    """Dense Gaussian instance with scalar Laplace potentials.

    B is square-plus-diagonal so the precision map stays positive definite
    for any positive widths.
    """
    rng = np.random.default_rng(seed)
    q = n if q is None else q
    x = rng.standard_normal((m, n)) / np.sqrt(m)
    b = rng.standard_normal((q, n)) / np.sqrt(q)
    if q >= n:
        b[:n] += np.eye(n)
    y = y_scale * rng.standard_normal(m)
    return ModelSpec(
        X=make_dense(x),
        B=make_dense(b),
        y=y,
        sigma2=sigma2,
        potentials=[PotentialSpec.laplace(tau)],
        layout=GroupLayout.scalar(q, np.zeros(q, dtype=int)),
    )


def student_t_matched(tau_laplace, nu):
    """Student-t spec with the same variance as a Laplace of scale tau.

    The Laplace variance 2/tau^2 equals the Student-t variance
    alpha/(nu - 2) for alpha = 2 (nu - 2)/tau^2, i.e. scale
    tau_t = nu tau^2 / (2 (nu - 2)); defined for nu > 2.
    """
    if nu <= 2:
        raise ValueError("variance matching needs nu > 2")
    alpha = 2.0 * (nu - 2.0) / tau_laplace ** 2
    return PotentialSpec.student_t(nu / alpha, nu)


def grid_to_band(width, columns):
    """Map measurement-grid columns to transform-domain frequency bands.

    The grid is laid out like a centered spectrum: its middle columns
    carry the lowest frequencies and the edges the highest, so designs
    that fill the grid from the center outwards are genuine low-pass
    designs.  Grid column c at signed center offset o (half-integer for
    even widths) maps to band 2*|o| rounded to keep the map bijective.
    """
    center = (width - 1) / 2.0
    out = []
    for c in columns:
        o = c - center
        k = int(abs(o) - 0.5) if width % 2 == 0 else int(round(abs(o)))
        if width % 2 == 0:
            band = 2 * k + (1 if o > 0 else 0)
        else:
            band = max(2 * k - (1 if o > 0 else 0), 0)
        out.append(band)
    return out


def image_operators(side, columns, *, tau_a=TAU_A, tau_r=TAU_R,
                    grouped_tv=True, potential="laplace", nu=None, levels=None,
                    centered=True):
    """Measurement and analysis operators of the standard image model.

    X selects transform-domain columns of the orthonormal 2-D DCT (in the
    given order, so measurement vectors concatenate consistently); with
    ``centered`` the given columns are measurement-grid positions run
    through grid_to_band first.  B stacks the full Haar wavelet (scale
    tau_a) with either paired first-differences as size-2 groups
    (isotropic TV, scale tau_r) or the two separate scalar difference
    blocks.
    """
    cols = grid_to_band(side, columns) if centered else list(columns)
    x_op = make_partial_orthotransform_2d(side, side, cols)
    haar = make_haar_wavelet_2d(side, levels=levels)
    if potential == "laplace":
        pot_a, pot_r = PotentialSpec.laplace(tau_a), PotentialSpec.laplace(tau_r)
    elif potential == "student_t":
        if nu is None:
            raise ValueError("student_t image model needs nu")
        pot_a, pot_r = student_t_matched(tau_a, nu), student_t_matched(tau_r, nu)
    else:
        raise ValueError(f"unknown potential family {potential!r}")

    if grouped_tv:
        tv = make_isotropic_tv_2d(side, side)
        b_op = stack([haar, tv])
        npairs = tv.rows // 2
        sizes = np.concatenate([np.ones(haar.rows, int), np.full(npairs, 2)])
        pidx = np.concatenate([np.zeros(haar.rows, int), np.ones(npairs, int)])
    else:
        dx = make_finite_difference_2d(side, side, "horiz")
        dy = make_finite_difference_2d(side, side, "vert")
        b_op = stack([haar, dx, dy])
        q = b_op.rows
        sizes = np.ones(q, int)
        pidx = np.concatenate(
            [np.zeros(haar.rows, int), np.ones(dx.rows + dy.rows, int)]
        )
    layout = GroupLayout(sizes, pidx)
    return x_op, b_op, [pot_a, pot_r], layout


def image_model(side, columns, y, sigma2, **op_kwargs):
    x_op, b_op, pots, layout = image_operators(side, columns, **op_kwargs)
    return ModelSpec(X=x_op, B=b_op, y=y, sigma2=sigma2, potentials=pots,
                     layout=layout)


def simulate_image_model(image, columns, seed=0, sigma2=None, noise=True,
                         **op_kwargs):
    """Build the image model and simulate its measurements.

    ``image`` is a [0, 255] array, rescaled internally to unit range.
    ``sigma2`` defaults to 1e-3 times the mean signal power.  Returns
    (model, u_true).
    """
    img = np.asarray(image, dtype=float) / 255.0
    side = img.shape[0]
    if img.shape != (side, side):
        raise ValueError("a square image is required")
    u_true = img.ravel()
    if sigma2 is None:
        sigma2 = 1e-3 * float(np.mean(u_true ** 2))
    x_op, b_op, pots, layout = image_operators(side, columns, **op_kwargs)
    rng = np.random.default_rng(seed)
    y = x_op.forward(u_true)
    if noise:
        y = y + np.sqrt(sigma2) * rng.standard_normal(x_op.rows)
    model = ModelSpec(X=x_op, B=b_op, y=y, sigma2=sigma2, potentials=pots,
                      layout=layout)
    return model, u_true


def benchmark_image_model(side=16, seed=0, column_frac=0.5, grouped_tv=False,
                          sigma2=None, **op_kwargs):
    """Seeded synthetic-image instance used across the test benches."""
    img = imaging.synth_smooth_edges(side, seed=seed)
    rng = np.random.default_rng(seed + 1)
    ncols = max(int(round(column_frac * side)), 1)
    columns = sorted(rng.choice(side, size=ncols, replace=False).tolist())
    return simulate_image_model(
        img, columns, seed=seed + 2, sigma2=sigma2, grouped_tv=grouped_tv,
        **op_kwargs,
    )


@dataclass
class ImageDesignProblem:
    """Design-loop adapter: models and candidate blocks for column sets."""

    side: int
    sigma2: float
    tau_a: float = TAU_A
    tau_r: float = TAU_R
    grouped_tv: bool = True
    potential: str = "laplace"
    nu: float | None = None

    def model(self, columns, y):
        return image_model(
            self.side, columns, y, self.sigma2, tau_a=self.tau_a,
            tau_r=self.tau_r, grouped_tv=self.grouped_tv,
            potential=self.potential, nu=self.nu,
        )

    def column_operator(self, c):
        return make_partial_orthotransform_2d(
            self.side, self.side, grid_to_band(self.side, [c])
        )


def planted_sparse_instance(n=128, m=64, k=5, noise=1e-3, seed=0, tau=1.0,
                            noise_headroom=5.0):
    """Sparse-recovery instance: scaled orthonormal rows, k-sparse truth.

    X takes m rows of a random n-dimensional orthonormal basis, scaled by
    sqrt(n/m) so columns have unit norm on average.  The model's noise
    variance carries conservative headroom over the simulation noise, the
    usual practice for evidence-driven support selection (at the exact
    noise level roughly a third of the pure-noise coordinates would pass
    the per-coordinate keep test by chance).  Returns
    (model, u_true, support).
    """
    rng = np.random.default_rng(seed)
    qmat, _ = np.linalg.qr(rng.standard_normal((n, n)))
    x = qmat[:m] * np.sqrt(n / m)
    u_true = np.zeros(n)
    support = np.sort(rng.choice(n, size=k, replace=False))
    u_true[support] = rng.uniform(1.0, 2.0, size=k) * rng.choice([-1.0, 1.0], size=k)
    y = x @ u_true + noise * rng.standard_normal(m)
    model = ModelSpec(
        X=make_dense(x),
        B=make_dense(np.eye(n)),
        y=y,
        sigma2=(noise_headroom * noise) ** 2,
        potentials=[PotentialSpec.laplace(tau)],
        layout=GroupLayout.scalar(n, np.zeros(n, dtype=int)),
    )
    return model, u_true, support
