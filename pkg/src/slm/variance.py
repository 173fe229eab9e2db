"""Marginal variance estimation: dense exact oracle and Lanczos recurrences."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import NumericalError

DENSE_GUARD = 4096


@dataclass
class LanczosFactorization:
    """State of a Krylov run against the posterior precision map.

    ``q_basis`` holds the orthonormal vectors, (alpha, beta) the projected
    tridiagonal, (e, d) the main and sub diagonal of its bidiagonal
    Cholesky factor, ``v_running`` the columns feeding the running variance
    estimates ``zhat``.  ``ortho_drift`` is the largest observed defect of
    the basis Gram matrix from the identity.
    """

    q_basis: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    e: np.ndarray
    d: np.ndarray
    v_running: np.ndarray
    zhat: np.ndarray
    k: int
    reorthogonalized: bool
    ortho_drift: float
    breakdown: bool = False


@dataclass
class VarianceProfile:
    """Per-coefficient relative accuracies of a truncated estimate."""

    exact: np.ndarray
    ratio: np.ndarray
    excluded: int


def exact_variances(a_dense, b_dense):
    """All marginal variances diag(B A^{-1} B^T) via one factorization."""
    a_dense = np.asarray(a_dense, dtype=float)
    b_dense = np.asarray(b_dense, dtype=float)
    n = a_dense.shape[0]
    if n > DENSE_GUARD:
        raise ValueError(f"dense variance oracle limited to n <= {DENSE_GUARD}")
    try:
        c = cho_factor(a_dense, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises its own
        raise NumericalError("precision matrix is not positive definite") from exc
    z = cho_solve(c, b_dense.T)
    zhat = np.einsum("ij,ji->i", b_dense, z)
    return zhat


def lanczos_variances(
    a_apply,
    b_op,
    k_max,
    reorthogonalize=True,
    seed=0,
    breakdown_tol=1e-12,
    check_orthonormality=True,
):
    """Running Lanczos estimates of the marginal variances.

    Starting from a seeded unit Gaussian vector, each step extends the
    orthonormal basis, updates the bidiagonal Cholesky factor of the
    projected tridiagonal, and accumulates zhat += v_k^2, which makes the
    estimates monotone nondecreasing in k and underestimates of the exact
    variances.  Breakdown (negligible residual norm) returns cleanly with
    the achieved iteration count.
    """
    a = a_apply.forward if hasattr(a_apply, "forward") else a_apply
    n = b_op.cols
    q_rows = b_op.rows
    if not 1 <= k_max <= n:
        raise ValueError("k_max must lie in [1, n]")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    q = v / np.linalg.norm(v)

    q_basis = np.empty((n, k_max))
    alpha = np.empty(k_max)
    beta_list = []
    e = np.empty(k_max)
    d = np.empty(max(k_max - 1, 0))
    v_run = np.empty((q_rows, k_max))
    zhat = np.zeros(q_rows)

    q_prev = np.zeros(n)
    beta_prev = 0.0
    v_prev = np.zeros(q_rows)
    scale = 0.0
    k_done = 0
    breakdown = False

    for k in range(1, k_max + 1):
        q_basis[:, k - 1] = q
        w = a(q) - beta_prev * q_prev
        a_k = float(q @ w)
        w = w - a_k * q
        if reorthogonalize:
            basis = q_basis[:, :k]
            w = w - basis @ (basis.T @ w)
            w = w - basis @ (basis.T @ w)
        if not np.isfinite(a_k):
            raise NumericalError("non-finite Lanczos coefficient", iteration=k)
        alpha[k - 1] = a_k
        scale = max(scale, abs(a_k))

        d_km1 = beta_prev / e[k - 2] if k > 1 else 0.0
        pivot = a_k - d_km1 * d_km1
        if pivot <= 0.0:
            breakdown = True
            k_done = k - 1
            break
        e[k - 1] = np.sqrt(pivot)
        if k > 1:
            d[k - 2] = d_km1
        v_k = (b_op.forward(q) - d_km1 * v_prev) / e[k - 1]
        v_run[:, k - 1] = v_k
        zhat = zhat + v_k * v_k
        k_done = k

        beta_k = float(np.linalg.norm(w))
        if k == k_max:
            break
        if beta_k <= breakdown_tol * max(scale, 1.0):
            breakdown = True
            break
        beta_list.append(beta_k)
        q_prev = q
        q = w / beta_k
        beta_prev = beta_k
        v_prev = v_k

    k = k_done
    q_basis = q_basis[:, :k]
    drift = 0.0
    if check_orthonormality and k:
        gram = q_basis.T @ q_basis
        drift = float(np.max(np.abs(gram - np.eye(k))))
        if not reorthogonalize and drift > 1e-8:
            warnings.warn(
                f"Lanczos basis orthonormality drift {drift:.2e} without "
                "reorthogonalization",
                stacklevel=2,
            )
    fact = LanczosFactorization(
        q_basis=q_basis,
        alpha=alpha[:k].copy(),
        beta=np.array(beta_list[: max(k - 1, 0)]),
        e=e[:k].copy(),
        d=d[: max(k - 1, 0)].copy(),
        v_running=v_run[:, :k].copy(),
        zhat=zhat,
        k=k,
        reorthogonalized=reorthogonalize,
        ortho_drift=drift,
        breakdown=breakdown,
    )
    return zhat.copy(), fact


def variance_error_profile(zhat_k, zhat_exact):
    """Relative accuracies zhat_k / zhat_exact with zero entries excluded."""
    zhat_k = np.asarray(zhat_k, dtype=float)
    zhat_exact = np.asarray(zhat_exact, dtype=float)
    if zhat_k.shape != zhat_exact.shape:
        raise ValueError("estimate and exact vectors must have equal length")
    keep = zhat_exact > 0
    excluded = int(np.sum(~keep))
    return VarianceProfile(
        exact=zhat_exact[keep],
        ratio=zhat_k[keep] / zhat_exact[keep],
        excluded=excluded,
    )
