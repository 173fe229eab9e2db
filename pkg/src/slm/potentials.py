"""Super-Gaussian potentials and the dual machinery behind Gaussian bounds.

Every potential ``t(s)`` handled here admits tight Gaussian-form lower bounds
of any width ``gamma``.  The module evaluates, for each supported family,

* ``g(x) = log t(sqrt(x)) - b*sqrt(x)``, a convex decreasing function of the
  squared argument, together with its derivatives,
* the dual penalty ``h(gamma) = max_x (-x/gamma - 2 g(x))`` of the width,
* the partially minimized inner penalty
  ``hstar = 0.5 * min_gamma ((z1 + x)/gamma + z2*gamma - z3*d*log(gamma)
  + h_cup(gamma))`` with the first/second derivative data that reweighted
  least squares needs, and
* the concave/convex split of ``h`` used for the heavy-tailed Student-t
  family.

Laplace and Student-t evaluations are closed form; the logistic (Bernoulli)
family has no analytic ``h`` and is handled by nested safeguarded scalar
minimizations, warm-started through an optional cache owned by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConvergenceError

LAPLACE = "laplace"
STUDENT_T = "student_t"
BERNOULLI = "bernoulli"

_KINDS = (LAPLACE, STUDENT_T, BERNOULLI)

# Taylor branch for tanh-based expressions; below this v**2 the direct
# formula for g'' loses all significant digits to cancellation.
_BERNOULLI_SERIES_V2 = 1e-4

# Safeguarded scalar minimizations: bracket, stationarity tolerance, budget.
_SOLVE_LO = 1e-12
_SOLVE_HI = 1e12
_SOLVE_TOL = 1e-12
_SOLVE_MAXIT = 100


@dataclass(frozen=True)
class PotentialSpec:
    """One super-Gaussian potential t(s) with its fixed parameters.

    ``tau`` is the scale of every family; ``nu`` the Student-t degrees of
    freedom; ``y`` the Bernoulli label in {-1, +1}.  ``b`` is the linear
    coefficient of the bound (zero for the even families, y*tau/2 for
    Bernoulli).
    """

    kind: str
    tau: float
    nu: float | None = None
    y: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.kind == STUDENT_T:
            if self.nu is None or not self.nu > 0:
                raise ValueError("Student-t requires nu > 0")
        if self.kind == BERNOULLI:
            if self.y not in (-1, 1):
                raise ValueError("Bernoulli requires y in {-1, +1}")

    @classmethod
    def laplace(cls, tau):
        return cls(LAPLACE, float(tau))

    @classmethod
    def student_t(cls, tau, nu):
        return cls(STUDENT_T, float(tau), nu=float(nu))

    @classmethod
    def bernoulli(cls, tau, y):
        return cls(BERNOULLI, float(tau), y=int(y))

    @property
    def b(self) -> float:
        """Linear bound coefficient; nonzero only for the odd Bernoulli."""
        if self.kind == BERNOULLI:
            return self.y * self.tau / 2.0
        return 0.0

    @property
    def alpha(self) -> float:
        """Student-t scale nu/tau."""
        if self.kind != STUDENT_T:
            raise ValueError("alpha is defined for Student-t only")
        return self.nu / self.tau

    @property
    def gamma0(self) -> float:
        """Width below which the dual penalty h is constant."""
        if self.kind == STUDENT_T:
            return self.alpha / (self.nu + 1.0)
        if self.kind == BERNOULLI:
            return 1.0 / (2.0 * _bernoulli_c(self.tau))
        return 0.0


@dataclass(frozen=True)
class BoundCoefficients:
    """Fenchel coefficients (z1, z2, z3) of one decoupled bound term.

    Refitted bounds live in exactly one of two regimes: z1 > 0 with z3 = 0,
    or z1 = 0 with z2 > 0 and z3 = 1.  The degenerate corner z1 = z2 = 0
    with z3 = 0 is additionally admitted as the point-estimation limit of
    the first regime.
    """

    z1: float
    z2: float
    z3: int

    def __post_init__(self):
        if self.z1 < 0 or self.z2 < 0:
            raise ValueError("z1 and z2 must be nonnegative")
        if self.z3 not in (0, 1):
            raise ValueError("z3 must be 0 or 1")
        ok_a = self.z1 >= 0 and self.z3 == 0
        ok_b = self.z1 == 0 and self.z2 > 0 and self.z3 == 1
        if not (ok_a or ok_b):
            raise ValueError(
                "bound coefficients must satisfy z1>0,z3=0 or z1=0,z2>0,z3=1"
            )


@dataclass
class PenaltyEval:
    """Inner-loop penalty value and derivative data at one point.

    ``theta`` is d hstar / d s minus the linear shift b.  ``theta_tilde`` is
    the even part divided by s (well defined at s = 0), ``rho`` the second
    derivative, ``kappa`` the group curvature coefficient with
    kappa**2 = (theta_tilde - rho)/s**2, and ``gamma_star`` the width
    minimizing the decoupled bound at this s.
    """

    hstar: float
    theta: float
    rho: float
    theta_tilde: float
    kappa: float
    gamma_star: float


@dataclass
class WarmStartCache:
    """Per-potential warm starts for the implicit scalar minimizations.

    Owned by the calling solver state; potential evaluation itself stays
    pure.  ``x_star`` seeds the inner x-minimization of the implicit h,
    ``gamma_star`` the outer width search of hstar.
    """

    x_star: dict = field(default_factory=dict)
    gamma_star: dict = field(default_factory=dict)


def _bernoulli_c(tau):
    return (tau / 2.0) ** 2 / 2.0


# ---------------------------------------------------------------------------
# g(x) and derivatives


def _g_laplace(tau, x):
    x = np.asarray(x, dtype=float)
    r = np.sqrt(x)
    with np.errstate(divide="ignore"):
        gp = np.where(x > 0, -tau / (2.0 * np.maximum(r, 1e-300)), -np.inf)
        gpp = np.where(x > 0, tau / (4.0 * np.maximum(r, 1e-300) ** 3), np.inf)
    return -tau * r, gp, gpp


def _g_student(tau, nu, x):
    x = np.asarray(x, dtype=float)
    alpha = nu / tau
    c = (nu + 1.0) / 2.0
    g = -c * np.log1p(x / alpha)
    gp = -c / (alpha + x)
    gpp = c / (alpha + x) ** 2
    return g, gp, gpp


def _g_bernoulli(tau, x):
    """g, g', g'' for the logistic potential on x = s**2.

    The direct expression for g'' subtracts nearly equal quantities near
    x = 0, so a Taylor branch takes over for v**2 below the series switch.
    """
    x = np.asarray(x, dtype=float)
    c = _bernoulli_c(tau)
    v2 = 2.0 * c * x
    v = np.sqrt(v2)
    # log cosh v computed overflow-safe
    g = -(np.abs(v) + np.log1p(np.exp(-2.0 * np.abs(v))) - math.log(2.0)) - math.log(2.0)
    small = v2 < _BERNOULLI_SERIES_V2
    vs = np.where(small, 0.0, np.maximum(v, 1e-300))
    t = np.tanh(vs)
    with np.errstate(invalid="ignore", divide="ignore"):
        gp_direct = -c * t / vs
        gpp_direct = (c / 2.0) * (t / vs + t * t - 1.0) / np.maximum(x, 1e-300)
    gp_series = -c * (1.0 - v2 / 3.0 + 2.0 * v2 * v2 / 15.0 - 17.0 * v2 ** 3 / 315.0)
    gpp_series = (
        (2.0 / 3.0) * c ** 2
        - (16.0 / 15.0) * c ** 3 * x
        + (136.0 / 105.0) * c ** 4 * x * x
    )
    gp = np.where(small, gp_series, gp_direct)
    gpp = np.where(small, gpp_series, gpp_direct)
    return g, gp, gpp


def g_value_derivs(pot: PotentialSpec, x):
    """Evaluate (g, g', g'') at x >= 0.

    For Laplace at x = 0 the value is finite but the derivatives blow up;
    they are reported as infinite sentinels (-inf slope, +inf curvature) and
    never enter the iteration paths, which work through hstar.
    """
    x = float(x)
    if x < 0:
        raise ValueError("x must be nonnegative")
    if pot.kind == LAPLACE:
        g, gp, gpp = _g_laplace(pot.tau, x)
    elif pot.kind == STUDENT_T:
        g, gp, gpp = _g_student(pot.tau, pot.nu, x)
    else:
        g, gp, gpp = _g_bernoulli(pot.tau, x)
    return float(g), float(gp), float(gpp)


# ---------------------------------------------------------------------------
# h(gamma) and derivatives


def _h_student(tau, nu, gamma):
    gamma = np.asarray(gamma, dtype=float)
    alpha = nu / tau
    g0 = alpha / (nu + 1.0)
    cc = -(nu + 1.0) * (math.log(g0) + 1.0)
    upper = gamma >= g0
    gs = np.maximum(gamma, 1e-300)
    h = np.where(upper, alpha / gs + (nu + 1.0) * np.log(gs) + cc, 0.0)
    hp = np.where(upper, -alpha / gs ** 2 + (nu + 1.0) / gs, 0.0)
    hpp = np.where(upper, 2.0 * alpha / gs ** 3 - (nu + 1.0) / gs ** 2, 0.0)
    return h, hp, hpp


def _bernoulli_xstar(tau, gamma, x0=None):
    """Vectorized solve of 1/gamma + 2 g'(x) = 0 for the implicit h.

    The residual is increasing in x (g is strictly convex), so a Newton
    iteration safeguarded by bisection cannot fail on a valid bracket.
    Entries with gamma <= gamma0 return x = 0.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    c = _bernoulli_c(tau)
    g0 = 1.0 / (2.0 * c)
    xi0 = 3.0 / (2.0 * c)
    active = gamma > g0
    x = np.zeros_like(gamma)
    if not np.any(active):
        return x
    ga = gamma[active]
    # asymptotic start near gamma0, else warm start from the caller
    xa = xi0 * np.log(ga / g0)
    if x0 is not None:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))[active]
        xa = np.where(x0 > 0, x0, xa)
    xa = np.maximum(xa, 1e-300)

    def resid(xv):
        _, gp, gpp = _g_bernoulli(tau, xv)
        return 1.0 / ga + 2.0 * gp, 2.0 * gpp

    lo = np.zeros_like(xa)
    hi = np.maximum(4.0 * xa, 1.0)
    for _ in range(200):
        r_hi, _ = resid(hi)
        grow = r_hi < 0
        if not np.any(grow):
            break
        hi[grow] *= 4.0
    else:
        raise ConvergenceError("bracket growth failed in bernoulli x-star solve")

    done = np.zeros(xa.shape, dtype=bool)
    for _ in range(_SOLVE_MAXIT):
        r, rp = resid(xa)
        scale = 1.0 / ga + 2.0 * c
        done = np.abs(r) <= _SOLVE_TOL * scale
        if np.all(done):
            break
        lo = np.where(r < 0, xa, lo)
        hi = np.where(r > 0, xa, hi)
        step = np.where(rp > 0, r / np.where(rp > 0, rp, 1.0), 0.0)
        xn = xa - step
        bad = (xn <= lo) | (xn >= hi) | ~np.isfinite(xn)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        xa = np.where(done, xa, xn)
    else:
        raise ConvergenceError(
            "bernoulli x-star solve hit the iteration limit",
            bracket=(float(lo.min()), float(hi.max())),
        )
    x[active] = xa
    return x


def _h_bernoulli(tau, gamma, warm=None, key=None):
    """Implicit (h, h', h'') for the logistic potential.

    h is recovered from the inner minimization over x; very close to the
    kink at gamma0 the solved x_star degenerates and the logarithmic
    asymptotics supply the curvature.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    c = _bernoulli_c(tau)
    g0 = 1.0 / (2.0 * c)
    xi0 = 3.0 / (2.0 * c)
    x0 = None
    if warm is not None and key is not None:
        x0 = warm.x_star.get(key)
        if x0 is not None and np.shape(x0) != gamma.shape:
            x0 = None
    xs = _bernoulli_xstar(tau, gamma, x0=x0)
    if warm is not None and key is not None:
        warm.x_star[key] = xs.copy()
    g, _, gpp = _g_bernoulli(tau, xs)
    h = np.where(gamma > g0, -xs / gamma - 2.0 * g, 2.0 * math.log(2.0))
    hp = np.where(gamma > g0, xs / gamma ** 2, 0.0)
    with np.errstate(divide="ignore"):
        hpp_solved = ((2.0 * gamma * gpp) ** -1 - 2.0 * xs) / gamma ** 3
    hpp_asym = (xi0 - 2.0 * xs) / gamma ** 3
    tiny = xs < 1e-10
    hpp = np.where(gamma > g0, np.where(tiny, hpp_asym, hpp_solved), 0.0)
    return h, hp, hpp


def h_value_derivs(pot: PotentialSpec, gamma, warm: WarmStartCache | None = None):
    """Evaluate the dual penalty (h, h', h'') at gamma > 0.

    Laplace and Student-t are closed form; Bernoulli runs the implicit
    scheme.  At the Student-t branch point the right (gamma >= gamma0)
    derivatives are reported.
    """
    gamma = float(gamma)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if pot.kind == LAPLACE:
        return pot.tau ** 2 * gamma, pot.tau ** 2, 0.0
    if pot.kind == STUDENT_T:
        h, hp, hpp = _h_student(pot.tau, pot.nu, gamma)
        return float(h), float(hp), float(hpp)
    h, hp, hpp = _h_bernoulli(pot.tau, gamma, warm=warm, key=id(pot))
    return float(h[0]), float(hp[0]), float(hpp[0])


def h_decompose_student_t(pot: PotentialSpec, gamma, z3: int = 0):
    """Concave/convex split of the Student-t dual penalty.

    Returns (h_cap, h_cap', h_cup, h_cup', h_cup'').  The -z3*log(gamma)
    term of the decoupled bound is folded into the concave part, so
    h_cap + h_cup = h - z3*log(gamma).  h_cup is convex and twice
    continuously differentiable across the branch point.
    """
    if pot.kind != STUDENT_T:
        raise ValueError("decomposition applies to Student-t potentials only")
    gamma = float(gamma)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    nu, alpha = pot.nu, pot.alpha
    g0 = alpha / (nu + 1.0)
    a = (nu + 1.0) / g0
    b = (nu + 1.0) * math.log(g0)
    cc = -(nu + 1.0) * (math.log(g0) + 1.0)
    if gamma >= g0:
        hcap = (nu + 1.0 - z3) * math.log(gamma)
        hcap_p = (nu + 1.0 - z3) / gamma
        hcup = alpha / gamma + cc
        hcup_p = -alpha / gamma ** 2
        hcup_pp = 2.0 * alpha / gamma ** 3
    else:
        hcap = (2.0 * (nu + 1.0) - z3) * math.log(gamma) - a * (gamma - g0) - b
        hcap_p = (2.0 * (nu + 1.0) - z3) / gamma - a
        hcup = -2.0 * (nu + 1.0) * math.log(gamma) + a * (gamma - g0) + b
        hcup_p = -2.0 * (nu + 1.0) / gamma + a
        hcup_pp = 2.0 * (nu + 1.0) / gamma ** 2
    return hcap, hcap_p, hcup, hcup_p, hcup_pp


# ---------------------------------------------------------------------------
# hstar kernels (vectorized over lanes; scalars go through 1-element arrays)


def _penalty_laplace(tau, x, z1, z2, z3d):
    """Closed-form minimization of (z1+x)/g + (z2+tau^2) g - z3d log g."""
    q2 = z2 + tau ** 2
    p = z1 + x
    disc = np.sqrt(z3d ** 2 + 4.0 * q2 * p)
    gstar = np.where(z3d > 0, (z3d + disc) / (2.0 * q2), np.sqrt(p / q2))
    with np.errstate(divide="ignore", invalid="ignore"):
        log_g = np.log(np.where(gstar > 0, gstar, 1.0))
        k = np.where(
            gstar > 0,
            p / np.where(gstar > 0, gstar, 1.0) + q2 * gstar - z3d * log_g,
            0.0,
        )
    hstar = 0.5 * k
    g3 = 2.0 * p + gstar * z3d
    return _finish_penalty(hstar, gstar, x, g3)


def _penalty_student(tau, nu, x, z1, z2):
    """Two-branch closed form; z2 carries the concave-part slope, the log
    term is folded there as well so no explicit z3 appears."""
    if np.any(z2 <= 0):
        raise ValueError("Student-t penalty requires a positive z2 coefficient")
    alpha = nu / tau
    g0 = alpha / (nu + 1.0)
    a = (nu + 1.0) / g0
    cc = -(nu + 1.0) * (math.log(g0) + 1.0)
    p = z1 + x

    n1 = p + alpha
    g1 = np.sqrt(n1 / z2)
    k1 = 2.0 * np.sqrt(z2 * n1) + cc

    za = z2 + a
    dd = np.sqrt((nu + 1.0) ** 2 + za * p)
    g2 = (nu + 1.0 + dd) / za
    k2 = 2.0 * dd + (nu + 1.0) * (
        2.0 * np.log(za) - 2.0 * np.log(nu + 1.0 + dd) + math.log(g0) - 1.0
    )

    kk = p / g0 + z2 * g0 - (nu + 1.0) * math.log(g0)

    # k is convex in gamma, so at most one interior candidate is valid;
    # ties at the branch point resolve to the gamma >= gamma0 side.
    use1 = g1 >= g0
    use2 = (~use1) & (g2 < g0)
    gstar = np.where(use1, g1, np.where(use2, g2, g0))
    k = np.where(use1, k1, np.where(use2, k2, kk))
    upper = gstar >= g0
    g3 = 2.0 * p + np.where(upper, 2.0 * alpha, 2.0 * (nu + 1.0) * gstar)
    return _finish_penalty(0.5 * k, gstar, x, g3)


def _penalty_bernoulli_closed(tau, x, z1):
    """z2 = z3 = 0 path: hstar = -g(z1 + x)."""
    p = z1 + x
    g, gp, gpp = _g_bernoulli(tau, p)
    hstar = -g
    gstar = -1.0 / (2.0 * gp)
    theta_tilde = -2.0 * gp
    rho = -2.0 * gp - 4.0 * gpp * x
    kappa = 2.0 * np.sqrt(np.maximum(gpp, 0.0))
    return hstar, gstar, theta_tilde, rho, kappa


def _penalty_bernoulli_implicit(tau, x, z1, z2, z3d, warm=None, key=None):
    """Guarded Newton/bisection over gamma for the z2 != 0 bound.

    Every residual evaluation needs h'(gamma) of the implicit dual, i.e. a
    nested scalar solve; both levels warm-start from the cache.
    """
    x = np.atleast_1d(x)
    z1, z2, z3d = np.broadcast_arrays(
        np.atleast_1d(z1), np.atleast_1d(z2), np.atleast_1d(z3d)
    )
    z1 = z1.astype(float)
    p = z1 + x
    c = _bernoulli_c(tau)
    g0g = 1.0 / (2.0 * c)

    gam = None
    if warm is not None and key is not None:
        gam = warm.gamma_star.get(key)
        if gam is not None and np.shape(gam) != x.shape:
            gam = None
    if gam is None:
        # Laplace-like start: treat h as tau^2 * gamma near the origin
        gam = np.sqrt((p + 1e-12) / (z2 + tau ** 2))
    gam = np.clip(gam, _SOLVE_LO, _SOLVE_HI)

    xwarm = [None]

    def kgam(gv):
        h, hp, hpp = _h_bernoulli(tau, gv, warm=None)
        # scaled forms avoid cancellation for small gamma
        r = -p - z3d * gv + gv ** 2 * (z2 + hp)          # gamma^2 * k'
        rp = 2.0 * p + gv * z3d + gv ** 3 * hpp          # gamma^3 * k''
        return r, rp, h

    lo = np.full_like(gam, _SOLVE_LO)
    hi = np.full_like(gam, _SOLVE_HI)
    r = rp = h = None
    for _ in range(_SOLVE_MAXIT):
        r, rp, h = kgam(gam)
        scale = p + z3d * gam + gam ** 2 * (z2 + tau ** 2)
        done = np.abs(r) <= _SOLVE_TOL * np.maximum(scale, 1.0)
        if np.all(done):
            break
        lo = np.where(r < 0, gam, lo)
        hi = np.where(r > 0, gam, hi)
        # Newton step in gamma from the scaled derivatives
        step = gam * r / np.maximum(rp, 1e-300)
        gn = gam - step
        bad = (gn <= lo) | (gn >= hi) | ~np.isfinite(gn)
        gn = np.where(bad, np.sqrt(lo * np.minimum(hi, 1e15)), gn)
        gam = np.where(done, gam, gn)
    else:
        raise ConvergenceError(
            "bernoulli width search hit the iteration limit",
            bracket=(float(lo.min()), float(hi.max())),
        )
    if warm is not None and key is not None:
        warm.gamma_star[key] = gam.copy()
    _, _, h = kgam(gam)
    k = p / gam + z2 * gam - z3d * np.log(gam) + h
    g3 = rp
    return _finish_penalty(0.5 * k, gam, x, g3)


def _finish_penalty(hstar, gstar, x, g3):
    """Common derivative bookkeeping from gamma_star and gamma^3 k''."""
    with np.errstate(divide="ignore", invalid="ignore"):
        theta_tilde = np.where(gstar > 0, 1.0 / np.where(gstar > 0, gstar, 1.0), 0.0)
        rho = np.where(
            gstar > 0,
            theta_tilde * (1.0 - 2.0 * x / np.maximum(g3, 1e-300)),
            0.0,
        )
        kappa = np.where(
            gstar > 0,
            np.sqrt(2.0 / np.maximum(gstar * g3, 1e-300)),
            0.0,
        )
    return hstar, gstar, theta_tilde, rho, kappa


def h_star(
    pot: PotentialSpec,
    s,
    bc: BoundCoefficients,
    group_dim: int = 1,
    warm: WarmStartCache | None = None,
) -> PenaltyEval:
    """Inner-loop penalty hstar and derivatives at a point s.

    ``s`` is the signed scalar argument, or the Euclidean norm of the group
    subvector (then x = s**2 = ||s||**2 and ``group_dim`` scales the log
    term of the type-B bound).  For Student-t the caller folds the
    concave-part slope into ``bc.z2``.  ``theta`` includes the -b shift.
    """
    s = float(s)
    x = np.array([s * s])
    z1 = np.array([float(bc.z1)])
    z3d = np.array([float(bc.z3 * group_dim)])
    if pot.kind == LAPLACE:
        out = _penalty_laplace(pot.tau, x, z1, np.array([bc.z2]), z3d)
    elif pot.kind == STUDENT_T:
        out = _penalty_student(pot.tau, pot.nu, x, z1, np.array([bc.z2]))
    else:
        if bc.z2 == 0:
            out = _penalty_bernoulli_closed(pot.tau, x, z1)
        else:
            out = _penalty_bernoulli_implicit(
                pot.tau, x, z1, np.array([bc.z2]), z3d, warm=warm, key=id(pot)
            )
    hstar, gstar, theta_tilde, rho, kappa = (float(np.asarray(v)[0]) for v in out)
    return PenaltyEval(
        hstar=hstar,
        theta=theta_tilde * s - pot.b,
        rho=rho,
        theta_tilde=theta_tilde,
        kappa=kappa,
        gamma_star=gstar,
    )


class PotentialBank:
    """Vectorized evaluation over all groups of a model's potential list.

    Groups are split by family once at construction; every evaluation then
    runs a handful of array kernels instead of a Python loop over q sites.
    The scalar entry points above remain the reference semantics: the bank
    applies the identical formulas lane by lane.
    """

    def __init__(self, potentials, sizes, potential_index):
        self.sizes = np.asarray(sizes, dtype=int)
        pidx = np.asarray(potential_index, dtype=int)
        if pidx.shape != self.sizes.shape:
            raise ValueError("one potential index per group is required")
        if pidx.size and (pidx.min() < 0 or pidx.max() >= len(potentials)):
            raise ValueError("potential index out of range")
        self.potentials = list(potentials)
        ng = len(self.sizes)
        kinds = np.array([self.potentials[i].kind for i in pidx])
        self.tau = np.array([self.potentials[i].tau for i in pidx])
        self.nu = np.array(
            [self.potentials[i].nu or 0.0 for i in pidx], dtype=float
        )
        self.b_group = np.array([self.potentials[i].b for i in pidx])
        for g in range(ng):
            if self.sizes[g] > 1 and self.b_group[g] != 0.0:
                raise ValueError("group potentials must be even (b = 0)")
        self.idx_lap = np.flatnonzero(kinds == LAPLACE)
        self.idx_stu = np.flatnonzero(kinds == STUDENT_T)
        self.idx_ber = np.flatnonzero(kinds == BERNOULLI)
        starts = np.concatenate(([0], np.cumsum(self.sizes)[:-1]))
        self.b_coeff = np.repeat(self.b_group, self.sizes)
        self._starts = starts
        # distinct Bernoulli taus get their own sub-lanes for the implicit paths
        self._ber_tau_groups = {}
        for g in self.idx_ber:
            self._ber_tau_groups.setdefault(self.tau[g], []).append(g)
        self._ber_tau_groups = {
            t: np.asarray(g, dtype=int) for t, g in self._ber_tau_groups.items()
        }
        self._stu_param_groups = {}
        for g in self.idx_stu:
            key = (self.tau[g], self.nu[g])
            self._stu_param_groups.setdefault(key, []).append(g)
        self._stu_param_groups = {
            k: np.asarray(g, dtype=int) for k, g in self._stu_param_groups.items()
        }

    @property
    def ngroups(self):
        return len(self.sizes)

    def penalties(self, x, z1, z2, z3, warm: WarmStartCache | None = None):
        """hstar and derivative data for every group at squared norms x.

        ``z2`` carries the full coefficient including any concave-part
        slope; ``z3`` is the binary type-B flag whose log term scales with
        the group dimension.  Returns arrays keyed hstar, gamma_star,
        theta_tilde, rho, kappa.
        """
        ng = self.ngroups
        x = np.asarray(x, dtype=float)
        out = {
            k: np.zeros(ng)
            for k in ("hstar", "gamma_star", "theta_tilde", "rho", "kappa")
        }

        def put(idx, vals):
            hstar, gstar, tt, rho, kap = vals
            out["hstar"][idx] = hstar
            out["gamma_star"][idx] = gstar
            out["theta_tilde"][idx] = tt
            out["rho"][idx] = rho
            out["kappa"][idx] = kap

        if self.idx_lap.size:
            i = self.idx_lap
            z3d = z3[i] * self.sizes[i]
            put(i, _penalty_laplace(self.tau[i], x[i], z1[i], z2[i], z3d))
        for (tau, nu), i in self._stu_param_groups.items():
            put(i, _penalty_student(tau, nu, x[i], z1[i], z2[i]))
        for tau, i in self._ber_tau_groups.items():
            z3d = z3[i] * self.sizes[i]
            closed = (z2[i] == 0) & (z3d == 0)
            if np.all(closed):
                put(i, _penalty_bernoulli_closed(tau, x[i], z1[i]))
            else:
                put(
                    i,
                    _penalty_bernoulli_implicit(
                        tau, x[i], z1[i], z2[i], z3d,
                        warm=warm, key=("hstar", tau),
                    ),
                )
        return out

    def h(self, gamma, warm: WarmStartCache | None = None):
        """Dual penalty (h, h', h'') per group at widths gamma."""
        gamma = np.asarray(gamma, dtype=float)
        ng = self.ngroups
        h = np.zeros(ng)
        hp = np.zeros(ng)
        hpp = np.zeros(ng)
        if self.idx_lap.size:
            i = self.idx_lap
            h[i] = self.tau[i] ** 2 * gamma[i]
            hp[i] = self.tau[i] ** 2
        for (tau, nu), i in self._stu_param_groups.items():
            h[i], hp[i], hpp[i] = _h_student(tau, nu, gamma[i])
        for tau, i in self._ber_tau_groups.items():
            h[i], hp[i], hpp[i] = _h_bernoulli(
                tau, gamma[i], warm=warm, key=("h", tau)
            )
        return h, hp, hpp

    def k_terms(self, gamma, x, z1, z2, z3, warm: WarmStartCache | None = None):
        """Per-group bound terms (z1+x)/g + z2*g - z3*d*log(g) + h_cup(g).

        Evaluated at an explicit width, not the minimizing one; for
        Student-t groups the log term is folded into the concave part, so
        only the convex remainder appears here.
        """
        gamma = np.asarray(gamma, dtype=float)
        x = np.asarray(x, dtype=float)
        out = (z1 + x) / gamma + z2 * gamma
        if self.idx_lap.size:
            i = self.idx_lap
            out[i] += (
                self.tau[i] ** 2 * gamma[i]
                - z3[i] * self.sizes[i] * np.log(gamma[i])
            )
        for (tau, nu), i in self._stu_param_groups.items():
            alpha = nu / tau
            g0 = alpha / (nu + 1.0)
            a = (nu + 1.0) / g0
            bconst = (nu + 1.0) * math.log(g0)
            cc = -(nu + 1.0) * (math.log(g0) + 1.0)
            g = gamma[i]
            hcup = np.where(
                g >= g0,
                alpha / g + cc,
                -2.0 * (nu + 1.0) * np.log(g) + a * (g - g0) + bconst,
            )
            out[i] += hcup
        for tau, i in self._ber_tau_groups.items():
            h, _, _ = _h_bernoulli(tau, gamma[i], warm=warm, key=("h", tau))
            out[i] += h - z3[i] * self.sizes[i] * np.log(gamma[i])
        return out

    def hcap(self, gamma, z3):
        """Concave-part values and slopes at gamma (Student-t groups only).

        The type-B log term is folded in, scaled by the group dimension;
        this keeps the split concave only while nu >= d - 1, which is
        enforced here.  All other families report zeros (their dual
        penalties are already convex).
        """
        gamma = np.asarray(gamma, dtype=float)
        z3 = np.broadcast_to(np.asarray(z3, dtype=float), gamma.shape)
        val = np.zeros(self.ngroups)
        slope = np.zeros(self.ngroups)
        for (tau, nu), i in self._stu_param_groups.items():
            alpha = nu / tau
            g0 = alpha / (nu + 1.0)
            a = (nu + 1.0) / g0
            bconst = (nu + 1.0) * math.log(g0)
            g = gamma[i]
            zz = z3[i] * self.sizes[i]
            if np.any(nu + 1.0 - zz < 0):
                raise ValueError(
                    "type-B bounding of Student-t groups needs nu >= d - 1"
                )
            upper = g >= g0
            val[i] = np.where(
                upper,
                (nu + 1.0 - zz) * np.log(g),
                (2.0 * (nu + 1.0) - zz) * np.log(g) - a * (g - g0) - bconst,
            )
            slope[i] = np.where(
                upper,
                (nu + 1.0 - zz) / g,
                (2.0 * (nu + 1.0) - zz) / g - a,
            )
        return val, slope


def fenchel_gap(pot: PotentialSpec, x, gamma_grid=None, refine=True):
    """Diagnostic duality gap min_gamma (x/gamma + h(gamma)) + 2 g(x).

    Nonnegative up to solver tolerance, and zero at the tightness point
    gamma = -1/(2 g'(x)).  The minimum is located on a log grid and
    optionally polished by golden-section refinement.
    """
    x = float(x)
    if x < 0:
        raise ValueError("x must be nonnegative")
    if gamma_grid is None:
        gamma_grid = np.geomspace(1e-8, 1e8, 400)
    gamma_grid = np.asarray(gamma_grid, dtype=float)

    def h_on(gammas):
        gammas = np.atleast_1d(np.asarray(gammas, dtype=float))
        if pot.kind == LAPLACE:
            return pot.tau ** 2 * gammas
        if pot.kind == STUDENT_T:
            return _h_student(pot.tau, pot.nu, gammas)[0]
        return _h_bernoulli(pot.tau, gammas)[0]

    def objective(g):
        return float((x / g + h_on(g))[0])

    vals = x / gamma_grid + h_on(gamma_grid)
    j = int(np.argmin(vals))
    best = vals[j]
    if refine:
        lo = gamma_grid[max(j - 1, 0)]
        hi = gamma_grid[min(j + 1, len(gamma_grid) - 1)]
        from scipy.optimize import minimize_scalar

        res = minimize_scalar(
            objective, bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-14},
        )
        best = min(best, float(res.fun))
    # include the analytic tightness point when the slope is informative
    g, gp, _ = g_value_derivs(pot, x)
    if np.isfinite(gp) and gp < 0:
        best = min(best, objective(-1.0 / (2.0 * gp)))
    return best + 2.0 * g
