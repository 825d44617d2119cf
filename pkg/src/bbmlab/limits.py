"""Analytic limit objects, by quadrature.

Everything here is deterministic numerics for the laws that the particle
ensembles are checked against:

* the shift profile H(u) = E[F(sqrt(1-u) R_1)] - E[F(R_1)] for u < 1 and
  -E[F(R_1)] for u >= 1: the marginal effect on the Gibbs functional of a
  lineage leaving through the barrier at relative time u;
* the stable-law parameter triple (c1, c2, c3): log-drift coefficient, scale,
  and constant drift of the conditional 1-stable limit;
* the log-t correction coefficient;
* the direct-calculation identity tying int_0^1 H(u) u^{-3/2} du to Bessel
  expectations of F and F';
* the second-order Bessel expansion G(x) and its epsilon^2 residual;
* the limiting characteristic function, on the unit window or composed over
  the full killing-time range;
* the truncated-mean estimator of the centering constant mu_Z.

All u^{-3/2} integrals substitute u = v^2 on (0, 1/2] (the integrand is O(1)
there since H(u) = O(u)) and u = 1 - w^2 on (1/2, 1) (taming the (1-u)^{-a/2}
endpoint of diverging functionals).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .functionals import FunctionalSpec, expected_bessel_value, get_functional

SQRT_2PI = math.sqrt(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
EULER_GAMMA = float(np.euler_gamma)

_QUAD = dict(epsabs=1e-11, epsrel=1e-11, limit=400)


@dataclass(frozen=True)
class StableLawParams:
    """(scale, log-drift, constant-drift) of the conditional 1-stable limit.

    The conditional characteristic function is
    exp(-z [c2 |lam| + i lam (c1 log|lam| + c3)]) at conditioning value z.
    ``mu_z`` records the centering constant used inside c3.
    """

    c1: float
    c2: float
    c3: float
    mu_z: float = 0.0
    quad_error: float = 0.0

    def __post_init__(self):
        if self.c2 < -1e-12:
            raise ValueError(f"scale c2 must be non-negative, got {self.c2}")


def shift_profile(F, u: float, tol: float = 1e-11) -> float:
    """H(u): E[F(sqrt(1-u) R_1)] - E[F(R_1)] below 1, -E[F(R_1)] beyond."""
    F = get_functional(F)
    if u < 0:
        raise ValueError(f"relative time must be >= 0, got {u}")
    ef, _ = expected_bessel_value(F, tol)
    if u >= 1.0:
        return -ef
    if u == 0.0:
        return 0.0
    scaled, _ = expected_bessel_value(F.scaled(math.sqrt(1.0 - u)), tol)
    return scaled - ef


class _Profile:
    """H(u) with the base expectation computed once."""

    def __init__(self, F, tol=1e-11):
        self.F = get_functional(F)
        self.tol = tol
        self.ef, self.ef_err = expected_bessel_value(self.F, tol)

    def __call__(self, u: float) -> float:
        if u >= 1.0:
            return -self.ef
        if u <= 0.0:
            return 0.0
        val, _ = expected_bessel_value(self.F.scaled(math.sqrt(1.0 - u)), self.tol)
        return val - self.ef


def _xlogabs(h: float) -> float:
    # continuous extension of h log|h| at h = 0
    return 0.0 if h == 0.0 else h * math.log(abs(h))


def _unit_window_integral(H, weight) -> tuple[float, float]:
    """int_0^1 weight(H(u)) u^{-3/2} du with both endpoint substitutions."""
    import warnings

    with warnings.catch_warnings():
        # the inner H quadrature leaves ~1e-12 jitter that the outer
        # extrapolation reports as roundoff; the returned error stays honest
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        lo, e1 = integrate.quad(lambda v: weight(H(v * v)) * 2.0 / (v * v),
                                0.0, math.sqrt(0.5), **_QUAD)
        hi, e2 = integrate.quad(
            lambda w: weight(H(1.0 - w * w)) * 2.0 * w / (1.0 - w * w) ** 1.5,
            0.0, math.sqrt(0.5), **_QUAD)
    return lo + hi, e1 + e2


def prop_constants(F, mu_z: float = 0.0, tol: float = 1e-11) -> StableLawParams:
    """The (c1, c2, c3) triple of the conditional 1-stable limit law.

    c1 = (2 pi)^{-1/2} int_0^1 H(u) u^{-3/2} du
    c2 = (1/2) sqrt(pi/2) int_0^1 |H(u)| u^{-3/2} du
    c3 = (2 pi)^{-1/2} int_0^1 H(u) (log|H(u)| - mu_z) u^{-3/2} du

    The integrand of c3 uses the continuous extension 0 at zeros of H.
    """
    H = _Profile(F, tol)
    i1, err1 = _unit_window_integral(H, lambda h: h)
    i2, err2 = _unit_window_integral(H, abs)
    i3, err3 = _unit_window_integral(H, _xlogabs)
    if not all(map(math.isfinite, (i1, i2, i3))):
        raise ValueError(
            f"{H.F.name}: |H(u)| u^(-3/2) fails integrability on (0,1]; the "
            "divergence exponent must stay below 2")
    c1 = i1 / SQRT_2PI
    c2 = 0.5 * math.sqrt(math.pi / 2.0) * i2
    if c2 < 0.0:
        c2 = 0.0
    c3 = (i3 - mu_z * i1) / SQRT_2PI
    return StableLawParams(c1, c2, c3, mu_z, err1 + err2 + err3)


def appendix_identity_gap(F, tol: float = 1e-11) -> float:
    """|int_0^1 H u^{-3/2} du  -  (2 E[F(R1)] - sqrt(2 pi) E[F'(R1) + F(R1)/R1])|.

    Both sides by independent quadratures; an exact identity for functionals
    with valid derivative bounds.
    """
    F = get_functional(F)
    if F.fprime is None:
        raise ValueError(f"{F.name}: identity needs F'; none is attached")
    H = _Profile(F, tol)
    lhs, _ = _unit_window_integral(H, lambda h: h)
    fp = F.fprime
    fov = FunctionalSpec(name=F.name + "/x",
                         f=lambda x, f=F.f: np.asarray(f(x), dtype=float) / np.asarray(x, dtype=float),
                         alpha=F.alpha + 1.0, kappa=F.kappa)
    dspec = FunctionalSpec(name=F.name + "'", f=fp, alpha=F.alpha + 1.0, kappa=F.kappa)
    e_fp, _ = expected_bessel_value(dspec, tol)
    e_fov, _ = expected_bessel_value(fov, tol)
    rhs = 2.0 * H.ef - SQRT_2PI * (e_fp + e_fov)
    return abs(lhs - rhs)


def logt_coefficient(F, tol: float = 1e-11) -> float:
    """sqrt(2/pi) * (1/2) int_0^inf H(u) u^{-3/2} du.

    Head on (0, 1] by quadrature; the constant tail integrates in closed form
    to -E[F(R_1)].
    """
    H = _Profile(F, tol)
    head, _ = _unit_window_integral(H, lambda h: h)
    return SQRT_2_OVER_PI * (0.5 * head - H.ef)


def expansion_G(F, x: float, tol: float = 1e-11) -> float:
    """G(x) = E[F(R1)] (3/2 - x^2/2) + E[R1^2 F(R1)] (x^2/6 - 1/2)."""
    F = get_functional(F)
    ef, _ = expected_bessel_value(F, tol)
    r2spec = FunctionalSpec(name=F.name + "*r2",
                            f=lambda z, f=F.f: np.asarray(f(z), dtype=float) * np.asarray(z, dtype=float) ** 2,
                            alpha=max(0.0, F.alpha - 2.0), kappa=F.kappa)
    er2f, _ = expected_bessel_value(r2spec, tol)
    x2 = x * x
    return ef * (1.5 - x2 / 2.0) + er2f * (x2 / 6.0 - 0.5)


def bessel_expectation_from(F, y: float, s: float, tol: float = 1e-11) -> float:
    """E_y[F(R_s)] against the started-at-y Bessel density, by quadrature."""
    from .kernels import bessel3_density

    F = get_functional(F) if not callable(F) or isinstance(F, FunctionalSpec) else F
    f = F.f if isinstance(F, FunctionalSpec) else F
    kappa = F.kappa if isinstance(F, FunctionalSpec) else 2.0
    zmax = (max(10.0, kappa * s) + 15.0) * math.sqrt(s) + y
    val, _ = integrate.quad(lambda z: float(f(z)) * bessel3_density(y, s, z),
                            0.0, zmax, **_QUAD)
    return val


def expansion_residual(F, x: float, eps: float, tol: float = 1e-11) -> float:
    """|E_{x sqrt(eps)}[F(R_{1-eps})] - E[F(R_1)] - eps G(x)|: the O(eps^2) term.

    Note the sign: the expansion is E_{x sqrt(eps)}[F(R_{1-eps})]
    = E[F(R_1)] + eps G(x) + O(eps^2), as the x = 0 closed forms confirm.
    """
    if not eps < 0.5:
        raise ValueError(f"expansion needs eps < 1/2, got {eps}")
    F = get_functional(F)
    ef, _ = expected_bessel_value(F, tol)
    left = bessel_expectation_from(F, x * math.sqrt(eps), 1.0 - eps, tol)
    return abs(left - ef - eps * expansion_G(F, x, tol))


def limit_cf(F, lam: float, z: float = 1.0, window: str = "unit",
             mu_z: float = 0.0, params: StableLawParams | None = None,
             tol: float = 1e-11) -> complex:
    """Characteristic function of the conditional limit, at conditioning value z.

    window="unit": exp(-z [c2 |lam| + i lam (c1 log|lam| + c3)]), the law of
    the fluctuation statistic conditioned on the limit mass z.

    window="full": the same increment law composed over the whole killing-time
    range with intensity (2 pi)^{-1/2} u^{-3/2} du:

        exp(-z int_0^inf [ (pi/2) |lam H(u)|
                           + i lam H(u) (log|lam H(u)| - mu_z) ]
                         (2 pi)^{-1/2} u^{-3/2} du),

    with the 0 log 0 convention where H vanishes. The tail u > 1, where H is
    the constant -E[F(R_1)], integrates in closed form.
    """
    if lam == 0.0:
        return complex(1.0, 0.0)
    if z < 0:
        raise ValueError(f"conditioning value must be >= 0, got {z}")
    if window == "unit":
        p = params if params is not None else prop_constants(F, mu_z, tol)
        expo = -z * (p.c2 * abs(lam) + 1j * lam * (p.c1 * math.log(abs(lam)) + p.c3))
        return complex(np.exp(expo))
    if window != "full":
        raise ValueError(f"window must be 'unit' or 'full', got {window!r}")

    H = _Profile(F, tol)
    i1, _ = _unit_window_integral(H, lambda h: h)
    i2, _ = _unit_window_integral(H, abs)
    i3, _ = _unit_window_integral(H, _xlogabs)
    if not all(map(math.isfinite, (i1, i2, i3))):
        raise ValueError(f"{H.F.name}: full-range composition diverges")
    ef = H.ef
    full1 = i1 - 2.0 * ef               # int_0^inf H u^{-3/2}
    full2 = i2 + 2.0 * abs(ef)          # int_0^inf |H| u^{-3/2}
    full3 = i3 + 2.0 * _xlogabs(-ef)    # int_0^inf H log|H| u^{-3/2}
    real = (math.pi / 2.0) * abs(lam) * full2
    imag = lam * (full1 * (math.log(abs(lam)) - mu_z) + full3)
    expo = -z * (real + 1j * imag) / SQRT_2PI
    return complex(np.exp(expo))


def full_range_cauchy_params(F, tol: float = 1e-11) -> tuple[float, float, float]:
    """(scale, logdrift_coeff, drift) of the full-range composition:

    log CF = -z (scale |lam| + i lam (logdrift_coeff (log|lam| - mu_z) - drift)).
    For the reciprocal functional this is (2, 0, (2/pi) log 2).
    """
    H = _Profile(F, tol)
    i1, _ = _unit_window_integral(H, lambda h: h)
    i2, _ = _unit_window_integral(H, abs)
    i3, _ = _unit_window_integral(H, _xlogabs)
    ef = H.ef
    scale = (math.pi / 2.0) * (i2 + 2.0 * abs(ef)) / SQRT_2PI
    logdrift = (i1 - 2.0 * ef) / SQRT_2PI
    drift = -(i3 + 2.0 * _xlogabs(-ef)) / SQRT_2PI
    return scale, logdrift, drift


@dataclass
class MuZEstimate:
    """Truncated-mean estimate of the centering constant.

    g(x) = mean(z 1_{z<=x}) - log x - EULER_GAMMA + 1 flattens (in x) at the
    centering constant when the samples have the right tail; the estimate is
    the flattest-window average, with a warning flag when no window is flat
    at the noise level (e.g. monotone g: wrong tail scale).
    """

    mu_z: float
    std_error: float
    x_grid: np.ndarray
    g_values: np.ndarray
    window: tuple[int, int]
    plateau_found: bool
    warning: str | None = None


def mu_z_estimate(z_samples, x_grid=None) -> MuZEstimate:
    z = np.asarray(z_samples, dtype=float)
    if z.size < 16:
        raise ValueError("need at least 16 samples")
    if x_grid is None:
        hi = np.quantile(z, 0.999)
        x_grid = np.geomspace(max(np.median(z), 1e-6), max(hi, 1.0), 25)
    x_grid = np.asarray(x_grid, dtype=float)
    n = z.size
    g = np.empty_like(x_grid)
    se = np.empty_like(x_grid)
    for i, x in enumerate(x_grid):
        trunc = np.where(z <= x, z, 0.0)
        g[i] = trunc.mean() - math.log(x) - EULER_GAMMA + 1.0
        se[i] = trunc.std(ddof=1) / math.sqrt(n)

    w = max(3, len(x_grid) // 4)
    ranges = np.array([g[i:i + w].max() - g[i:i + w].min()
                       for i in range(len(x_grid) - w + 1)])
    i0 = int(np.argmin(ranges))
    window = (i0, i0 + w)
    noise = 2.0 * float(np.median(se))
    plateau = bool(ranges[i0] <= max(noise, 1e-12))
    diffs = np.diff(g)
    monotone = bool(np.all(diffs > 0) or np.all(diffs < 0))
    warning = None
    if monotone and not plateau:
        warning = ("g(x) is monotone across the whole grid: no plateau; the "
                   "sample tail does not match the expected 1/x^2 class")
    elif not plateau:
        warning = "no window is flat at the noise level; estimate is indicative"
    mu = float(g[i0:i0 + w].mean())
    return MuZEstimate(mu, float(se[i0:i0 + w].mean()), x_grid, g, window,
                       plateau, warning)
