"""Stochastic and analytic kernels: Gaussian steps, branch clocks, offspring
draws, Brownian-bridge barrier corrections, Bessel(3) sampling and densities,
and the density of Brownian motion killed at the origin.

Defaults follow the critical normalization sigma = 1, drift = 1, branching
rate 1/(2 E[L-1]); these are exactly the values under which the additive
weight ``sum exp(-X_u(t))`` has mean one at every time and the reweighted
single-particle motion is a standard driftless Brownian motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .philox import RngStream

SIGMA_DEFAULT = 1.0
DRIFT_DEFAULT = 1.0


@dataclass(frozen=True)
class OffspringLaw:
    """Reproduction law: a pmf on {0, 1, 2, ...} with mean > 1.

    Carries the branching rate ``rate = 1 / (2 (mean - 1))`` of the critical
    normalization. The pmf must have mean > 1 (supercritical) and, being
    finitely supported, automatically has a finite second moment; both are
    checked at construction.
    """

    counts: np.ndarray
    probs: np.ndarray
    mean: float = field(init=False)
    second_moment: float = field(init=False)
    rate: float = field(init=False)
    cdf: np.ndarray = field(init=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if counts.ndim != 1 or counts.shape != probs.shape or counts.size == 0:
            raise ValueError("offspring pmf needs matching 1-d counts/probs")
        if np.any(counts < 0) or np.any(probs < 0):
            raise ValueError("offspring pmf entries must be non-negative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"offspring pmf sums to {probs.sum()}, not 1")
        order = np.argsort(counts)
        counts, probs = counts[order], probs[order]
        m = float(counts @ probs)
        m2 = float((counts.astype(float) ** 2) @ probs)
        if not m > 1.0:
            raise ValueError(f"offspring mean must exceed 1, got {m}")
        if not math.isfinite(m2):
            raise ValueError("offspring second moment must be finite")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "second_moment", m2)
        object.__setattr__(self, "rate", 1.0 / (2.0 * (m - 1.0)))
        object.__setattr__(self, "cdf", np.cumsum(probs))

    @classmethod
    def from_pmf(cls, pmf: dict[int, float]) -> "OffspringLaw":
        ks = sorted(pmf)
        return cls(np.array(ks, dtype=np.int64),
                   np.array([pmf[k] for k in ks], dtype=np.float64))

    @classmethod
    def binary(cls) -> "OffspringLaw":
        """Always two offspring; rate 1/2."""
        return cls.from_pmf({2: 1.0})

    @property
    def is_degenerate(self) -> bool:
        return self.counts.size == 1

    def pair_rate(self) -> float:
        """rate * E[L(L-1)]: the constant in the two-path second-moment identity."""
        counts = self.counts.astype(float)
        return self.rate * float((counts * (counts - 1.0)) @ self.probs)


def gaussian_step(stream: RngStream, dt: float,
                  sigma: float = SIGMA_DEFAULT, drift: float = DRIFT_DEFAULT) -> float:
    """One diffusive increment over dt: Normal(drift*dt, sigma^2*dt)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return drift * dt + sigma * math.sqrt(dt) * stream.normal()


def branch_time(stream: RngStream, law: OffspringLaw) -> float:
    """Exponential lifetime with the law's branching rate."""
    return stream.exponential(law.rate)


def offspring_count(stream: RngStream, law: OffspringLaw) -> int:
    """Draw a litter size from the pmf (inverse-CDF on one uniform)."""
    u = stream.uniform()
    return int(law.counts[np.searchsorted(law.cdf, u)])


def bridge_crossing_prob(x0: float, x1: float, dt: float, level: float,
                         sigma: float = SIGMA_DEFAULT) -> float:
    """P(min of the Brownian bridge from x0 to x1 over dt reaches ``level``).

    Equals exp(-2 (x0-level)(x1-level) / (sigma^2 dt)) when both endpoints are
    above the level, 1 when either endpoint is at or below it.
    """
    a = x0 - level
    b = x1 - level
    if a <= 0.0 or b <= 0.0:
        return 1.0
    return math.exp(-2.0 * a * b / (sigma * sigma * dt))


def bridge_min_hits(stream: RngStream, x0: float, x1: float, dt: float,
                    level: float, sigma: float = SIGMA_DEFAULT):
    """Did the path between grid points dip to ``level``?  -> (hit, time).

    Exact bridge-crossing probability; on a hit the crossing time within the
    step is attributed uniformly (first-order accurate in dt). Endpoints at or
    below the level hit deterministically. Consumes one uniform for the
    decision and, on a hit, one more for the time.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    p = bridge_crossing_prob(x0, x1, dt, level, sigma)
    if p < 1.0:
        if not stream.uniform() < p:
            return False, None
    if x0 - level <= 0.0:
        return True, 0.0
    return True, stream.uniform() * dt


def bessel3_sample(stream: RngStream, x: float, t: float,
                   n: int | None = None):
    """R_t of a Bessel(3) process from x: the norm of a 3-d Gaussian
    displacement of (x, 0, 0)."""
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    if x < 0:
        raise ValueError(f"start must be non-negative, got {x}")
    z = stream.normal(3 * (1 if n is None else n)).reshape(-1, 3)
    s = math.sqrt(t)
    r = np.sqrt((x + s * z[:, 0]) ** 2 + (s * z[:, 1]) ** 2 + (s * z[:, 2]) ** 2)
    return float(r[0]) if n is None else r


def bessel3_density(x: float, t: float, z):
    """Density of R_t started from x >= 0, evaluated at z >= 0.

    Time-1 forms: sqrt(2/pi) z^2 e^{-z^2/2} from the origin, and
    (z/x) (2 pi)^{-1/2} e^{-(z-x)^2/2} (1 - e^{-2 z x}) from x > 0; other t by
    diffusive rescaling. The x -> 0 limit is taken smoothly via expm1.
    """
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    if x < 0:
        raise ValueError(f"start must be non-negative, got {x}")
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("density argument must be non-negative")
    s = math.sqrt(t)
    zs = z / s
    xs = x / s
    if xs < 1e-12:
        out = math.sqrt(2.0 / math.pi) * zs * zs * np.exp(-zs * zs / 2.0)
    else:
        # -expm1(-2 z x) / x -> 2 z as x -> 0, so this is stable for small x
        out = (zs / xs) / math.sqrt(2.0 * math.pi) * np.exp(-((zs - xs) ** 2) / 2.0) \
            * (-np.expm1(-2.0 * zs * xs))
    out = out / s
    return float(out) if out.ndim == 0 else out


def bessel3_cdf(x: float, t: float, z):
    """CDF matching :func:`bessel3_density` (closed form via the normal CDF)."""
    from scipy.stats import norm

    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    z = np.asarray(z, dtype=float)
    s = math.sqrt(t)
    zs = np.maximum(z / s, 0.0)
    xs = x / s
    if xs < 1e-12:
        out = (2.0 * norm.cdf(zs) - 1.0) - np.sqrt(2.0 / np.pi) * zs * np.exp(-zs * zs / 2.0)
    else:
        phi = norm.pdf
        Phi = norm.cdf
        out = Phi(zs - xs) + Phi(zs + xs) - 1.0 + (phi(zs + xs) - phi(zs - xs)) / xs
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def killed_bm_density(r: float, x, y):
    """q_r(x, y): transition density at time r of Brownian motion from x > 0
    killed at the origin, evaluated at y > 0."""
    if not r > 0:
        raise ValueError(f"time must be positive, got {r}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("killed-motion density needs x > 0 and y > 0")
    out = (np.exp(-((x - y) ** 2) / (2.0 * r)) - np.exp(-((x + y) ** 2) / (2.0 * r))) \
        / math.sqrt(2.0 * math.pi * r)
    return float(out) if out.ndim == 0 else out


def first_passage_cdf(x: float, s):
    """P(Brownian motion from x > 0 first hits 0 by time s) = erfc(x / sqrt(2s)).

    This is also the normalized time profile of the killed-particle line for a
    killing barrier at 0: the expected count killed by time s is
    exp(-x) * first_passage_cdf(x, s).
    """
    from scipy.special import erfc

    s = np.asarray(s, dtype=float)
    out = np.where(s > 0, erfc(x / np.sqrt(2.0 * np.maximum(s, 1e-300))), 0.0)
    return float(out) if out.ndim == 0 else out
