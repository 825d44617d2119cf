"""Martingale and Gibbs-type functionals over population snapshots.

The central object is the weighted sum

    Z(F, delta, s) = sum_u (X_u - delta)_+ exp(-X_u) F((X_u - delta) / sqrt(s)),

together with its plain specializations (additive weight, derivative weight),
the killed variant restricted to lineages that never crossed a barrier, and
the per-killed-particle progeny contributions that make the two variants add
up exactly, path by path.

Test functions are described by ``FunctionalSpec``: an evaluator with optional
first and second derivatives, a divergence exponent alpha (F ~ x^-alpha at 0)
and a growth constant kappa (|F| <= x^-alpha e^{kappa x}). Growth/Lipschitz
assumption flags are checked by grid sampling and warn rather than reject.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .engine import BarrierSpec, PopulationSnapshot, StoppingLineRecord

BESSEL_NORM = math.sqrt(2.0 / math.pi)


def bessel_time1_density(z):
    """Density of the Bessel(3) bridge-free marginal at time 1 from the origin."""
    z = np.asarray(z, dtype=float)
    return BESSEL_NORM * z * z * np.exp(-z * z / 2.0)


@dataclass(frozen=True)
class Term:
    """One monomial-exponential term c * x^p * exp(r x)."""

    coef: float
    power: float = 0.0
    rate: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.coef * np.exp(self.rate * x)
        if self.power:
            out = out * x ** self.power
        return out

    def derivative(self) -> list["Term"]:
        terms = []
        if self.power:
            terms.append(Term(self.coef * self.power, self.power - 1.0, self.rate))
        if self.rate:
            terms.append(Term(self.coef * self.rate, self.power, self.rate))
        return terms


def _eval_terms(terms, x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for t in terms:
        out = out + t(x)
    return out


@dataclass
class FunctionalSpec:
    """A test function F on (0, infinity) with derivative and growth metadata.

    alpha: divergence exponent at 0 (F ~ x^-alpha); evaluation wants alpha < 2,
    expectations against the Bessel density tolerate alpha < 3.
    kappa: growth constant in |F(x)| <= x^-alpha e^{kappa x}.
    flags: which assumption classes the function claims (checked by sampling).
    """

    name: str
    f: object
    fprime: object = None
    fsecond: object = None
    alpha: float = 0.0
    kappa: float = 1.0
    flags: tuple[str, ...] = ()
    terms: tuple[Term, ...] | None = None

    def __call__(self, x):
        return self.f(x)

    def scaled(self, c: float) -> "FunctionalSpec":
        """The functional x -> F(c x) (same divergence class, kappa scaled)."""
        f = self.f
        fp = self.fprime
        spec = FunctionalSpec(
            name=f"{self.name}@{c:g}",
            f=lambda x, f=f, c=c: f(c * np.asarray(x, dtype=float)),
            fprime=None if fp is None else (lambda x, fp=fp, c=c: c * fp(c * np.asarray(x, dtype=float))),
            alpha=self.alpha,
            kappa=self.kappa * c,
            flags=self.flags,
        )
        return spec

    @classmethod
    def from_terms(cls, name, terms, alpha=None, kappa=None, flags=("A1", "A2")):
        """Build from (coef, power, rate) triples; derivatives are symbolic."""
        tl = tuple(Term(*t) for t in terms)
        d1 = tuple(d for t in tl for d in t.derivative())
        d2 = tuple(d for t in d1 for d in t.derivative())
        if alpha is None:
            alpha = max(0.0, -min((t.power for t in tl), default=0.0))
        if kappa is None:
            kappa = max(1.0, max((t.rate for t in tl), default=0.0) + 0.5)
        return cls(
            name=name,
            f=lambda x, tl=tl: _eval_terms(tl, x),
            fprime=lambda x, d1=d1: _eval_terms(d1, x),
            fsecond=lambda x, d2=d2: _eval_terms(d2, x),
            alpha=float(alpha),
            kappa=float(kappa),
            flags=tuple(flags),
            terms=tl,
        )

    @classmethod
    def from_descriptor(cls, desc: dict) -> "FunctionalSpec":
        """Config-file form: {"name": ..., "terms": [[c, p, r], ...],
        optionally "pieces": [{"lo":, "hi":, "terms": [...]}, ...]}."""
        name = desc.get("name", "custom")
        if "pieces" in desc:
            pieces = [(float(p.get("lo", 0.0)), float(p.get("hi", math.inf)),
                       tuple(Term(*t) for t in p["terms"])) for p in desc["pieces"]]

            def f(x, pieces=pieces):
                x = np.asarray(x, dtype=float)
                out = np.zeros_like(x)
                for lo, hi, tl in pieces:
                    m = (x >= lo) & (x < hi)
                    if np.any(m):
                        out[m] = _eval_terms(tl, x[m])
                return out

            return cls(name=name, f=f,
                       alpha=float(desc.get("alpha", 0.0)),
                       kappa=float(desc.get("kappa", 1.0)),
                       flags=tuple(desc.get("flags", ())))
        return cls.from_terms(name, [tuple(t) for t in desc["terms"]],
                              alpha=desc.get("alpha"), kappa=desc.get("kappa"),
                              flags=tuple(desc.get("flags", ("A1", "A2"))))

    def check_assumptions(self, grid=None) -> list[str]:
        """Sample the claimed growth bounds on a log grid; return violations.

        The bounds are sufficient, not necessary, so violations warn.
        """
        if grid is None:
            grid = np.geomspace(1e-6, 1e2, 400)
        bad = []
        envelope = np.exp(self.kappa * grid)
        vals = np.asarray(self.f(grid), dtype=float)
        if "A1" in self.flags and np.any(np.abs(vals) > envelope * (1 + 1e-9)):
            bad.append("A1: |F(x)| <= e^{kappa x} fails on the sample grid")
        if "A2" in self.flags:
            fv = vals
            for lag in (1, 7):
                x, y = grid[lag:], grid[:-lag]
                lhs = np.abs(fv[lag:] - fv[:-lag])
                rhs = (x - y) * np.exp(self.kappa * x)
                if np.any(lhs > rhs * (1 + 1e-9)):
                    bad.append("A2: Lipschitz-growth bound fails on the sample grid")
                    break
        if any(fl.startswith("H") for fl in self.flags):
            env = grid ** (-self.alpha) * envelope
            if np.any(np.abs(vals) > env * (1 + 1e-9)):
                bad.append("H1: |F(x)| <= x^-alpha e^{kappa x} fails")
            if self.fprime is not None:
                dv = np.asarray(self.fprime(grid), dtype=float)
                if np.any(np.abs(dv) > grid ** (-self.alpha - 1) * envelope * (1 + 1e-9)):
                    bad.append("H2: |F'(x)| <= x^-alpha-1 e^{kappa x} fails")
            if self.fsecond is not None:
                dv = np.asarray(self.fsecond(grid), dtype=float)
                if np.any(np.abs(dv) > grid ** (-self.alpha - 2) * envelope * (1 + 1e-9)):
                    bad.append("H3: |F''(x)| <= x^-alpha-2 e^{kappa x} fails")
        for msg in bad:
            warnings.warn(f"{self.name}: {msg}", RuntimeWarning, stacklevel=2)
        return bad


_H_FLAGS = ("A1", "A2", "H1", "H2", "H3")


def catalog() -> dict[str, FunctionalSpec]:
    """Built-in test functions, addressable by key in configs."""
    mk = FunctionalSpec.from_terms
    cat = {
        "one": mk("one", [(1.0, 0.0, 0.0)], alpha=0.0, kappa=1.0, flags=_H_FLAGS),
        "x": mk("x", [(1.0, 1.0, 0.0)], alpha=0.0, kappa=1.0, flags=_H_FLAGS),
        "x2": mk("x2", [(1.0, 2.0, 0.0)], alpha=0.0, kappa=2.0, flags=_H_FLAGS),
        "x2_centered": mk("x2_centered", [(1.0, 2.0, 0.0), (-3.0, 0.0, 0.0)],
                          alpha=0.0, kappa=2.0, flags=_H_FLAGS),
        "exp_half": mk("exp_half", [(1.0, 0.0, 0.5)], alpha=0.0, kappa=1.0, flags=_H_FLAGS),
        "exp_neg": mk("exp_neg", [(1.0, 0.0, -1.0)], alpha=0.0, kappa=1.0, flags=_H_FLAGS),
        "inv_x": mk("inv_x", [(1.0, -1.0, 0.0)], alpha=1.0, kappa=1.0, flags=_H_FLAGS),
        "inv_sqrt_x": mk("inv_sqrt_x", [(1.0, -0.5, 0.0)], alpha=0.5, kappa=1.0, flags=_H_FLAGS),
        "inv_x32": mk("inv_x32", [(1.0, -1.5, 0.0)], alpha=1.5, kappa=1.0, flags=_H_FLAGS),
    }
    return cat


def get_functional(key) -> FunctionalSpec:
    """Resolve a catalog key, an ``exp:<rate>``/``pow:<p>`` form, or a spec."""
    if isinstance(key, FunctionalSpec):
        return key
    cat = catalog()
    if key in cat:
        return cat[key]
    if isinstance(key, str) and key.startswith("exp:"):
        rate = float(key[4:])
        return FunctionalSpec.from_terms(key, [(1.0, 0.0, rate)],
                                         alpha=0.0, kappa=max(1.0, rate + 0.5),
                                         flags=_H_FLAGS)
    if isinstance(key, str) and key.startswith("pow:"):
        p = float(key[4:])
        return FunctionalSpec.from_terms(key, [(1.0, p, 0.0)],
                                         alpha=max(0.0, -p), kappa=max(1.0, p),
                                         flags=_H_FLAGS)
    raise KeyError(f"unknown functional key {key!r}; catalog has {sorted(cat)}")


def expected_bessel_value(F, tol: float = 1e-11) -> tuple[float, float]:
    """E[F(R_1)] from the origin, by adaptive quadrature. -> (value, error).

    For a divergence exponent alpha > 0 the (0, 1] head is integrated in
    w = log z, where the integrand decays like e^{(3-alpha) w}; alpha >= 3 is
    not integrable and is rejected.
    """
    f = F.f if isinstance(F, FunctionalSpec) else F
    alpha = F.alpha if isinstance(F, FunctionalSpec) else 0.0
    kappa = F.kappa if isinstance(F, FunctionalSpec) else 2.0
    if alpha >= 3.0:
        raise ValueError(
            f"divergence exponent alpha={alpha} >= 3: F is not integrable "
            "against the z^2 e^{-z^2/2} density near the origin")

    def integrand(z):
        return float(f(z)) * BESSEL_NORM * z * z * math.exp(-z * z / 2.0)

    # beyond kappa + ~15 the e^{kappa z - z^2/2} envelope is below 1e-30,
    # and a literal infinite limit would probe f where exp() overflows
    zmax = max(10.0, kappa) + 15.0
    if alpha > 0:
        head, e1 = integrate.quad(lambda w: integrand(math.exp(w)) * math.exp(w),
                                  -60.0, 0.0, epsabs=tol, epsrel=tol, limit=300)
    else:
        head, e1 = integrate.quad(integrand, 0.0, 1.0,
                                  epsabs=tol, epsrel=tol, limit=300)
    tail, e2 = integrate.quad(integrand, 1.0, zmax,
                              epsabs=tol, epsrel=tol, limit=300)
    val, err = head + tail, e1 + e2
    if not math.isfinite(val):
        raise ValueError(f"E[F(R_1)] quadrature diverged for {getattr(F, 'name', F)!r}")
    return val, err


# ---------------------------------------------------------------------------
# snapshot evaluations

def eval_additive(snapshot: PopulationSnapshot) -> float:
    """sum exp(-X_u) over the census."""
    return float(np.exp(-snapshot.positions).sum())


def eval_derivative(snapshot: PopulationSnapshot) -> float:
    """sum X_u exp(-X_u) over the census."""
    x = snapshot.positions
    return float((x * np.exp(-x)).sum())


def _gibbs_sum(x, ids, F, delta, scale_t):
    if scale_t <= 0:
        raise ValueError(f"scale time must be positive, got {scale_t}")
    arg = x - delta
    mask = arg > 0.0
    if not np.any(mask):
        return 0.0
    arg = arg[mask]
    vals = np.asarray(F(arg / math.sqrt(scale_t)), dtype=float)
    good = np.isfinite(vals)
    if not np.all(good):
        j = int(np.nonzero(~good)[0][0])
        pid = int(ids[mask][j]) if ids is not None else -1
        raise ValueError(
            f"functional evaluated non-finite at particle id={pid}, "
            f"position {float(arg[j] + delta)}")
    return float((arg * np.exp(-(arg + delta)) * vals).sum())


def eval_gibbs(snapshot: PopulationSnapshot, F, delta: float = 0.0,
               scale_t: float | None = None) -> float:
    """sum (X_u - delta)_+ exp(-X_u) F((X_u - delta)/sqrt(scale_t)).

    Terms at or below the shift contribute zero; F is never evaluated there.
    ``scale_t`` defaults to the snapshot time.
    """
    F = get_functional(F)
    if scale_t is None:
        scale_t = snapshot.time
    return _gibbs_sum(snapshot.positions, snapshot.ids, F.f, delta, scale_t)


def _require_matching_barrier(snapshot, window, gamma):
    bar: BarrierSpec | None = snapshot.barrier
    if bar is None or bar.level is None:
        raise ValueError("snapshot was produced without a killing barrier")
    if gamma is not None and bar.level != gamma:
        raise ValueError(f"barrier mismatch: engine level {bar.level}, requested {gamma}")
    if window is not None and (bar.t_start != window[0] or bar.t_end != window[1]):
        raise ValueError(f"barrier window mismatch: engine ({bar.t_start}, {bar.t_end}), "
                         f"requested {tuple(window)}")
    return bar


def eval_killed(snapshot: PopulationSnapshot, F, delta: float, scale_t: float,
                window=None, gamma: float | None = None) -> float:
    """The same sum restricted to lineages the barrier never killed."""
    _require_matching_barrier(snapshot, window, gamma)
    F = get_functional(F)
    keep = snapshot.tags == 0
    return _gibbs_sum(snapshot.positions[keep], snapshot.ids[keep],
                      F.f, delta, scale_t)


def eval_contributions(stopping_line: list[StoppingLineRecord],
                       snapshot: PopulationSnapshot, F, gamma: float,
                       scale_t: float, ef_r1: float | None = None) -> list[float]:
    """Per killed particle: the progeny's contribution

        Omega_u = sum_{v >= u} (X_v - gamma)_+ e^{-X_v} (F(.) - E[F(R_1)])

    over the census, grouped by the killed-ancestor tag. Requires the engine
    ran with continue_tagged lineages.
    """
    bar = _require_matching_barrier(snapshot, None, gamma)
    if not bar.continue_tagged:
        raise ValueError("snapshot lacks lineage tags: engine must run with "
                         "barrier.continue_tagged=True")
    F = get_functional(F)
    if ef_r1 is None:
        ef_r1, _ = expected_bessel_value(F)
    fbar = lambda x: np.asarray(F.f(x), dtype=float) - ef_r1
    out = []
    tags = snapshot.tags
    for rec in stopping_line:
        sel = tags == np.uint64(rec.particle_id)
        out.append(_gibbs_sum(snapshot.positions[sel], snapshot.ids[sel],
                              fbar, gamma, scale_t))
    return out


def decomposition_gap(snapshot: PopulationSnapshot,
                      stopping_line: list[StoppingLineRecord], F,
                      gamma: float, scale_t: float) -> float:
    """Residual of the exact path identity

        Z(F, gamma) - E[F(R1)] Z(1, gamma)
            = Z_killed(F - E[F(R1)], gamma) + sum_u Omega_u.

    Zero up to float rounding on every path, whatever the seed.
    """
    F = get_functional(F)
    ef, _ = expected_bessel_value(F)
    total_F = eval_gibbs(snapshot, F, gamma, scale_t)
    total_1 = eval_gibbs(snapshot, "one", gamma, scale_t)
    killed_F = eval_killed(snapshot, F, gamma, scale_t)
    killed_1 = eval_killed(snapshot, "one", gamma, scale_t)
    omegas = eval_contributions(stopping_line, snapshot, F, gamma, scale_t, ef_r1=ef)
    return (total_F - ef * total_1) - (killed_F - ef * killed_1) - sum(omegas)
