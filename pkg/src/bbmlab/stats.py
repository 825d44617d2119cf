"""Replicate ensembles and fluctuation statistics.

Runs deterministic, worker-count-independent ensembles from a serializable
manifest, extracts martingale values per replicate, forms the centered and
rescaled fluctuation statistics, and provides the verification instruments:
empirical characteristic functions, CF distances, Hill tail-index estimates,
stopping-line moment checks, and a best-fit conditional-Cauchy mixture.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, optimize

from . import __version__
from .engine import (BarrierSpec, EngineConfig, ResourceBudgetError, evolve,
                     snapshot_at)
from .functionals import (eval_additive, eval_derivative, eval_gibbs,
                          expected_bessel_value, get_functional)
from .kernels import OffspringLaw

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def default_workers() -> int:
    env = os.environ.get("BBM_LAB_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class RunManifest:
    """Complete, serializable description of an ensemble run.

    Re-running the same manifest reproduces every output byte-for-byte,
    independently of how many workers execute it.
    """

    kind: str                      # fluctuations | stopping-line | simulate
    t: float
    replicates: int
    seed: int
    proxy_gap: float = 5.0         # fluctuations: limit-mass proxy read at t + gap
    functional: str = "one"
    mode: str = "additive-cauchy"  # or general-F
    dt: float = 1e-2
    x0: float = 0.0
    offspring: dict = field(default_factory=lambda: {"2": 1.0})
    barrier_level: float | None = None
    barrier_t_start: float = 0.0
    barrier_t_end: float = math.inf
    floor: float | None = None
    continue_tagged: bool = False
    x_max: float | None = 40.0
    max_segments: int = 5_000_000
    snapshot_times: tuple[float, ...] = ()
    version: str = __version__

    def law(self) -> OffspringLaw:
        return OffspringLaw.from_pmf({int(k): float(v) for k, v in self.offspring.items()})

    def barrier(self) -> BarrierSpec | None:
        if self.barrier_level is None and self.floor is None:
            return None
        return BarrierSpec(level=self.barrier_level, t_start=self.barrier_t_start,
                           t_end=self.barrier_t_end, floor=self.floor,
                           continue_tagged=self.continue_tagged)

    def engine_config(self, replicate: int, snapshot_times) -> EngineConfig:
        return EngineConfig(
            t_end=max((self.barrier_t_end if math.isfinite(self.barrier_t_end)
                       else 0.0), max(snapshot_times, default=self.t), self.t),
            dt=self.dt, x0=self.x0, law=self.law(),
            snapshot_times=tuple(snapshot_times), barrier=self.barrier(),
            x_max=self.x_max, max_segments=self.max_segments,
            seed=self.seed, replicate=replicate)

    def to_json(self) -> str:
        d = asdict(self)
        d["barrier_t_end"] = ("inf" if math.isinf(self.barrier_t_end)
                              else self.barrier_t_end)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        if d.get("barrier_t_end") == "inf":
            d["barrier_t_end"] = math.inf
        d["snapshot_times"] = tuple(d.get("snapshot_times", ()))
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class FluctuationSample:
    """Per-replicate martingale readings plus the derived statistic."""

    replicate: int
    t: float
    W_t: float
    Z_t: float
    Z_F: float
    T: float
    Z_T: float
    statistic: float = math.nan
    ok: bool = True
    note: str = ""


# ---------------------------------------------------------------------------
# ensemble execution (worker-count independent)

def _fluct_one(args) -> FluctuationSample:
    manifest_json, replicate = args
    m = RunManifest.from_json(manifest_json)
    T = m.t + m.proxy_gap
    try:
        res = evolve(m.engine_config(replicate, (m.t, T)))
    except ResourceBudgetError as exc:
        return FluctuationSample(replicate, m.t, math.nan, math.nan, math.nan,
                                 T, math.nan, ok=False, note=str(exc))
    st = snapshot_at(res, m.t)
    sT = snapshot_at(res, T)
    F = get_functional(m.functional)
    return FluctuationSample(
        replicate=replicate, t=m.t,
        W_t=eval_additive(st), Z_t=eval_derivative(st),
        Z_F=eval_gibbs(st, F, 0.0, m.t),
        T=T, Z_T=eval_derivative(sT))


def _stopping_one(args):
    manifest_json, replicate = args
    m = RunManifest.from_json(manifest_json)
    try:
        res = evolve(m.engine_config(replicate, m.snapshot_times or (m.t,)))
    except ResourceBudgetError as exc:
        return (replicate, False, str(exc), [], False)
    return (replicate, True, "", [float(x) for x in res.line_times],
            res.any_floor_hit())


def _map_replicates(fn, manifest: RunManifest, workers: int | None):
    workers = workers or default_workers()
    args = [(manifest.to_json(), r) for r in range(manifest.replicates)]
    if workers == 1:
        return [fn(a) for a in args]
    chunk = max(1, manifest.replicates // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args, chunksize=chunk))


def run_fluctuation_ensemble(manifest: RunManifest,
                             workers: int | None = None) -> list[FluctuationSample]:
    """All replicates, statistics attached; deterministic given the manifest."""
    if manifest.kind != "fluctuations":
        raise ValueError(f"manifest kind must be 'fluctuations', got {manifest.kind!r}")
    samples = _map_replicates(_fluct_one, manifest, workers)
    ok = [s for s in samples if s.ok]
    if not ok:
        raise RuntimeError("every replicate failed (budget); nothing to report")
    attach_statistics(samples, manifest.mode, manifest.functional)
    return samples


def run_stopping_ensemble(manifest: RunManifest, workers: int | None = None):
    """-> (kill counts, per-replicate kill-time arrays, floor-hit flags, failed)."""
    rows = _map_replicates(_stopping_one, manifest, workers)
    counts = np.array([len(r[3]) for r in rows if r[1]], dtype=float)
    times_by_rep = [np.asarray(r[3], dtype=float) for r in rows if r[1]]
    floors = np.array([r[4] for r in rows if r[1]], dtype=bool)
    failed = [r[0] for r in rows if not r[1]]
    return counts, times_by_rep, floors, failed


# ---------------------------------------------------------------------------
# statistics

def fluctuation_statistic(t, W_t, Z_t, Z_F, Z_T, mode: str,
                          ef: float | None = None,
                          logt_coeff: float | None = None) -> float:
    """The centered, sqrt(t)-rescaled fluctuation statistic.

    additive-cauchy:  sqrt(t) (sqrt(t) W_t - sqrt(2/pi) Z_T)
    general-F:        sqrt(t) (Z_F - E[F(R1)] Z_T
                               + (log t)/(2 sqrt t) * logt_coeff * Z_T)
    """
    rt = math.sqrt(t)
    if mode == "additive-cauchy":
        return rt * (rt * W_t - SQRT_2_OVER_PI * Z_T)
    if mode == "general-F":
        if ef is None or logt_coeff is None:
            raise ValueError("general-F mode needs ef and logt_coeff")
        return rt * (Z_F - ef * Z_T + math.log(t) / (2.0 * rt) * logt_coeff * Z_T)
    raise ValueError(f"unknown statistic mode {mode!r}")


def attach_statistics(samples: list[FluctuationSample], mode: str,
                      functional="one") -> None:
    ef = logt = None
    if mode == "general-F":
        from .limits import logt_coefficient
        F = get_functional(functional)
        ef, _ = expected_bessel_value(F)
        logt = logt_coefficient(F)
    for s in samples:
        if s.ok:
            s.statistic = fluctuation_statistic(s.t, s.W_t, s.Z_t, s.Z_F, s.Z_T,
                                                mode, ef, logt)


def empirical_cf(samples, lam_grid):
    """Mean of e^{i lam x} per grid point. -> (values, standard errors)."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("empirical CF needs samples")
    lam = np.asarray(lam_grid, dtype=float)
    phase = np.exp(1j * np.outer(lam, x))
    vals = phase.mean(axis=1)
    n = x.size
    se = np.sqrt(phase.real.var(axis=1) + phase.imag.var(axis=1)) / math.sqrt(n)
    return vals, se


def cf_distance(ecf, model_cf, lam_grid):
    """sup |ecf - model| over the grid, plus the per-point profile."""
    ecf = np.asarray(ecf)
    model = np.asarray(model_cf)
    prof = np.abs(ecf - model)
    return float(prof.max()), prof


def hill_index(samples, k: int | None = None, variant: str = "abs"):
    """Hill tail-index estimate over the top-k order statistics. -> (alpha, se).

    variant 'abs' uses |x|; 'positive' uses the positive part only.
    """
    x = np.asarray(samples, dtype=float)
    x = np.abs(x) if variant == "abs" else x[x > 0]
    x = x[x > 0]
    n = x.size
    if k is None:
        k = max(10, n // 100)
    if not 0 < k < n / 2:
        raise ValueError(f"need 0 < k < n/2, got k={k}, n={n}")
    xs = np.sort(x)[::-1]
    gamma = float(np.mean(np.log(xs[:k]) - np.log(xs[k])))
    alpha = 1.0 / gamma
    return alpha, alpha / math.sqrt(k)


def hill_sensitivity(samples, variant: str = "abs"):
    """Hill estimates across k in [n/200, n/20]: the honest finite-sample report."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    ks = np.unique(np.linspace(max(10, n // 200), max(20, n // 20), 12, dtype=int))
    return [(int(k), *hill_index(x, int(k), variant)) for k in ks if k < n / 2]


def stoppingline_moment_check(times_by_rep, x: float, phi=None,
                              horizon: float | None = None) -> dict:
    """Monte Carlo E_x[sum phi(T_u)] against the closed-form time profile

        x e^{-x} int phi(r) e^{-x^2/2r} (2 pi)^{-1/2} r^{-3/2} dr,

    restricted to kills before the simulation horizon when one is given.
    phi=None means phi == 1 (the line-size expectation e^{-x} when the
    horizon covers everything).
    """
    if phi is None:
        phi = lambda r: np.ones_like(np.asarray(r, dtype=float))
    per = np.array([float(np.sum(np.asarray(phi(ts), dtype=float))) if ts.size else 0.0
                    for ts in times_by_rep])
    n = per.size
    mean = float(per.mean())
    se = float(per.std(ddof=1) / math.sqrt(n))
    closed = _stopping_intensity_integral(
        x, phi, 0.0, horizon if horizon is not None else math.inf)
    z = (mean - closed) / se if se > 0 else math.copysign(math.inf, mean - closed)
    return {"mc_mean": mean, "se": se, "closed_form": closed, "z": float(z), "n": n}


def _stopping_intensity_integral(x, phi, lo, hi):
    f = lambda r: float(np.asarray(phi(r), dtype=float)) \
        * math.exp(-x * x / (2.0 * r)) / (math.sqrt(2.0 * math.pi) * r ** 1.5)
    if math.isinf(hi):
        val, _ = integrate.quad(f, lo if lo > 0 else 1e-12, np.inf, limit=300)
    else:
        val, _ = integrate.quad(f, lo if lo > 0 else 1e-12, hi, limit=300)
    return x * math.exp(-x) * val


def fit_cauchy_mixture(statistics, z_proxies, lam_grid):
    """Best-fit (scale, drift) of the conditional-Cauchy mixture model

        model(lam) = mean_j exp(-Z_j (scale |lam| - i drift lam)),

    minimizing the sup CF distance on the grid. -> (scale, drift, sup_dist).

    The limit mass is almost surely positive; the finite-horizon proxy can
    dip negative on rare paths (a single low particle flips the sign of the
    derivative weight), and those proxies are excluded from the mixture.
    """
    stats = np.asarray(statistics, dtype=float)
    zs = np.asarray(z_proxies, dtype=float)
    zs = zs[zs > 0]
    if zs.size == 0:
        raise ValueError("no positive mixture proxies")
    lam = np.asarray(lam_grid, dtype=float)
    ecf, _ = empirical_cf(stats, lam)

    def model(params):
        c, d = params
        expo = -np.outer(np.abs(lam), zs) * c + 1j * np.outer(lam, zs) * d
        return np.exp(expo).mean(axis=1)

    def loss(params):
        if params[0] <= 0:
            return 10.0
        return float(np.abs(ecf - model(params)).max())

    best = optimize.minimize(loss, x0=np.array([2.0, 0.4]),
                             method="Nelder-Mead",
                             options={"xatol": 1e-4, "fatol": 1e-5, "maxiter": 400})
    c, d = best.x
    return float(c), float(d), loss(best.x)


# ---------------------------------------------------------------------------
# output files

def write_samples_csv(path, manifest: RunManifest,
                      samples: list[FluctuationSample]) -> None:
    h = manifest.hash()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["format", "bbmlab-samples-v1"])
        wr.writerow(["manifest", "replicate", "t", "W_t", "Z_t", "Z_F",
                     "T", "Z_T", "statistic", "ok", "note"])
        for s in samples:
            wr.writerow([h, s.replicate, repr(s.t), repr(s.W_t), repr(s.Z_t),
                         repr(s.Z_F), repr(s.T), repr(s.Z_T), repr(s.statistic),
                         int(s.ok), s.note])


def verdict(check: str, observed, predicted, tolerance, passed: bool,
            runtime: float | None = None, **extra) -> dict:
    out = {"check": check, "observed": observed, "predicted": predicted,
           "tolerance": tolerance, "pass": bool(passed)}
    if runtime is not None:
        out["runtime_s"] = round(runtime, 3)
    out.update(extra)
    return out


def write_verdicts(path, verdicts: list[dict]) -> None:
    with open(path, "w") as fh:
        json.dump({"format": "bbmlab-verdicts-v1", "checks": verdicts},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
