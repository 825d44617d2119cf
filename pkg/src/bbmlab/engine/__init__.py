"""Branching Brownian particle engine.

Evolves the population on [0, T] under the critical normalization
(sigma = 1, drift = 1/2, rate = 1/(2 E[L-1])), with an optional killing
barrier on a time window, an optional absorbing floor, exact branch clocks,
snapshot capture at pre-declared times, and stopping-line extraction.

Two interchangeable backends implement the same lineage contract: a compiled
C core (built from ``_core.pyx``) and a numpy fallback (``_pycore``). The
compiled one is picked when importable; set ``BBMLAB_BACKEND=py`` or ``=c``
to force a choice. Both produce bit-identical results for a given seed.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from ..kernels import DRIFT_DEFAULT, SIGMA_DEFAULT, OffspringLaw
from ..philox import derive_key

__all__ = [
    "BarrierSpec", "EngineConfig", "StoppingLineRecord", "PopulationSnapshot",
    "EvolveResult", "ConfigError", "ResourceBudgetError", "evolve",
    "snapshot_at", "extract_stopping_line", "backend_name",
    "write_snapshots", "read_snapshots",
]


class ConfigError(ValueError):
    """Invalid engine configuration; the message names the offending field."""


class ResourceBudgetError(RuntimeError):
    """Particle budget exhausted. Carries the partial run counters."""

    def __init__(self, message: str, stats: dict):
        super().__init__(message)
        self.stats = stats


def _load_backend():
    choice = os.environ.get("BBMLAB_BACKEND", "").lower()
    if choice in ("py", "python", "numpy"):
        from . import _pycore
        return _pycore, "python"
    try:
        from . import _core
        return _core, "c"
    except ImportError:
        if choice in ("c", "compiled"):
            raise
        from . import _pycore
        return _pycore, "python"


_BACKEND, _BACKEND_NAME = _load_backend()


def backend_name() -> str:
    return _BACKEND_NAME


@dataclass(frozen=True)
class BarrierSpec:
    """Killing level on a time window, plus an optional absorbing floor.

    ``level=None`` disables killing (floor-only configs). A modelled barrier
    like level = log(t)/2 + beta is the caller's choice of numbers; nothing
    here depends on how the level was produced.
    """

    level: float | None = None
    t_start: float = 0.0
    t_end: float = math.inf
    floor: float | None = None
    continue_tagged: bool = False

    def __post_init__(self):
        if self.level is not None and not math.isfinite(self.level):
            raise ConfigError("barrier.level must be finite or None")
        if math.isnan(self.t_start) or self.t_start < 0:
            raise ConfigError("barrier.t_start must be >= 0")
        if not self.t_start <= self.t_end:
            raise ConfigError("barrier.t_start must not exceed barrier.t_end")
        if self.floor is not None:
            if not math.isfinite(self.floor):
                raise ConfigError("barrier.floor must be finite or None")
            if self.level is not None and self.floor >= self.level:
                raise ConfigError("barrier.floor must lie below barrier.level")


@dataclass(frozen=True)
class EngineConfig:
    """Everything one replicate needs; hashable into a reproducible run."""

    t_end: float
    dt: float = 1e-2
    x0: float = 0.0
    sigma: float = SIGMA_DEFAULT
    drift: float = DRIFT_DEFAULT
    law: OffspringLaw = field(default_factory=OffspringLaw.binary)
    snapshot_times: tuple[float, ...] = ()
    barrier: BarrierSpec | None = None
    x_max: float | None = 40.0
    max_segments: int = 5_000_000
    seed: int = 0
    replicate: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.t_end) and self.t_end > 0):
            raise ConfigError("t_end must be positive and finite")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ConfigError("dt must be positive")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        snaps = tuple(float(s) for s in self.snapshot_times)
        if any(s < 0 or s > self.t_end for s in snaps):
            raise ConfigError("snapshot_times must lie in [0, t_end]")
        if len(set(snaps)) != len(snaps):
            raise ConfigError("snapshot_times must be distinct")
        object.__setattr__(self, "snapshot_times", tuple(sorted(snaps)))
        if self.x_max is not None:
            if self.barrier is not None and self.barrier.level is not None \
                    and self.x_max <= self.barrier.level + 10.0:
                raise ConfigError("x_max must exceed the barrier level by more than 10")
            if self.x_max <= self.x0:
                raise ConfigError("x_max must exceed the start position x0")
        if self.max_segments <= 0:
            raise ConfigError("max_segments must be positive")


@dataclass(frozen=True)
class StoppingLineRecord:
    """A killed particle: who, when, where, and whether it was already at or
    below the level when the killing window opened."""

    particle_id: int
    time: float
    position: float
    at_window_start: bool


@dataclass
class PopulationSnapshot:
    """Census at one scheduled time: ids, positions, and the id of the killed
    ancestor for lineages that passed through the stopping line (0 = none)."""

    time: float
    ids: np.ndarray
    positions: np.ndarray
    tags: np.ndarray
    barrier: BarrierSpec | None = None

    def __len__(self):
        return len(self.ids)


@dataclass
class EvolveResult:
    config: EngineConfig
    snapshots: list[PopulationSnapshot]
    line_ids: np.ndarray
    line_times: np.ndarray
    line_positions: np.ndarray
    line_window_start: np.ndarray
    floor_ids: np.ndarray
    floor_times: np.ndarray
    stats: dict

    def stopping_line(self) -> list[StoppingLineRecord]:
        return [StoppingLineRecord(int(i), float(t), float(x), bool(w))
                for i, t, x, w in zip(self.line_ids, self.line_times,
                                      self.line_positions, self.line_window_start)]

    def any_floor_hit(self) -> bool:
        return len(self.floor_ids) > 0


def evolve(config: EngineConfig) -> EvolveResult:
    """Run one replicate. Deterministic in (seed, replicate) and config."""
    law = config.law
    bar = config.barrier
    has_barrier = bar is not None and bar.level is not None
    has_floor = bar is not None and bar.floor is not None
    raw = _BACKEND.evolve_replicate(
        derive_key(config.seed, config.replicate),
        float(config.x0), float(config.t_end), float(config.dt),
        float(config.sigma), float(config.drift), float(law.rate),
        np.asarray(law.counts, dtype=np.int64),
        np.asarray(law.cdf, dtype=np.float64),
        np.asarray(config.snapshot_times, dtype=np.float64),
        bool(has_barrier),
        float(bar.level) if has_barrier else 0.0,
        float(bar.t_start) if has_barrier else 0.0,
        float(bar.t_end) if has_barrier else math.inf,
        bool(bar.continue_tagged) if bar is not None else False,
        bool(has_floor),
        float(bar.floor) if has_floor else 0.0,
        float(config.x_max) if config.x_max is not None else math.inf,
        int(config.max_segments),
    )
    stats = raw["stats"]
    if stats["budget_exceeded"]:
        raise ResourceBudgetError(
            f"particle budget exhausted after {stats['segments']} lineage segments "
            f"(max_segments={config.max_segments})", stats)
    snaps = [PopulationSnapshot(t, i, p, g, bar)
             for t, i, p, g in zip(config.snapshot_times, raw["snap_ids"],
                                   raw["snap_pos"], raw["snap_tag"])]
    return EvolveResult(config, snaps, raw["line_id"], raw["line_T"],
                        raw["line_X"], raw["line_window_start"],
                        raw["floor_id"], raw["floor_T"], stats)


def snapshot_at(result: EvolveResult, t: float) -> PopulationSnapshot:
    """The stored census at a scheduled time; unscheduled times are an error."""
    for snap in result.snapshots:
        if snap.time == t:
            return snap
    raise ValueError(f"time {t} is not in the snapshot schedule "
                     f"{result.config.snapshot_times}")


def extract_stopping_line(result: EvolveResult, window=None) -> list[StoppingLineRecord]:
    """Killed particles whose killing time falls in [t1, t2] (whole line if None)."""
    if window is None:
        return result.stopping_line()
    t1, t2 = window
    keep = (result.line_times >= t1) & (result.line_times <= t2)
    return [StoppingLineRecord(int(i), float(t), float(x), bool(w))
            for i, t, x, w in zip(result.line_ids[keep], result.line_times[keep],
                                  result.line_positions[keep],
                                  result.line_window_start[keep])]


# ---------------------------------------------------------------------------
# snapshot dump: versioned binary, little-endian, records sorted by id

_MAGIC = b"BBMLSNAP"
_VERSION = 1


def write_snapshots(path, result: EvolveResult) -> None:
    """Replayable dump of all snapshots (binary) for one replicate."""
    meta = {
        "version": _VERSION,
        "seed": result.config.seed,
        "replicate": result.config.replicate,
        "t_end": result.config.t_end,
        "times": list(result.config.snapshot_times),
        "stats": result.stats,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(result.snapshots)))
        for snap in result.snapshots:
            fh.write(struct.pack("<dQ", snap.time, len(snap)))
            fh.write(snap.ids.astype("<u8").tobytes())
            fh.write(snap.positions.astype("<f8").tobytes())
            fh.write(snap.tags.astype("<u8").tobytes())


def read_snapshots(path):
    """-> (metadata dict, list of PopulationSnapshot)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a snapshot dump")
        version, nmeta = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported dump version {version}")
        meta = json.loads(fh.read(nmeta).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        snaps = []
        for _ in range(count):
            t, n = struct.unpack("<dQ", fh.read(16))
            ids = np.frombuffer(fh.read(8 * n), dtype="<u8")
            pos = np.frombuffer(fh.read(8 * n), dtype="<f8")
            tag = np.frombuffer(fh.read(8 * n), dtype="<u8")
            snaps.append(PopulationSnapshot(t, ids, pos, tag))
    return meta, snaps
