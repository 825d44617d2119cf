"""Compiled core vs numpy backend: bit-identical output on shared seeds.

Both backends consume the same counter-addressed draws through the same
arithmetic (the extension is built with FMA contraction off, and the numpy
path routes bridge probabilities through libm exp), so everything down to the
last bit must agree. Crossing decisions sit on exp() ulp boundaries with
probability ~1e-16 per step; the configs here keep the step count low enough
that a mismatch indicates a real divergence, not an ulp artifact.
"""

import math

import numpy as np
import pytest

import bbmlab.engine as eng
from bbmlab.engine import BarrierSpec, EngineConfig, evolve
from bbmlab.engine import _pycore

_core = pytest.importorskip("bbmlab.engine._core",
                            reason="compiled core not built")


CONFIGS = [
    dict(t_end=6.0, snapshot_times=(1.0, 3.0, 6.0), seed=1, replicate=0,
         x_max=None),
    dict(t_end=8.0, x0=1.0, seed=2, replicate=5, snapshot_times=(4.0, 8.0),
         barrier=BarrierSpec(level=0.0), x_max=30.0),
    dict(t_end=10.0, seed=3, replicate=1, snapshot_times=(10.0,),
         barrier=BarrierSpec(level=2.0, t_start=5.0, continue_tagged=True),
         x_max=None),
    dict(t_end=6.0, seed=4, replicate=2, snapshot_times=(6.0,),
         barrier=BarrierSpec(level=None, floor=-2.0), x_max=None),
    dict(t_end=7.0, seed=5, replicate=9, snapshot_times=(7.0,), dt=0.05,
         barrier=BarrierSpec(level=1.0, t_start=2.0, t_end=6.0, floor=-3.0,
                             continue_tagged=True), x_max=None),
]


def _run_with(backend, cfg):
    old = eng._BACKEND
    eng._BACKEND = backend
    try:
        return evolve(EngineConfig(**cfg))
    finally:
        eng._BACKEND = old


def test_philox_primitive_matches():
    from bbmlab.philox import philox_blocks
    for key in [(1, 2), (12345, 999), (2**64 - 1, 7)]:
        assert np.array_equal(_core.philox_raw(key[0], key[1], 3, 9),
                              philox_blocks(key[0], key[1], 3, 9))


@pytest.mark.parametrize("cfg", CONFIGS, ids=[f"cfg{i}" for i in range(len(CONFIGS))])
def test_backends_bit_identical(cfg):
    rc = _run_with(_core, cfg)
    rp = _run_with(_pycore, cfg)
    assert rc.stats == rp.stats
    for sc, sp in zip(rc.snapshots, rp.snapshots):
        assert np.array_equal(sc.ids, sp.ids)
        assert np.array_equal(sc.positions, sp.positions)
        assert np.array_equal(sc.tags, sp.tags)
    assert np.array_equal(rc.line_ids, rp.line_ids)
    assert np.array_equal(rc.line_times, rp.line_times)
    assert np.array_equal(rc.line_positions, rp.line_positions)
    assert np.array_equal(rc.line_window_start, rp.line_window_start)
    assert np.array_equal(rc.floor_ids, rp.floor_ids)
    assert np.array_equal(rc.floor_times, rp.floor_times)


def test_env_var_selects_backend(monkeypatch):
    monkeypatch.setenv("BBMLAB_BACKEND", "py")
    mod, name = eng._load_backend()
    assert name == "python" and mod is _pycore
    monkeypatch.setenv("BBMLAB_BACKEND", "c")
    mod, name = eng._load_backend()
    assert name == "c"
