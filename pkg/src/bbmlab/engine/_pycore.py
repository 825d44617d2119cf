"""numpy backend for the particle engine.

One replicate is evolved depth-first, lineage by lineage. Every lineage owns a
counter-based random stream keyed by its genealogical id, so draws are
addressed by (run_key, particle_id, block) and the realized path of a lineage
never depends on what other lineages did (pruning or freezing elsewhere leaves
it bit-identical).

Per-lineage draw layout (block = one Philox counter value, 4 words):

* block 0: word0 branch-clock uniform, word1 offspring uniform,
  word2 barrier crossing-time uniform, word3 floor crossing-time uniform;
* blocks 1..: one block per motion step or event-to-event jump, in segment
  order; word0 -> Gaussian increment, word1 -> barrier bridge uniform,
  word2 -> floor bridge uniform.

Between barrier/floor-free events the motion jumps exactly (a Brownian
increment is Gaussian at any step size); dt-stepping with the exact
Brownian-bridge crossing correction is used only where a level is active.

The compiled backend (`_core`) implements this contract verbatim; a test pins
the two to bit-identical output.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtri

from ..philox import child_id, mix64, philox_blocks, words_to_uniform

ROOT_SALT = 1  # root particle id is mix64(ROOT_SALT)


def _uniform(word: np.uint64) -> float:
    return ((int(word) >> 11) + 0.5) * 2.0 ** -53


def evolve_replicate(run_key: int,
                     x0: float,
                     t_end: float,
                     dt: float,
                     sigma: float,
                     drift: float,
                     rate: float,
                     off_counts: np.ndarray,
                     off_cdf: np.ndarray,
                     snap_times: np.ndarray,
                     has_barrier: bool,
                     barrier_level: float,
                     barrier_t0: float,
                     barrier_t1: float,
                     continue_tagged: bool,
                     has_floor: bool,
                     floor_level: float,
                     x_max: float,
                     max_segments: int) -> dict:
    n_snaps = len(snap_times)
    snap_ids = [[] for _ in range(n_snaps)]
    snap_pos = [[] for _ in range(n_snaps)]
    snap_tag = [[] for _ in range(n_snaps)]
    line_id, line_T, line_X, line_start = [], [], [], []
    floor_id, floor_T = [], []

    segments = 0
    branches = 0
    deaths = 0
    pruned = 0
    pruned_weight = 0.0
    budget_exceeded = False
    max_stack = 1

    sig2 = sigma * sigma
    root = mix64(ROOT_SALT)
    stack = [(root, 0.0, x0, 0)]

    while stack:
        if segments >= max_segments:
            budget_exceeded = True
            break
        max_stack = max(max_stack, len(stack))
        pid, t0, x, tag = stack.pop()
        segments += 1

        ctrl = philox_blocks(run_key, pid, 0, 1)[0]
        u_exp = _uniform(ctrl[0])
        u_off = _uniform(ctrl[1])
        u_attr = _uniform(ctrl[2])
        u_attr_floor = _uniform(ctrl[3])
        t_branch = t0 - math.log(u_exp) / rate
        seg_end = min(t_branch, t_end)
        blk = 1

        frozen = absorbed = was_pruned = False

        # birth-time checks (root configs can start below a level)
        if has_floor and x <= floor_level:
            floor_id.append(pid)
            floor_T.append(t0)
            absorbed = True
        if not absorbed and has_barrier and tag == 0 \
                and barrier_t0 <= t0 <= barrier_t1 and x <= barrier_level:
            line_id.append(pid)
            line_T.append(t0)
            line_X.append(x)
            line_start.append(True)
            if continue_tagged:
                tag = pid
            else:
                frozen = True
        if not (absorbed or frozen) and x >= x_max:
            pruned += 1
            pruned_weight += math.exp(-x_max)
            was_pruned = True
        if not (absorbed or frozen or was_pruned):
            for j in range(n_snaps):
                if snap_times[j] == t0 and t0 < t_branch:
                    snap_ids[j].append(pid)
                    snap_pos[j].append(x)
                    snap_tag[j].append(tag)

        # node times strictly inside (t0, seg_end], in increasing order
        if not (absorbed or frozen or was_pruned):
            nodes = [seg_end]
            for j in range(n_snaps):
                s = snap_times[j]
                if t0 < s < seg_end:
                    nodes.append(s)
            if has_barrier:
                for b in (barrier_t0, barrier_t1):
                    if t0 < b < seg_end:
                        nodes.append(b)
            nodes = sorted(set(nodes))

            ta = t0
            for tb in nodes:
                span = tb - ta
                barrier_active = (has_barrier and tag == 0
                                  and ta >= barrier_t0 and tb <= barrier_t1)
                if barrier_active or has_floor:
                    n = max(1, int(math.ceil(span / dt - 1e-9)))
                    h = span / n
                    words = philox_blocks(run_key, pid, blk, n)
                    blk += n
                    z = ndtri(words_to_uniform(words[:, 0]))
                    inc = drift * h + sigma * math.sqrt(h) * z
                    path = np.cumsum(np.concatenate(([x], inc)))
                    p0, p1 = path[:-1], path[1:]

                    # libm exp keeps crossing decisions bit-identical to the C core
                    # (numpy's SIMD exp differs in the last ulp)
                    idx_bar = n
                    if barrier_active:
                        a = p0 - barrier_level
                        b = p1 - barrier_level
                        expo = np.minimum(0.0, -2.0 * a * b / (sig2 * h))
                        probs = np.fromiter(map(math.exp, expo), float, n)
                        u_bar = words_to_uniform(words[:, 1])
                        cond = (b <= 0.0) | (u_bar < probs)
                        hits = np.nonzero(cond)[0]
                        if hits.size:
                            idx_bar = int(hits[0])
                    idx_flr = n
                    if has_floor:
                        a = p0 - floor_level
                        b = p1 - floor_level
                        expo = np.minimum(0.0, -2.0 * a * b / (sig2 * h))
                        probs = np.fromiter(map(math.exp, expo), float, n)
                        u_flr = words_to_uniform(words[:, 2])
                        cond = (b <= 0.0) | (u_flr < probs)
                        hits = np.nonzero(cond)[0]
                        if hits.size:
                            idx_flr = int(hits[0])

                    if idx_bar < n and idx_bar <= idx_flr:
                        line_id.append(pid)
                        line_T.append(ta + idx_bar * h + u_attr * h)
                        line_X.append(barrier_level)
                        line_start.append(False)
                        if continue_tagged:
                            tag = pid
                            # floor may still absorb later in this interval
                            if idx_flr < n:
                                floor_id.append(pid)
                                floor_T.append(ta + idx_flr * h + u_attr_floor * h)
                                absorbed = True
                        else:
                            frozen = True
                    elif idx_flr < n:
                        floor_id.append(pid)
                        floor_T.append(ta + idx_flr * h + u_attr_floor * h)
                        absorbed = True
                    x = float(path[-1])
                else:
                    words = philox_blocks(run_key, pid, blk, 1)
                    blk += 1
                    z = float(ndtri(_uniform(words[0, 0])))
                    x = x + drift * span + sigma * math.sqrt(span) * z

                if frozen or absorbed:
                    break

                # node actions at tb
                if has_barrier and tag == 0 and tb == barrier_t0 and x <= barrier_level:
                    line_id.append(pid)
                    line_T.append(tb)
                    line_X.append(x)
                    line_start.append(True)
                    if continue_tagged:
                        tag = pid
                    else:
                        frozen = True
                        break
                if x >= x_max:
                    pruned += 1
                    pruned_weight += math.exp(-x_max)
                    was_pruned = True
                    break
                for j in range(n_snaps):
                    if snap_times[j] == tb and tb < t_branch:
                        snap_ids[j].append(pid)
                        snap_pos[j].append(x)
                        snap_tag[j].append(tag)
                ta = tb

        if frozen or absorbed or was_pruned:
            continue
        if t_branch <= t_end:
            branches += 1
            k = int(off_counts[np.searchsorted(off_cdf, u_off)])
            if k == 0:
                deaths += 1
            for c in range(k - 1, -1, -1):
                cid = child_id(pid, c)
                if cid == 0:
                    cid = 1
                stack.append((cid, t_branch, x, tag))

    def _snap_arrays(j):
        ids = np.asarray(snap_ids[j], dtype=np.uint64)
        pos = np.asarray(snap_pos[j], dtype=np.float64)
        tag = np.asarray(snap_tag[j], dtype=np.uint64)
        order = np.argsort(ids, kind="stable")
        return ids[order], pos[order], tag[order]

    snaps = [_snap_arrays(j) for j in range(n_snaps)]
    lid = np.asarray(line_id, dtype=np.uint64)
    lT = np.asarray(line_T, dtype=np.float64)
    lX = np.asarray(line_X, dtype=np.float64)
    lS = np.asarray(line_start, dtype=bool)
    order = np.lexsort((lid, lT))
    fid = np.asarray(floor_id, dtype=np.uint64)
    fT = np.asarray(floor_T, dtype=np.float64)
    forder = np.lexsort((fid, fT))

    return {
        "snap_ids": [s[0] for s in snaps],
        "snap_pos": [s[1] for s in snaps],
        "snap_tag": [s[2] for s in snaps],
        "line_id": lid[order],
        "line_T": lT[order],
        "line_X": lX[order],
        "line_window_start": lS[order],
        "floor_id": fid[forder],
        "floor_T": fT[forder],
        "stats": {
            "segments": segments,
            "branches": branches,
            "deaths": deaths,
            "pruned": pruned,
            "pruned_weight_bound": pruned_weight,
            "budget_exceeded": budget_exceeded,
            "max_stack": max_stack,
        },
    }
