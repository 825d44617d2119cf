# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled backend for the particle engine.

Mirrors ``_pycore.evolve_replicate`` verbatim: same per-lineage Philox draw
layout, same arithmetic, same output contract. A test pins both backends to
bit-identical results. See ``_pycore`` for the contract description.

Built with -ffp-contract=off: fused multiply-adds would change step rounding
relative to the numpy backend.
"""

from cpython.mem cimport PyMem_Free, PyMem_Malloc, PyMem_Realloc
from libc.math cimport ceil, exp, log, sqrt
from libc.stdint cimport int64_t, uint64_t

import numpy as np

cimport numpy as cnp
from scipy.special.cython_special cimport ndtri

cnp.import_array()

cdef extern from *:
    """
    #include <stdint.h>

    /* Philox4x64-10, bit-compatible with numpy.random.Philox at
       counter = (block, 0, 0, 0), key = (key0, key1). */
    static inline void bbm_philox_block(uint64_t key0, uint64_t key1,
                                        uint64_t block, uint64_t out[4]) {
        const uint64_t M0 = 0xD2E7470EE14C6C93ULL;
        const uint64_t M1 = 0xCA5A826395121157ULL;
        const uint64_t W0 = 0x9E3779B97F4A7C15ULL;
        const uint64_t W1 = 0xBB67AE8584CAA73BULL;
        uint64_t c0 = block, c1 = 0, c2 = 0, c3 = 0;
        uint64_t k0 = key0, k1 = key1;
        for (int r = 0; r < 10; r++) {
            if (r) { k0 += W0; k1 += W1; }
            unsigned __int128 p0 = (unsigned __int128)M0 * c0;
            unsigned __int128 p1 = (unsigned __int128)M1 * c2;
            uint64_t hi0 = (uint64_t)(p0 >> 64), lo0 = (uint64_t)p0;
            uint64_t hi1 = (uint64_t)(p1 >> 64), lo1 = (uint64_t)p1;
            uint64_t t0 = hi1 ^ c1 ^ k0;
            uint64_t t2 = hi0 ^ c3 ^ k1;
            c0 = t0; c1 = lo1; c2 = t2; c3 = lo0;
        }
        out[0] = c0; out[1] = c1; out[2] = c2; out[3] = c3;
    }

    static inline double bbm_to_uniform(uint64_t w) {
        return ((double)(w >> 11) + 0.5) * 1.11022302462515654042e-16; /* 2^-53 */
    }

    /* splitmix64 finalizer; genealogical ids. */
    static inline uint64_t bbm_mix64(uint64_t x) {
        uint64_t z = x + 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static inline uint64_t bbm_child_id(uint64_t parent, uint64_t k) {
        return bbm_mix64(parent ^ (0x9E3779B97F4A7C15ULL * (k + 1)));
    }
    """
    void bbm_philox_block(uint64_t key0, uint64_t key1, uint64_t block,
                          uint64_t out[4]) nogil
    double bbm_to_uniform(uint64_t w) nogil
    uint64_t bbm_mix64(uint64_t x) nogil
    uint64_t bbm_child_id(uint64_t parent, uint64_t k) nogil


# growable scratch buffers -------------------------------------------------

cdef class _U64Buf:
    cdef uint64_t* data
    cdef Py_ssize_t n, cap

    def __cinit__(self, Py_ssize_t cap=64):
        self.cap = cap
        self.n = 0
        self.data = <uint64_t*> PyMem_Malloc(cap * sizeof(uint64_t))
        if not self.data:
            raise MemoryError()

    def __dealloc__(self):
        if self.data:
            PyMem_Free(self.data)

    cdef inline int push(self, uint64_t v) except -1:
        if self.n == self.cap:
            self.cap *= 2
            self.data = <uint64_t*> PyMem_Realloc(self.data, self.cap * sizeof(uint64_t))
            if not self.data:
                raise MemoryError()
        self.data[self.n] = v
        self.n += 1
        return 0

    cdef cnp.ndarray array(self):
        cdef cnp.ndarray out = np.empty(self.n, dtype=np.uint64)
        cdef uint64_t[::1] view
        cdef Py_ssize_t i
        if self.n:
            view = out
            for i in range(self.n):
                view[i] = self.data[i]
        return out


cdef class _F64Buf:
    cdef double* data
    cdef Py_ssize_t n, cap

    def __cinit__(self, Py_ssize_t cap=64):
        self.cap = cap
        self.n = 0
        self.data = <double*> PyMem_Malloc(cap * sizeof(double))
        if not self.data:
            raise MemoryError()

    def __dealloc__(self):
        if self.data:
            PyMem_Free(self.data)

    cdef inline int push(self, double v) except -1:
        if self.n == self.cap:
            self.cap *= 2
            self.data = <double*> PyMem_Realloc(self.data, self.cap * sizeof(double))
            if not self.data:
                raise MemoryError()
        self.data[self.n] = v
        self.n += 1
        return 0

    cdef cnp.ndarray array(self):
        cdef cnp.ndarray out = np.empty(self.n, dtype=np.float64)
        cdef double[::1] view
        cdef Py_ssize_t i
        if self.n:
            view = out
            for i in range(self.n):
                view[i] = self.data[i]
        return out


def philox_raw(run_key, stream_id, start_block, nblocks):
    """Raw Philox blocks (testing hook for backend parity)."""
    cdef Py_ssize_t n = int(nblocks)
    cdef cnp.ndarray out = np.empty((n, 4), dtype=np.uint64)
    cdef uint64_t[:, ::1] view = out
    cdef uint64_t k0 = <uint64_t> (int(run_key) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t k1 = <uint64_t> (int(stream_id) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t b0 = <uint64_t> (int(start_block) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t wrd[4]
    cdef Py_ssize_t i, j
    for i in range(n):
        bbm_philox_block(k0, k1, b0 + <uint64_t> i, wrd)
        for j in range(4):
            view[i, j] = wrd[j]
    return out


def evolve_replicate(run_key,
                     double x0,
                     double t_end,
                     double dt,
                     double sigma,
                     double drift,
                     double rate,
                     cnp.ndarray off_counts_arr,
                     cnp.ndarray off_cdf_arr,
                     cnp.ndarray snap_times_arr,
                     has_barrier,
                     double barrier_level,
                     double barrier_t0,
                     double barrier_t1,
                     continue_tagged,
                     has_floor,
                     double floor_level,
                     double x_max,
                     max_segments):
    cdef uint64_t key0 = <uint64_t> (int(run_key) & 0xFFFFFFFFFFFFFFFF)
    cdef bint c_barrier = bool(has_barrier)
    cdef bint c_floor = bool(has_floor)
    cdef bint c_cont = bool(continue_tagged)
    cdef int64_t budget = int(max_segments)

    cdef int64_t[::1] off_counts = np.ascontiguousarray(off_counts_arr, dtype=np.int64)
    cdef double[::1] off_cdf = np.ascontiguousarray(off_cdf_arr, dtype=np.float64)
    cdef double[::1] snaps = np.ascontiguousarray(snap_times_arr, dtype=np.float64)
    cdef Py_ssize_t n_snaps = snaps.shape[0]
    cdef Py_ssize_t n_off = off_cdf.shape[0]

    cdef list snap_id_bufs = [], snap_pos_bufs = [], snap_tag_bufs = []
    cdef Py_ssize_t j
    for j in range(n_snaps):
        snap_id_bufs.append(_U64Buf())
        snap_pos_bufs.append(_F64Buf())
        snap_tag_bufs.append(_U64Buf())
    cdef _U64Buf line_id = _U64Buf(), floor_id = _U64Buf(), line_flag = _U64Buf()
    cdef _F64Buf line_T = _F64Buf(), line_X = _F64Buf(), floor_T = _F64Buf()

    cdef Py_ssize_t cap = 1024
    cdef uint64_t* st_id = <uint64_t*> PyMem_Malloc(cap * sizeof(uint64_t))
    cdef double* st_t = <double*> PyMem_Malloc(cap * sizeof(double))
    cdef double* st_x = <double*> PyMem_Malloc(cap * sizeof(double))
    cdef uint64_t* st_tag = <uint64_t*> PyMem_Malloc(cap * sizeof(uint64_t))
    cdef Py_ssize_t top = 0
    cdef Py_ssize_t node_cap = n_snaps + 3
    cdef double* nodes = <double*> PyMem_Malloc(node_cap * sizeof(double))
    if not (st_id and st_t and st_x and st_tag and nodes):
        raise MemoryError()

    cdef int64_t segments = 0, branches = 0, deaths = 0, pruned = 0
    cdef double pruned_weight = 0.0
    cdef bint budget_exceeded = False
    cdef Py_ssize_t max_stack = 1

    cdef uint64_t pid, tag, blk, cid
    cdef uint64_t ctrl[4]
    cdef uint64_t wrd[4]
    cdef double t0, x, u_exp, u_off, u_attr, u_attr_floor, t_branch, seg_end
    cdef double ta, tb, span, h, drift_h, sig_sqrt_h, z, a, b, expo, p_prev, p_next
    cdef double sig2 = sigma * sigma
    cdef double tmp
    cdef bint frozen, absorbed, was_pruned, barrier_active
    cdef Py_ssize_t n_nodes, ni, i, n, idx_bar, idx_flr, koff
    cdef int64_t kids

    st_id[0] = bbm_mix64(1)
    st_t[0] = 0.0
    st_x[0] = x0
    st_tag[0] = 0
    top = 1

    try:
        while top > 0:
            if segments >= budget:
                budget_exceeded = True
                break
            if top > max_stack:
                max_stack = top
            top -= 1
            pid = st_id[top]
            t0 = st_t[top]
            x = st_x[top]
            tag = st_tag[top]
            segments += 1

            bbm_philox_block(key0, pid, 0, ctrl)
            u_exp = bbm_to_uniform(ctrl[0])
            u_off = bbm_to_uniform(ctrl[1])
            u_attr = bbm_to_uniform(ctrl[2])
            u_attr_floor = bbm_to_uniform(ctrl[3])
            t_branch = t0 - log(u_exp) / rate
            seg_end = t_branch if t_branch < t_end else t_end
            blk = 1

            frozen = False
            absorbed = False
            was_pruned = False

            if c_floor and x <= floor_level:
                floor_id.push(pid)
                floor_T.push(t0)
                absorbed = True
            if (not absorbed) and c_barrier and tag == 0 \
                    and barrier_t0 <= t0 <= barrier_t1 and x <= barrier_level:
                line_id.push(pid)
                line_T.push(t0)
                line_X.push(x)
                line_flag.push(1)
                if c_cont:
                    tag = pid
                else:
                    frozen = True
            if not (absorbed or frozen) and x >= x_max:
                pruned += 1
                pruned_weight += exp(-x_max)
                was_pruned = True
            if not (absorbed or frozen or was_pruned):
                for j in range(n_snaps):
                    if snaps[j] == t0 and t0 < t_branch:
                        (<_U64Buf>snap_id_bufs[j]).push(pid)
                        (<_F64Buf>snap_pos_bufs[j]).push(x)
                        (<_U64Buf>snap_tag_bufs[j]).push(tag)

            if not (absorbed or frozen or was_pruned):
                n_nodes = 0
                nodes[n_nodes] = seg_end
                n_nodes += 1
                for j in range(n_snaps):
                    if t0 < snaps[j] < seg_end:
                        nodes[n_nodes] = snaps[j]
                        n_nodes += 1
                if c_barrier:
                    if t0 < barrier_t0 < seg_end:
                        nodes[n_nodes] = barrier_t0
                        n_nodes += 1
                    if t0 < barrier_t1 < seg_end:
                        nodes[n_nodes] = barrier_t1
                        n_nodes += 1
                for ni in range(1, n_nodes):
                    tmp = nodes[ni]
                    i = ni
                    while i > 0 and nodes[i - 1] > tmp:
                        nodes[i] = nodes[i - 1]
                        i -= 1
                    nodes[i] = tmp
                i = 0
                for ni in range(1, n_nodes):
                    if nodes[ni] != nodes[i]:
                        i += 1
                        nodes[i] = nodes[ni]
                n_nodes = i + 1

                ta = t0
                for ni in range(n_nodes):
                    tb = nodes[ni]
                    span = tb - ta
                    barrier_active = (c_barrier and tag == 0
                                      and ta >= barrier_t0 and tb <= barrier_t1)
                    if barrier_active or c_floor:
                        n = <Py_ssize_t> ceil(span / dt - 1e-9)
                        if n < 1:
                            n = 1
                        h = span / n
                        drift_h = drift * h
                        sig_sqrt_h = sigma * sqrt(h)
                        idx_bar = n
                        idx_flr = n
                        p_prev = x
                        for i in range(n):
                            bbm_philox_block(key0, pid, blk, wrd)
                            blk += 1
                            z = ndtri(bbm_to_uniform(wrd[0]))
                            p_next = p_prev + (drift_h + sig_sqrt_h * z)
                            if barrier_active and idx_bar == n:
                                a = p_prev - barrier_level
                                b = p_next - barrier_level
                                expo = -2.0 * a * b / (sig2 * h)
                                if expo > 0.0:
                                    expo = 0.0
                                if b <= 0.0 or bbm_to_uniform(wrd[1]) < exp(expo):
                                    idx_bar = i
                            if c_floor and idx_flr == n:
                                a = p_prev - floor_level
                                b = p_next - floor_level
                                expo = -2.0 * a * b / (sig2 * h)
                                if expo > 0.0:
                                    expo = 0.0
                                if b <= 0.0 or bbm_to_uniform(wrd[2]) < exp(expo):
                                    idx_flr = i
                            p_prev = p_next
                        if idx_bar < n and idx_bar <= idx_flr:
                            line_id.push(pid)
                            line_T.push(ta + idx_bar * h + u_attr * h)
                            line_X.push(barrier_level)
                            line_flag.push(0)
                            if c_cont:
                                tag = pid
                                if idx_flr < n:
                                    floor_id.push(pid)
                                    floor_T.push(ta + idx_flr * h + u_attr_floor * h)
                                    absorbed = True
                            else:
                                frozen = True
                        elif idx_flr < n:
                            floor_id.push(pid)
                            floor_T.push(ta + idx_flr * h + u_attr_floor * h)
                            absorbed = True
                        x = p_prev
                    else:
                        bbm_philox_block(key0, pid, blk, wrd)
                        blk += 1
                        z = ndtri(bbm_to_uniform(wrd[0]))
                        x = x + drift * span + sigma * sqrt(span) * z

                    if frozen or absorbed:
                        break

                    if c_barrier and tag == 0 and tb == barrier_t0 and x <= barrier_level:
                        line_id.push(pid)
                        line_T.push(tb)
                        line_X.push(x)
                        line_flag.push(1)
                        if c_cont:
                            tag = pid
                        else:
                            frozen = True
                            break
                    if x >= x_max:
                        pruned += 1
                        pruned_weight += exp(-x_max)
                        was_pruned = True
                        break
                    for j in range(n_snaps):
                        if snaps[j] == tb and tb < t_branch:
                            (<_U64Buf>snap_id_bufs[j]).push(pid)
                            (<_F64Buf>snap_pos_bufs[j]).push(x)
                            (<_U64Buf>snap_tag_bufs[j]).push(tag)
                    ta = tb

            if frozen or absorbed or was_pruned:
                continue
            if t_branch <= t_end:
                branches += 1
                koff = 0
                while koff < n_off - 1 and off_cdf[koff] < u_off:
                    koff += 1
                kids = off_counts[koff]
                if kids == 0:
                    deaths += 1
                if top + kids >= cap:
                    while top + kids >= cap:
                        cap *= 2
                    st_id = <uint64_t*> PyMem_Realloc(st_id, cap * sizeof(uint64_t))
                    st_t = <double*> PyMem_Realloc(st_t, cap * sizeof(double))
                    st_x = <double*> PyMem_Realloc(st_x, cap * sizeof(double))
                    st_tag = <uint64_t*> PyMem_Realloc(st_tag, cap * sizeof(uint64_t))
                    if not (st_id and st_t and st_x and st_tag):
                        raise MemoryError()
                i = kids - 1
                while i >= 0:
                    cid = bbm_child_id(pid, <uint64_t> i)
                    if cid == 0:
                        cid = 1
                    st_id[top] = cid
                    st_t[top] = t_branch
                    st_x[top] = x
                    st_tag[top] = tag
                    top += 1
                    i -= 1
    finally:
        PyMem_Free(st_id)
        PyMem_Free(st_t)
        PyMem_Free(st_x)
        PyMem_Free(st_tag)
        PyMem_Free(nodes)

    snap_ids = []
    snap_pos = []
    snap_tag = []
    for j in range(n_snaps):
        ids = (<_U64Buf>snap_id_bufs[j]).array()
        pos = (<_F64Buf>snap_pos_bufs[j]).array()
        tg = (<_U64Buf>snap_tag_bufs[j]).array()
        order = np.argsort(ids, kind="stable")
        snap_ids.append(ids[order])
        snap_pos.append(pos[order])
        snap_tag.append(tg[order])

    lid = line_id.array()
    lT = line_T.array()
    lX = line_X.array()
    lS = line_flag.array().astype(bool)
    order = np.lexsort((lid, lT))
    fid = floor_id.array()
    fT = floor_T.array()
    forder = np.lexsort((fid, fT))

    return {
        "snap_ids": snap_ids,
        "snap_pos": snap_pos,
        "snap_tag": snap_tag,
        "line_id": lid[order],
        "line_T": lT[order],
        "line_X": lX[order],
        "line_window_start": lS[order],
        "floor_id": fid[forder],
        "floor_T": fT[forder],
        "stats": {
            "segments": int(segments),
            "branches": int(branches),
            "deaths": int(deaths),
            "pruned": int(pruned),
            "pruned_weight_bound": float(pruned_weight),
            "budget_exceeded": bool(budget_exceeded),
            "max_stack": int(max_stack),
        },
    }
