# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loops.

Every function here has a line-for-line twin in ``_fallback.py``.  Both draw
from the same numpy bit generator through the same distribution routines and
evaluate floating point expressions in the same order, so for a given
generator state they return identical results.
"""

import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport exp, lgamma, sqrt, INFINITY
from libc.stdint cimport int64_t, int8_t, int16_t, int32_t
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport (
    random_standard_exponential,
    random_standard_normal,
    random_standard_uniform,
)

cnp.import_array()

BACKEND = "cython"

# run status codes shared with the fallback
DEF HORIZON = 0
DEF ABSORBED = 1
DEF STOPPED = 2
DEF OVERFLOW = 3


cdef bitgen_t* _bitgen(object rng) except NULL:
    capsule = rng.bit_generator.capsule
    return <bitgen_t*> PyCapsule_GetPointer(capsule, "BitGenerator")


cdef inline double _lbinom(int64_t a, int64_t b) noexcept nogil:
    if b < 0 or a < 0 or b > a:
        return -INFINITY
    return lgamma(a + 1.0) - lgamma(b + 1.0) - lgamma(a - b + 1.0)


# ---------------------------------------------------------------------------
# two-type logistic CTMC


def ctmc_run(rng, int64_t n_plus, int64_t n_minus,
             const int64_t[::1] bp_i, const double[::1] bp_rate,
             const int64_t[::1] bm_i, const double[::1] bm_rate,
             double death_plus, double death_minus, double comp,
             double mut_plus, double mut_minus, double horizon,
             const double[::1] grid, int64_t stop_lo, int64_t stop_hi,
             bint record, double max_rate):
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t ng = grid.shape[0], g = 0, k, cap = 1024, nrec = 0
    cdef Py_ssize_t nbp = bp_rate.shape[0], nbm = bm_rate.shape[0]
    cdef double BP = 0.0, BM = 0.0
    cdef double t = 0.0, t_next, u, acc, r_bp, r_bm, r_dp, r_dm, r_mp, r_mm, total
    cdef int64_t N, step
    cdef int status = HORIZON
    cdef cnp.ndarray[int64_t, ndim=1] gp = np.full(ng, -1, dtype=np.int64)
    cdef cnp.ndarray[int64_t, ndim=1] gm = np.full(ng, -1, dtype=np.int64)
    cdef double[::1] rt
    cdef int64_t[::1] rp, rm
    rt_arr = rp_arr = rm_arr = None

    for k in range(nbp):
        BP += bp_rate[k]
    for k in range(nbm):
        BM += bm_rate[k]
    if record:
        rt_arr = np.empty(cap, dtype=np.float64)
        rp_arr = np.empty(cap, dtype=np.int64)
        rm_arr = np.empty(cap, dtype=np.int64)
        rt = rt_arr; rp = rp_arr; rm = rm_arr
        rt[0] = 0.0; rp[0] = n_plus; rm[0] = n_minus
        nrec = 1

    N = n_plus + n_minus
    if N >= stop_hi or N < stop_lo:
        status = STOPPED
    while status == HORIZON:
        N = n_plus + n_minus
        r_bp = n_plus * BP
        r_bm = n_minus * BM
        r_dp = n_plus * (death_plus + comp * N)
        r_dm = n_minus * (death_minus + comp * N)
        r_mp = n_plus * mut_plus
        r_mm = n_minus * mut_minus
        total = r_bp + r_bm + r_dp + r_dm + r_mp + r_mm
        if total > max_rate:
            status = OVERFLOW
            break
        if total <= 0.0:
            status = ABSORBED
            break
        t_next = t + random_standard_exponential(bg) / total
        if t_next > horizon:
            break
        while g < ng and grid[g] < t_next:
            gp[g] = n_plus
            gm[g] = n_minus
            g += 1
        t = t_next
        u = random_standard_uniform(bg) * total
        if u < r_bp:
            acc = 0.0
            step = bp_i[nbp - 1] - 1
            for k in range(nbp):
                acc = acc + n_plus * bp_rate[k]
                if u < acc:
                    step = bp_i[k] - 1
                    break
            n_plus += step
        elif u < r_bp + r_bm:
            u = u - r_bp
            acc = 0.0
            step = bm_i[nbm - 1] - 1
            for k in range(nbm):
                acc = acc + n_minus * bm_rate[k]
                if u < acc:
                    step = bm_i[k] - 1
                    break
            n_minus += step
        elif u < r_bp + r_bm + r_dp:
            n_plus -= 1
        elif u < r_bp + r_bm + r_dp + r_dm:
            n_minus -= 1
        elif u < r_bp + r_bm + r_dp + r_dm + r_mp:
            n_plus -= 1
            n_minus += 1
        elif r_mm > 0.0:
            n_plus += 1
            n_minus -= 1
        elif r_mp > 0.0:
            n_plus -= 1
            n_minus += 1
        elif r_dm > 0.0:
            n_minus -= 1
        elif r_dp > 0.0:
            n_plus -= 1
        elif r_bm > 0.0:
            n_minus += bm_i[nbm - 1] - 1
        else:
            n_plus += bp_i[nbp - 1] - 1
        if record:
            if nrec == cap:
                cap *= 2
                rt_arr = np.resize(rt_arr, cap)
                rp_arr = np.resize(rp_arr, cap)
                rm_arr = np.resize(rm_arr, cap)
                rt = rt_arr; rp = rp_arr; rm = rm_arr
            rt[nrec] = t; rp[nrec] = n_plus; rm[nrec] = n_minus
            nrec += 1
        N = n_plus + n_minus
        if N >= stop_hi or N < stop_lo:
            status = STOPPED
        elif N == 0:
            status = ABSORBED

    if status == HORIZON or status == ABSORBED:
        while g < ng:
            gp[g] = n_plus
            gm[g] = n_minus
            g += 1
    if record:
        return status, t, n_plus, n_minus, gp, gm, rt_arr[:nrec].copy(), rp_arr[:nrec].copy(), rm_arr[:nrec].copy()
    return status, t, n_plus, n_minus, gp, gm, None, None, None


# ---------------------------------------------------------------------------
# diffusion and its dual


def sde_run(rng, double w0, double sel, double th_p, double th_m, double a, double b,
            double dt, int64_t nsteps, const int64_t[::1] grid_steps, bint record):
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t ng = grid_steps.shape[0], gi = 0
    cdef int64_t k
    cdef double w = w0, drift, var, z, sq = sqrt(dt)
    cdef cnp.ndarray[double, ndim=1] out = np.empty(ng, dtype=np.float64)
    cdef double[::1] path
    path_arr = None
    if record:
        path_arr = np.empty(nsteps + 1, dtype=np.float64)
        path = path_arr
        path[0] = w
    for k in range(nsteps):
        while gi < ng and grid_steps[gi] == k:
            out[gi] = w
            gi += 1
        drift = -sel * w * (1.0 - w) + th_p * (1.0 - w) - th_m * w
        var = a * w * (1.0 - w) - b * w * w * (1.0 - w)
        w = w + drift * dt
        if var > 0.0:
            z = random_standard_normal(bg)
            w = w + sqrt(var) * sq * z
        if w < 0.0:
            w = 0.0
        elif w > 1.0:
            w = 1.0
        if record:
            path[k + 1] = w
    while gi < ng:
        out[gi] = w
        gi += 1
    return out, path_arr


def dual_run(rng, int64_t n0, double th_p, double sel, double a, double b,
             double horizon, const double[::1] grid, bint record):
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t ng = grid.shape[0], g = 0, cap = 64, nrec = 0
    cdef int64_t n = n0
    cdef double t = 0.0, t_next, down, up, total, u
    cdef cnp.ndarray[int64_t, ndim=1] out = np.empty(ng, dtype=np.int64)
    rt_arr = rn_arr = None
    if record:
        rt_arr = [0.0]
        rn_arr = [n0]
    while True:
        down = th_p * n + a * (0.5 * n * (n - 1))
        up = sel * n + b * (0.5 * n * (n - 1))
        total = down + up
        if total <= 0.0:
            break
        t_next = t + random_standard_exponential(bg) / total
        if t_next > horizon:
            break
        while g < ng and grid[g] < t_next:
            out[g] = n
            g += 1
        t = t_next
        u = random_standard_uniform(bg) * total
        if u < down:
            n -= 1
        else:
            n += 1
        if record:
            rt_arr.append(t)
            rn_arr.append(n)
    while g < ng:
        out[g] = n
        g += 1
    return out, rt_arr, rn_arr


# ---------------------------------------------------------------------------
# graphical construction of the population on [0, T] (time rescaled by K)

# flag bits on recorded events
DEF ACCEPTED = 1
DEF PARENT_PLUS = 2
DEF COMPETITION = 4


def graphical_run(rng, int64_t n_plus, int64_t n_minus,
                  const int64_t[::1] nu_i, const int64_t[::1] nu_j, const double[::1] nu_mass,
                  double comp, int64_t K, int64_t n_down, int64_t n_up, double T, int mode,
                  Py_ssize_t capacity):
    """mode 0: record every candidate; 1: only candidates able to move lineages; 2: none."""
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t na = nu_mass.shape[0], k, a, nrec = 0, cap = max(capacity, 16)
    cdef double nu_total = 0.0, comp_rate, total, t = 0.0, u, v, acc, frac, thr
    cdef int64_t N = n_plus + n_minus, i, j, max_ij = 0, n_acc = 0, n_cand = 0
    cdef bint frozen = False, relevant, accepted, plus_parent, is_comp
    cdef double frozen_time = -1.0
    cdef int8_t flags
    cdef double[::1] et
    cdef int16_t[::1] ei, ej
    cdef int32_t[::1] en
    cdef int8_t[::1] ef
    et_arr = ei_arr = ej_arr = en_arr = ef_arr = None

    for k in range(na):
        nu_total += nu_mass[k]
    comp_rate = comp * n_up * n_up
    total = K * (n_up * nu_total + comp_rate)
    if mode != 2:
        et_arr = np.empty(cap, dtype=np.float64)
        ei_arr = np.empty(cap, dtype=np.int16)
        ej_arr = np.empty(cap, dtype=np.int16)
        en_arr = np.empty(cap, dtype=np.int32)
        ef_arr = np.empty(cap, dtype=np.int8)
        et = et_arr; ei = ei_arr; ej = ej_arr; en = en_arr; ef = ef_arr
    if N < n_down or N > n_up:
        frozen = True
        frozen_time = 0.0
    if total <= 0.0:
        T = -1.0
    while True:
        t = t + random_standard_exponential(bg) / total
        if t > T:
            break
        n_cand += 1
        u = random_standard_uniform(bg) * (n_up * nu_total + comp_rate)
        v = random_standard_uniform(bg)
        acc = 0.0
        a = -1
        for k in range(na):
            acc = acc + n_up * nu_mass[k]
            if u < acc:
                a = k
                break
        is_comp = a < 0
        if is_comp:
            i = 0
            j = 0
        else:
            i = nu_i[a]
            j = nu_j[a]
            if i + j > max_ij:
                max_ij = i + j
        accepted = False
        plus_parent = False
        if not frozen:
            N = n_plus + n_minus
            if is_comp:
                frac = (<double> N) / n_up
                thr = frac * frac
                if v < thr:
                    accepted = True
                    plus_parent = (v / thr) * N < n_plus
            elif v * n_up < N:
                accepted = True
                plus_parent = v * n_up < n_plus
            if accepted:
                if plus_parent:
                    if (not is_comp) and N - 1 + i + j < i + 2 * j:
                        accepted = False
                        frozen = True
                        frozen_time = t
                    else:
                        n_plus += i + j - 1
                else:
                    if (not is_comp) and N - 1 + i < i + 2 * j:
                        accepted = False
                        frozen = True
                        frozen_time = t
                    else:
                        n_minus += i - 1
            if accepted:
                n_acc += 1
                N = n_plus + n_minus
                if N < n_down or N > n_up:
                    frozen = True
                    frozen_time = t
        if mode == 2:
            continue
        relevant = mode == 0 or ((not is_comp) and (i >= 2 or j >= 1))
        if not relevant:
            continue
        if nrec == cap:
            cap *= 2
            et_arr = np.resize(et_arr, cap)
            ei_arr = np.resize(ei_arr, cap)
            ej_arr = np.resize(ej_arr, cap)
            en_arr = np.resize(en_arr, cap)
            ef_arr = np.resize(ef_arr, cap)
            et = et_arr; ei = ei_arr; ej = ej_arr; en = en_arr; ef = ef_arr
        flags = 0
        if accepted:
            flags = flags | ACCEPTED
            if plus_parent:
                flags = flags | PARENT_PLUS
        if is_comp:
            flags = flags | COMPETITION
        et[nrec] = t
        ei[nrec] = i
        ej[nrec] = j
        en[nrec] = n_plus + n_minus
        ef[nrec] = flags
        nrec += 1

    summary = {
        "n_plus": n_plus,
        "n_minus": n_minus,
        "frozen": bool(frozen),
        "frozen_time": frozen_time,
        "max_ij": max_ij,
        "accepted": n_acc,
        "candidates": n_cand,
    }
    if mode == 2:
        return summary, None
    return summary, (et_arr[:nrec].copy(), ei_arr[:nrec].copy(), ej_arr[:nrec].copy(),
                     en_arr[:nrec].copy(), ef_arr[:nrec].copy())


# ---------------------------------------------------------------------------
# backward lineage counting and the auxiliary process


cdef inline double _p_plus(int64_t n, int64_t N, int64_t i, int64_t j) noexcept nogil:
    cdef double val
    cdef int64_t k
    if j == 0 or n < 1:
        return 0.0
    val = n * ((<double> j) / N)
    for k in range(1, n):
        val *= 1.0 - (<double> (i + 2 * j - 1)) / (N - k)
    return val


cdef inline double _p_minus(int64_t n, int64_t N, int64_t i, int64_t j) noexcept nogil:
    cdef double val
    cdef int64_t k
    if n < 2 or i < 2:
        return 0.0
    val = 0.5 * n * (n - 1) * (i * (i - 1)) / (<double> (N * (N - 1)))
    for k in range(2, n):
        val *= 1.0 - (<double> (i + j - 2)) / (N - k)
    return val


cdef double _prob_up(int64_t n, int64_t N, int64_t i, int64_t j) noexcept nogil:
    cdef int64_t r, c = i + 2 * j
    cdef double tot = 0.0, lz = _lbinom(N, n)
    for r in range(1, min(j, n) + 1):
        tot += exp(_lbinom(j, r) + _lbinom(N - c, n - r) - lz)
    return tot


cdef double _prob_down(int64_t n, int64_t N, int64_t i, int64_t j) noexcept nogil:
    cdef int64_t r, mm, c = i + 2 * j
    cdef double tot = 0.0, lz = _lbinom(N, n)
    if n < 2 or i < 2:
        return 0.0
    for r in range(0, min(j, n - 2) + 1):
        for mm in range(0, min(j, n - 2 - r) + 1):
            if r >= 1 and mm >= 1:
                continue
            tot += exp(_lbinom(i, 2) + _lbinom(j, r) + _lbinom(j, mm)
                       + _lbinom(N - c, n - 2 - r - mm) - lz)
    return tot


cdef int64_t _sample_lineages(bitgen_t* bg, int64_t n, int64_t N, int64_t i, int64_t j) noexcept nogil:
    """Next lineage count after an accepted event; -1 is the cemetery."""
    cdef int64_t c = i + 2 * j, k, b, r, mm, bb = -1, rr = 0, mmm = 0
    cdef double p0 = 1.0, u, acc, w, lz
    cdef bint found = False
    if c == 0 or n == 0:
        return n
    for k in range(n):
        if N - c - k <= 0:
            p0 = 0.0
            break
        p0 *= (<double> (N - c - k)) / (N - k)
    u = random_standard_uniform(bg)
    if u < p0:
        return n
    u = u - p0
    acc = 0.0
    lz = _lbinom(N, n)
    for b in range(0, min(i, n) + 1):
        for r in range(0, min(j, n - b) + 1):
            for mm in range(0, min(j, n - b - r) + 1):
                if b == 0 and r == 0 and mm == 0:
                    continue
                w = exp(_lbinom(i, b) + _lbinom(j, r) + _lbinom(j, mm)
                        + _lbinom(N - c, n - b - r - mm) - lz)
                if w <= 0.0:
                    continue
                acc = acc + w
                bb = b; rr = r; mmm = mm
                if u < acc:
                    found = True
                    break
            if found:
                break
        if found:
            break
    if bb < 0:
        return n
    if rr >= 1 and mmm >= 1:
        return -1
    if bb + rr >= 1:
        return n - bb + 1
    return n


def asg_backward(rng, const double[::1] et, const int16_t[::1] ei, const int16_t[::1] ej,
                 const int32_t[::1] en, const int8_t[::1] ef, int64_t m, double T,
                 bint aux, int64_t L, int64_t n_up, bint fallback):
    """Run the lineage counting chain (and optionally the auxiliary chain) backward."""
    cdef bitgen_t* bg = _bitgen(rng)
    cdef Py_ssize_t idx, ne = et.shape[0]
    cdef int64_t A = m, B = m, A_new, B_new, i, j, N
    cdef double tb, last = 0.0, int_A = 0.0, int_pairs = 0.0, V, q, pp, pm
    cdef int64_t ups = 0, downs = 0, multis = 0
    cdef double tau = INFINITY, sigma = INFINITY, t_star = INFINITY
    cdef bint accepted, coupled
    a_t = [0.0]
    a_n = [m]
    b_t = [0.0]
    b_n = [m]
    if aux and B >= L:
        sigma = 0.0
    for idx in range(ne - 1, -1, -1):
        tb = T - et[idx]
        if A > 0:
            int_A += A * (tb - last)
            int_pairs += 0.5 * A * (A - 1) * (tb - last)
        last = tb
        i = ei[idx]
        j = ej[idx]
        N = en[idx]
        accepted = (ef[idx] & ACCEPTED) != 0
        A_new = A
        if accepted and A > 0 and (i >= 1 or j >= 1):
            A_new = _sample_lineages(bg, A, N, i, j)
        if aux and (i >= 2 or j >= 1):
            V = random_standard_uniform(bg)
            B_new = B
            coupled = (not fallback) and accepted and A == B and A > 0
            if coupled:
                if A_new == A + 1:
                    pp = _p_plus(B, n_up, i, j)
                    q = _prob_up(B, N, i, j)
                    q = (pp / q) if q > 0.0 else (INFINITY if pp > 0.0 else 0.0)
                    if V <= q:
                        B_new = B + 1
                elif A_new == A - 1:
                    pm = _p_minus(B, n_up, i, j)
                    q = _prob_down(B, N, i, j)
                    q = (pm / q) if q > 0.0 else (INFINITY if pm > 0.0 else 0.0)
                    if V <= q:
                        B_new = B - 1
            else:
                pp = _p_plus(B, n_up, i, j)
                pm = _p_minus(B, n_up, i, j)
                if V <= pp:
                    B_new = B + 1
                elif 0.0 < V - pp and V - pp <= pm:
                    B_new = B - 1
            if B_new != B:
                B = B_new
                b_t.append(tb)
                b_n.append(B)
                if B >= L and sigma == INFINITY:
                    sigma = tb
        if A_new != A:
            if A_new == -1:
                t_star = tb
            elif A_new == A + 1:
                ups += 1
            elif A_new == A - 1:
                downs += 1
            else:
                multis += 1
            A = A_new
            a_t.append(tb)
            a_n.append(A)
        if aux and tau == INFINITY and A != B:
            tau = tb
    if A > 0:
        int_A += A * (T - last)
        int_pairs += 0.5 * A * (A - 1) * (T - last)
    return {
        "a_times": a_t,
        "a_counts": a_n,
        "b_times": b_t,
        "b_counts": b_n,
        "final": A,
        "ups": ups,
        "downs": downs,
        "multi_merges": multis,
        "lineage_time": int_A,
        "pair_time": int_pairs,
        "cemetery_time": t_star,
        "tau": tau,
        "sigma": sigma,
    }


# ---------------------------------------------------------------------------
# free branching of lumped classes (no competition, no mutation)


def branching_classes(rng, cnp.ndarray[int64_t, ndim=2] counts,
                      const int64_t[::1] p_i, const double[::1] p_rate,
                      const int64_t[::1] m_i, const double[::1] m_rate,
                      int64_t stop_size, double horizon):
    cdef bitgen_t* bg = _bitgen(rng)
    cdef int64_t[:, ::1] c = counts
    cdef Py_ssize_t nc = c.shape[0], k, sel_k, sel_t
    cdef Py_ssize_t np_ = p_rate.shape[0], nm = m_rate.shape[0]
    cdef double MP = 0.0, MM = 0.0, total, u, acc, t = 0.0
    cdef int64_t size = 0, step
    cdef int status = HORIZON
    for k in range(np_):
        MP += p_rate[k]
    for k in range(nm):
        MM += m_rate[k]
    for k in range(nc):
        size += c[k, 0] + c[k, 1]
    while True:
        if size >= stop_size:
            status = STOPPED
            break
        if size == 0:
            status = ABSORBED
            break
        total = 0.0
        for k in range(nc):
            total = total + c[k, 0] * MP + c[k, 1] * MM
        if total <= 0.0:
            break
        t = t + random_standard_exponential(bg) / total
        if t > horizon:
            break
        u = random_standard_uniform(bg) * total
        acc = 0.0
        sel_k = nc - 1
        sel_t = 1
        for k in range(nc):
            acc = acc + c[k, 0] * MP
            if u < acc:
                sel_k = k
                sel_t = 0
                break
            acc = acc + c[k, 1] * MM
            if u < acc:
                sel_k = k
                sel_t = 1
                break
        u = random_standard_uniform(bg)
        acc = 0.0
        if sel_t == 0:
            step = p_i[np_ - 1] - 1
            for k in range(np_):
                acc = acc + p_rate[k] / MP
                if u < acc:
                    step = p_i[k] - 1
                    break
        else:
            step = m_i[nm - 1] - 1
            for k in range(nm):
                acc = acc + m_rate[k] / MM
                if u < acc:
                    step = m_i[k] - 1
                    break
        c[sel_k, sel_t] += step
        size += step
    return status, t
