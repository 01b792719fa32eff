"""Pure-Python event loops, used when the compiled extension is unavailable.

These mirror ``_kernels.pyx`` statement by statement: same random draws in
the same order, same floating point expression trees.  Given equal generator
states both backends return identical output.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "python"

HORIZON, ABSORBED, STOPPED, OVERFLOW = 0, 1, 2, 3
ACCEPTED, PARENT_PLUS, COMPETITION = 1, 2, 4


def _lbinom(a, b):
    if b < 0 or a < 0 or b > a:
        return -math.inf
    return math.lgamma(a + 1.0) - math.lgamma(b + 1.0) - math.lgamma(a - b + 1.0)


def ctmc_run(rng, n_plus, n_minus, bp_i, bp_rate, bm_i, bm_rate,
             death_plus, death_minus, comp, mut_plus, mut_minus, horizon,
             grid, stop_lo, stop_hi, record, max_rate, stop_fn=None):
    """Single-clock Gillespie loop.  ``stop_fn(t, n_plus, n_minus)`` is an
    extra stop predicate only this backend supports."""
    n_plus, n_minus = int(n_plus), int(n_minus)
    bp_i = [int(x) for x in bp_i]
    bm_i = [int(x) for x in bm_i]
    bp_rate = [float(x) for x in bp_rate]
    bm_rate = [float(x) for x in bm_rate]
    grid = [float(x) for x in grid]
    ng, g = len(grid), 0
    nbp, nbm = len(bp_rate), len(bm_rate)
    gp = np.full(ng, -1, dtype=np.int64)
    gm = np.full(ng, -1, dtype=np.int64)
    exp_draw, unif = rng.standard_exponential, rng.random
    BP = 0.0
    for r in bp_rate:
        BP += r
    BM = 0.0
    for r in bm_rate:
        BM += r
    rt, rp, rm = ([0.0], [n_plus], [n_minus]) if record else (None, None, None)
    t = 0.0
    status = HORIZON
    N = n_plus + n_minus
    if N >= stop_hi or N < stop_lo or (stop_fn is not None and stop_fn(t, n_plus, n_minus)):
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
        t_next = t + exp_draw() / total
        if t_next > horizon:
            break
        while g < ng and grid[g] < t_next:
            gp[g] = n_plus
            gm[g] = n_minus
            g += 1
        t = t_next
        u = unif() * total
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
            rt.append(t)
            rp.append(n_plus)
            rm.append(n_minus)
        N = n_plus + n_minus
        if N >= stop_hi or N < stop_lo or (stop_fn is not None and stop_fn(t, n_plus, n_minus)):
            status = STOPPED
        elif N == 0:
            status = ABSORBED
    if status in (HORIZON, ABSORBED):
        gp[g:] = n_plus
        gm[g:] = n_minus
    if record:
        return (status, t, n_plus, n_minus, gp, gm,
                np.array(rt, dtype=np.float64), np.array(rp, dtype=np.int64),
                np.array(rm, dtype=np.int64))
    return status, t, n_plus, n_minus, gp, gm, None, None, None


def sde_run(rng, w0, sel, th_p, th_m, a, b, dt, nsteps, grid_steps, record):
    grid_steps = [int(x) for x in grid_steps]
    ng, gi = len(grid_steps), 0
    out = np.empty(ng, dtype=np.float64)
    w = float(w0)
    sq = math.sqrt(dt)
    normal = rng.standard_normal
    path = None
    if record:
        path = np.empty(nsteps + 1, dtype=np.float64)
        path[0] = w
    for k in range(nsteps):
        while gi < ng and grid_steps[gi] == k:
            out[gi] = w
            gi += 1
        drift = -sel * w * (1.0 - w) + th_p * (1.0 - w) - th_m * w
        var = a * w * (1.0 - w) - b * w * w * (1.0 - w)
        w = w + drift * dt
        if var > 0.0:
            z = normal()
            w = w + math.sqrt(var) * sq * z
        if w < 0.0:
            w = 0.0
        elif w > 1.0:
            w = 1.0
        if record:
            path[k + 1] = w
    out[gi:] = w
    return out, path


def dual_run(rng, n0, th_p, sel, a, b, horizon, grid, record):
    grid = [float(x) for x in grid]
    ng, g = len(grid), 0
    out = np.empty(ng, dtype=np.int64)
    n = int(n0)
    t = 0.0
    rt, rn = ([0.0], [n]) if record else (None, None)
    exp_draw, unif = rng.standard_exponential, rng.random
    while True:
        down = th_p * n + a * (0.5 * n * (n - 1))
        up = sel * n + b * (0.5 * n * (n - 1))
        total = down + up
        if total <= 0.0:
            break
        t_next = t + exp_draw() / total
        if t_next > horizon:
            break
        while g < ng and grid[g] < t_next:
            out[g] = n
            g += 1
        t = t_next
        u = unif() * total
        if u < down:
            n -= 1
        else:
            n += 1
        if record:
            rt.append(t)
            rn.append(n)
    out[g:] = n
    return out, rt, rn


def graphical_run(rng, n_plus, n_minus, nu_i, nu_j, nu_mass, comp, K, n_down, n_up,
                  T, mode, capacity):
    n_plus, n_minus = int(n_plus), int(n_minus)
    nu_i = [int(x) for x in nu_i]
    nu_j = [int(x) for x in nu_j]
    nu_mass = [float(x) for x in nu_mass]
    na = len(nu_mass)
    exp_draw, unif = rng.standard_exponential, rng.random
    nu_total = 0.0
    for x in nu_mass:
        nu_total += x
    comp_rate = comp * n_up * n_up
    total = K * (n_up * nu_total + comp_rate)
    N = n_plus + n_minus
    frozen, frozen_time = False, -1.0
    max_ij = n_acc = n_cand = 0
    et, ei, ej, en, ef = [], [], [], [], []
    if N < n_down or N > n_up:
        frozen, frozen_time = True, 0.0
    if total <= 0.0:
        T = -1.0
    t = 0.0
    while True:
        t = t + exp_draw() / total
        if t > T:
            break
        n_cand += 1
        u = unif() * (n_up * nu_total + comp_rate)
        v = unif()
        acc = 0.0
        a = -1
        for k in range(na):
            acc = acc + n_up * nu_mass[k]
            if u < acc:
                a = k
                break
        is_comp = a < 0
        if is_comp:
            i = j = 0
        else:
            i, j = nu_i[a], nu_j[a]
            if i + j > max_ij:
                max_ij = i + j
        accepted = plus_parent = False
        if not frozen:
            N = n_plus + n_minus
            if is_comp:
                frac = N / n_up
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
                        accepted, frozen, frozen_time = False, True, t
                    else:
                        n_plus += i + j - 1
                else:
                    if (not is_comp) and N - 1 + i < i + 2 * j:
                        accepted, frozen, frozen_time = False, True, t
                    else:
                        n_minus += i - 1
            if accepted:
                n_acc += 1
                N = n_plus + n_minus
                if N < n_down or N > n_up:
                    frozen, frozen_time = True, t
        if mode == 2:
            continue
        if not (mode == 0 or ((not is_comp) and (i >= 2 or j >= 1))):
            continue
        flags = 0
        if accepted:
            flags |= ACCEPTED
            if plus_parent:
                flags |= PARENT_PLUS
        if is_comp:
            flags |= COMPETITION
        et.append(t)
        ei.append(i)
        ej.append(j)
        en.append(n_plus + n_minus)
        ef.append(flags)
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
    return summary, (np.array(et, dtype=np.float64), np.array(ei, dtype=np.int16),
                     np.array(ej, dtype=np.int16), np.array(en, dtype=np.int32),
                     np.array(ef, dtype=np.int8))


def _p_plus(n, N, i, j):
    if j == 0 or n < 1:
        return 0.0
    val = n * (j / N)
    for k in range(1, n):
        val *= 1.0 - (i + 2 * j - 1) / (N - k)
    return val


def _p_minus(n, N, i, j):
    if n < 2 or i < 2:
        return 0.0
    val = 0.5 * n * (n - 1) * (i * (i - 1)) / (N * (N - 1))
    for k in range(2, n):
        val *= 1.0 - (i + j - 2) / (N - k)
    return val


def _prob_up(n, N, i, j):
    c = i + 2 * j
    tot = 0.0
    lz = _lbinom(N, n)
    for r in range(1, min(j, n) + 1):
        tot += math.exp(_lbinom(j, r) + _lbinom(N - c, n - r) - lz)
    return tot


def _prob_down(n, N, i, j):
    c = i + 2 * j
    tot = 0.0
    lz = _lbinom(N, n)
    if n < 2 or i < 2:
        return 0.0
    for r in range(0, min(j, n - 2) + 1):
        for mm in range(0, min(j, n - 2 - r) + 1):
            if r >= 1 and mm >= 1:
                continue
            tot += math.exp(_lbinom(i, 2) + _lbinom(j, r) + _lbinom(j, mm)
                            + _lbinom(N - c, n - 2 - r - mm) - lz)
    return tot


def _sample_lineages(unif, n, N, i, j):
    c = i + 2 * j
    if c == 0 or n == 0:
        return n
    p0 = 1.0
    for k in range(n):
        if N - c - k <= 0:
            p0 = 0.0
            break
        p0 *= (N - c - k) / (N - k)
    u = unif()
    if u < p0:
        return n
    u = u - p0
    acc = 0.0
    lz = _lbinom(N, n)
    bb, rr, mmm = -1, 0, 0
    found = False
    for b in range(0, min(i, n) + 1):
        for r in range(0, min(j, n - b) + 1):
            for mm in range(0, min(j, n - b - r) + 1):
                if b == 0 and r == 0 and mm == 0:
                    continue
                w = math.exp(_lbinom(i, b) + _lbinom(j, r) + _lbinom(j, mm)
                             + _lbinom(N - c, n - b - r - mm) - lz)
                if w <= 0.0:
                    continue
                acc = acc + w
                bb, rr, mmm = b, r, mm
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


def asg_backward(rng, et, ei, ej, en, ef, m, T, aux, L, n_up, fallback):
    unif = rng.random
    A = B = int(m)
    last = 0.0
    int_A = int_pairs = 0.0
    ups = downs = multis = 0
    tau = sigma = t_star = math.inf
    a_t, a_n, b_t, b_n = [0.0], [A], [0.0], [B]
    if aux and B >= L:
        sigma = 0.0
    et = et.tolist()
    ei = ei.tolist()
    ej = ej.tolist()
    en = en.tolist()
    ef = ef.tolist()
    for idx in range(len(et) - 1, -1, -1):
        tb = T - et[idx]
        if A > 0:
            int_A += A * (tb - last)
            int_pairs += 0.5 * A * (A - 1) * (tb - last)
        last = tb
        i, j, N = ei[idx], ej[idx], en[idx]
        accepted = (ef[idx] & ACCEPTED) != 0
        A_new = A
        if accepted and A > 0 and (i >= 1 or j >= 1):
            A_new = _sample_lineages(unif, A, N, i, j)
        if aux and (i >= 2 or j >= 1):
            V = unif()
            B_new = B
            coupled = (not fallback) and accepted and A == B and A > 0
            if coupled:
                if A_new == A + 1:
                    pp = _p_plus(B, n_up, i, j)
                    q = _prob_up(B, N, i, j)
                    q = (pp / q) if q > 0.0 else (math.inf if pp > 0.0 else 0.0)
                    if V <= q:
                        B_new = B + 1
                elif A_new == A - 1:
                    pm = _p_minus(B, n_up, i, j)
                    q = _prob_down(B, N, i, j)
                    q = (pm / q) if q > 0.0 else (math.inf if pm > 0.0 else 0.0)
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
                if B >= L and sigma == math.inf:
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
        if aux and tau == math.inf and A != B:
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


def branching_classes(rng, counts, p_i, p_rate, m_i, m_rate, stop_size, horizon):
    """Free branching of per-class (plus, minus) counts, updated in place."""
    c = counts
    nc = c.shape[0]
    p_i = [int(x) for x in p_i]
    m_i = [int(x) for x in m_i]
    p_rate = [float(x) for x in p_rate]
    m_rate = [float(x) for x in m_rate]
    np_, nm = len(p_rate), len(m_rate)
    exp_draw, unif = rng.standard_exponential, rng.random
    MP = 0.0
    for r in p_rate:
        MP += r
    MM = 0.0
    for r in m_rate:
        MM += r
    rows = [[int(c[k, 0]), int(c[k, 1])] for k in range(nc)]
    size = sum(a + b for a, b in rows)
    t = 0.0
    status = HORIZON
    while True:
        if size >= stop_size:
            status = STOPPED
            break
        if size == 0:
            status = ABSORBED
            break
        total = 0.0
        for k in range(nc):
            total = total + rows[k][0] * MP + rows[k][1] * MM
        if total <= 0.0:
            break
        t = t + exp_draw() / total
        if t > horizon:
            break
        u = unif() * total
        acc = 0.0
        sel_k, sel_t = nc - 1, 1
        for k in range(nc):
            acc = acc + rows[k][0] * MP
            if u < acc:
                sel_k, sel_t = k, 0
                break
            acc = acc + rows[k][1] * MM
            if u < acc:
                sel_k, sel_t = k, 1
                break
        u = unif()
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
        rows[sel_k][sel_t] += step
        size += step
    c[:, :] = np.array(rows, dtype=np.int64).reshape(c.shape)
    return status, t
