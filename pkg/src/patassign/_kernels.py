"""Compiled inner loops shared by the public API and the simulators.

Every function here takes plain arrays, bundled in :class:`Dynamics` (the
instance) and :class:`Work` (preallocated scratch), so the same code serves a
single Python call and million-step trajectories without allocating per step.
Failures are signalled by negative status codes that wrappers turn into
exceptions.  Random draws go through a caller-owned ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from collections import namedtuple

import numba
import numpy as np

UNRESTRICTED = 0
CAPACITY_LIMITED = 1

FULL_STATE = 0
PRIMARY_OTHER_QUEUE = 1

TRIM = 1e-20

Dynamics = namedtuple(
    "Dynamics",
    [
        "m",  # (K,) ward capacities
        "wards_by_rank",  # (I, K) ward of each rank per type
        "order",  # (I, K) 1-based rank of ward k for type i
        "p",  # (K, I) daily departure probabilities
        "lam",  # (I,) arrival rates
        "wcap",  # waiting capacity, -1 for unbounded
        "regime",  # UNRESTRICTED or CAPACITY_LIMITED
        "cs_levels", "cs_index",  # assignment cost, grouped by distinct value
        "ct", "ct_levels", "ct_index",  # transfer cost
        "cp_levels", "cp_index",  # penalty cost
        "include_assign",
        "nonprimary",  # (K, I) bool
        "lam_total",
        "m_total",
        "pois_pmf", "pois_cdf",  # Poisson(lam_total) on 0..admission bound
        "eq_unrestricted",  # admitted mean when admission ignores free beds
    ],
)

Work = namedtuple(
    "Work",
    ["occ", "pend", "qq", "sums", "alpha", "posts", "values",
     "x", "y", "na", "xs", "ys", "nas", "z", "phi", "phi_next"],
)


def make_work(D: Dynamics, num_labels: int = 1, num_features: int = 1) -> Work:
    K, I = D.p.shape
    levels = max(D.cs_levels.size, D.ct_levels.size, D.cp_levels.size)
    L = max(1, num_labels)
    F = max(1, num_features)
    return Work(
        np.zeros(K, np.int64), np.zeros((K, I), np.int64), np.zeros(I, np.int64),
        np.zeros(levels, np.int64), np.zeros(D.m_total + 2),
        np.zeros((L, K, I), np.int64), np.zeros(L),
        np.zeros((K, I), np.int64), np.zeros((K, K, I), np.int64), np.zeros((K, I), np.int64),
        np.zeros((K, I), np.int64), np.zeros((K, K, I), np.int64), np.zeros((K, I), np.int64),
        np.zeros((K, I), np.int64), np.zeros(F), np.zeros(F),
    )


_jit = numba.njit(cache=True, nogil=True)
# per-step helpers are inlined: passing the instance and workspace tuples
# through real calls costs a reference-count round trip per array
_inline = numba.njit(cache=True, nogil=True, inline="always")


# -- small array helpers (explicit loops avoid temporaries) --------------------


@_inline
def _zero3(a):
    A, B, C = a.shape
    for i in range(A):
        for j in range(B):
            for k in range(C):
                a[i, j, k] = 0


@_inline
def _copy2(dst, src):
    A, B = src.shape
    for i in range(A):
        for j in range(B):
            dst[i, j] = src[i, j]


@_inline
def _copy3(dst, src):
    A, B, C = src.shape
    for i in range(A):
        for j in range(B):
            for k in range(C):
                dst[i, j, k] = src[i, j, k]


@_inline
def _equal2(a, b):
    A, B = a.shape
    for i in range(A):
        for j in range(B):
            if a[i, j] != b[i, j]:
                return False
    return True


# -- assignment heuristics ---------------------------------------------------


@_inline
def assign_priority(n, q, D, W, x, y, na):
    """Types in index order, each patient to its best ward with a free bed.

    Fills ``x``, ``y`` (zero) and ``na`` in place.  Returns 0, or ``-1 - i``
    when a type-i patient finds no bed.
    """
    K, I = n.shape
    occ = W.occ
    _zero3(y)
    for k in range(K):
        occ[k] = 0
        for i in range(I):
            na[k, i] = n[k, i]
            x[k, i] = 0
            occ[k] += n[k, i]
    for i in range(I):
        rem = q[i]
        for r in range(K):
            if rem == 0:
                break
            k = D.wards_by_rank[i, r]
            free = D.m[k] - occ[k]
            if free > 0:
                t = rem if rem < free else free
                x[k, i] += t
                na[k, i] += t
                occ[k] += t
                rem -= t
        if rem > 0:
            return -1 - i
    return 0


@_inline
def assign_bounded_transfers(n, q, D, W, y_max, relocate, x, y, na):
    """Priority assignment with at most ``y_max`` transfers.

    A type-i arrival may take a bed in a full ward whose type-<=i occupancy
    is below capacity by displacing the highest-index occupant of type > i
    who is outside their own first-choice ward.  Displaced patients are
    moved when their own type comes up, from the worst-ranked ward holding
    one, to the cheapest ward with space (ties: their rank, then ward index).

    Returns the number of transfers, or ``-1 - i`` on infeasibility.
    """
    K, I = n.shape
    m = D.m
    order = D.order
    ct = D.ct
    occ = W.occ  # excludes patients already marked to leave
    pend = W.pend
    qq = W.qq
    _zero3(y)
    for i in range(I):
        qq[i] = q[i]
    for k in range(K):
        occ[k] = 0
        for i in range(I):
            pend[k, i] = 0
            na[k, i] = n[k, i]
            x[k, i] = 0
            occ[k] += n[k, i]
    budget = y_max
    moved = 0
    while True:
        i = -1
        for j in range(I):
            if qq[j] > 0:
                i = j
                break
            waiting = 0
            for k in range(K):
                waiting += pend[k, j]
            if waiting > 0:
                i = j
                break
        if i < 0:
            break
        # relocate displaced type-i patients
        while True:
            src = -1
            for k in range(K):
                if pend[k, i] > 0 and (src < 0 or order[i, k] > order[i, src]):
                    src = k
            if src < 0:
                break
            dst = -1
            for l in range(K):
                if l == src or occ[l] >= m[l]:
                    continue
                if dst < 0:
                    dst = l
                    continue
                c, cb = ct[src, l, i], ct[src, dst, i]
                if c < cb or (c == cb and order[i, l] < order[i, dst]):
                    dst = l
            if dst < 0:
                return -1 - i
            pend[src, i] -= 1
            na[src, i] -= 1
            na[dst, i] += 1
            occ[dst] += 1
            y[src, dst, i] += 1
            moved += 1
        # place queued type-i arrivals
        while qq[i] > 0:
            placed = False
            for r in range(K):
                k = D.wards_by_rank[i, r]
                if occ[k] < m[k]:
                    x[k, i] += 1
                    na[k, i] += 1
                    occ[k] += 1
                    placed = True
                    break
                if budget <= 0:
                    continue
                senior = 0
                for j in range(i + 1):
                    senior += na[k, j]
                if senior < m[k]:
                    victim = -1
                    for j in range(I - 1, i, -1):
                        if na[k, j] - pend[k, j] > 0 and order[j, k] != 1:
                            victim = j
                            break
                    if victim >= 0:
                        x[k, i] += 1
                        na[k, i] += 1
                        pend[k, victim] += 1
                        budget -= 1
                        placed = True
                        break
                if relocate:
                    mover = -1
                    dest = -1
                    for j in range(I - 1, -1, -1):
                        if j == i or na[k, j] - pend[k, j] <= 0:
                            continue
                        best = -1
                        for g in range(K):
                            if g != k and occ[g] < m[g] and order[j, g] < order[j, k]:
                                if best < 0 or order[j, g] < order[j, best]:
                                    best = g
                        if best >= 0:
                            mover = j
                            dest = best
                            break
                    if mover >= 0:
                        na[k, mover] -= 1
                        na[dest, mover] += 1
                        occ[dest] += 1
                        y[k, dest, mover] += 1
                        moved += 1
                        x[k, i] += 1
                        na[k, i] += 1
                        budget -= 1
                        placed = True
                        break
            if not placed:
                return -1 - i
            qq[i] -= 1
    return moved


@_inline
def realize(n, q, D, W, y_max, relocate, x, y, na):
    """Realize a decision label (``y_max < 0`` means no transfers)."""
    if y_max < 0:
        return assign_priority(n, q, D, W, x, y, na)
    return assign_bounded_transfers(n, q, D, W, y_max, relocate, x, y, na)


# -- costs ---------------------------------------------------------------------


@_inline
def _level_total(levels, sums):
    out = 0.0
    for l in range(levels.size):
        if sums[l] != 0:
            out += levels[l] * sums[l]
    return out


@_inline
def _grouped2(counts, index, levels, sums):
    for l in range(levels.size):
        sums[l] = 0
    A, B = counts.shape
    for i in range(A):
        for j in range(B):
            if counts[i, j] != 0:
                sums[index[i, j]] += counts[i, j]
    return _level_total(levels, sums)


@_inline
def _grouped3(counts, index, levels, sums):
    for l in range(levels.size):
        sums[l] = 0
    A, B, C = counts.shape
    for i in range(A):
        for j in range(B):
            for k in range(C):
                if counts[i, j, k] != 0:
                    sums[index[i, j, k]] += counts[i, j, k]
    return _level_total(levels, sums)


@_inline
def immediate_cost(x, y, na, D, W):
    """Assignment, transfer and penalty cost, each as level times integer count."""
    total = 0.0
    if D.include_assign:
        total += _grouped2(x, D.cs_index, D.cs_levels, W.sums)
    total += _grouped3(y, D.ct_index, D.ct_levels, W.sums)
    total += _grouped2(na, D.cp_index, D.cp_levels, W.sums)
    return total


@_inline
def census(na, nonprimary):
    K, I = na.shape
    c = 0
    for k in range(K):
        for i in range(I):
            if nonprimary[k, i]:
                c += na[k, i]
    return c


# -- distributions -------------------------------------------------------------


@_jit
def sum_binomial(ns, ps):
    """Pmf of a sum of independent binomials by successive banded updates.

    Each Bernoulli trial multiplies the row vector by the bidiagonal matrix
    with ``1 - p`` on the diagonal and ``p`` above it.
    """
    total = 0
    for t in range(ns.size):
        total += ns[t]
    alpha = np.zeros(total + 1)
    alpha[0] = 1.0
    hi = 0
    for t in range(ns.size):
        p = ps[t]
        s = 1.0 - p
        for _ in range(ns[t]):
            hi += 1
            for j in range(hi, 0, -1):
                alpha[j] = alpha[j] * s + alpha[j - 1] * p
            alpha[0] *= s
    return alpha


@_jit
def poisson_pmf(lam, kmax):
    out = np.zeros(kmax + 1)
    if lam == 0.0:
        out[0] = 1.0
        return out
    loglam = math.log(lam)
    for k in range(kmax + 1):
        out[k] = math.exp(k * loglam - lam - math.lgamma(k + 1.0))
    return out


@_jit
def cumulative(pmf):
    """Neumaier-compensated running sums."""
    out = np.empty(pmf.size)
    s = 0.0
    c = 0.0
    for k in range(pmf.size):
        v = pmf[k]
        t = s + v
        if abs(s) >= abs(v):
            c += (s - t) + v
        else:
            c += (v - t) + s
        s = t
        out[k] = s + c
    return out


@_jit
def mean_min_poisson(lam, cap):
    """E[min(Poisson(lam), cap)] as ``cap + (lam - cap) F(cap - 1) - cap P(cap)``."""
    if cap <= 0:
        return 0.0
    pmf = poisson_pmf(lam, cap)
    cdf = cumulative(pmf)
    return cap + (lam - cap) * cdf[cap - 1] - cap * pmf[cap]


@_inline
def expected_admitted(na, D, W):
    """Closed-form E(Q) from the pmf of total departures Z.

    Entries of the running departure pmf below ``TRIM`` are dropped from the
    band, which keeps the update cost proportional to the spread of Z while
    changing the result by far less than one ulp.
    """
    if D.regime == UNRESTRICTED:
        return D.eq_unrestricted
    lam = D.lam_total
    K, I = na.shape
    zmax = 0
    ez = 0.0
    for k in range(K):
        for i in range(I):
            zmax += na[k, i]
            ez += na[k, i] * D.p[k, i]
    alpha = W.alpha
    alpha[0] = 1.0
    lo = 0
    hi = 0
    for k in range(K):
        for i in range(I):
            p = D.p[k, i]
            s = 1.0 - p
            for _ in range(na[k, i]):
                hi += 1
                alpha[hi] = alpha[hi - 1] * p
                for j in range(hi - 1, lo, -1):
                    alpha[j] = alpha[j] * s + alpha[j - 1] * p
                alpha[lo] *= s
                while lo < hi and alpha[lo] < TRIM:
                    lo += 1
                while hi > lo and alpha[hi] < TRIM:
                    hi -= 1
    mtot = D.m_total
    base = mtot - zmax
    capped = D.wcap >= 0 and D.wcap < mtot
    pmf = D.pois_pmf
    cdf = D.pois_cdf
    head = 0.0
    if not capped:
        head = mtot - zmax + ez
    s1 = 0.0
    s2 = 0.0
    for z in range(lo, hi + 1):
        pz = alpha[z]
        beds = base + z
        if capped and beds > D.wcap:
            beds = D.wcap
        if capped:
            head += beds * pz
        if beds > 0:
            s1 += (lam - beds) * cdf[beds - 1] * pz
            s2 += beds * pmf[beds] * pz
    return head + s1 - s2


# -- sampling ------------------------------------------------------------------


@_inline
def sample_departures(na, p, rng, z):
    K, I = na.shape
    for k in range(K):
        for i in range(I):
            if na[k, i] > 0:
                z[k, i] = rng.binomial(na[k, i], p[k, i])
            else:
                z[k, i] = 0


@_inline
def sample_arrivals(occupied, D, rng, q):
    """Draw the next queue given post-departure occupancy; returns redirected count.

    The raw Poisson total is capped by the admission limit and the admitted
    total is split multinomially by successive conditional binomials.
    """
    lam = D.lam_total
    raw = rng.poisson(lam) if lam > 0.0 else 0
    cap = -1
    if D.regime == CAPACITY_LIMITED:
        cap = D.m_total - occupied
        if D.wcap >= 0 and D.wcap < cap:
            cap = D.wcap
    elif D.wcap >= 0:
        cap = D.wcap
    admitted = raw if cap < 0 or raw <= cap else cap
    rem = admitted
    tail = lam
    I = D.lam.size
    for i in range(I):
        if i == I - 1 or rem == 0:
            q[i] = rem
            rem = 0
            continue
        share = D.lam[i] / tail
        if share >= 1.0:
            draw = rem
        else:
            draw = rng.binomial(rem, share)
        q[i] = draw
        rem -= draw
        tail -= D.lam[i]
    return raw - admitted


@_inline
def advance(na, D, rng, z, n_next, q_next):
    """Departures then arrivals from a post-decision occupancy; returns redirected."""
    sample_departures(na, D.p, rng, z)
    occupied = 0
    K, I = na.shape
    for k in range(K):
        for i in range(I):
            n_next[k, i] = na[k, i] - z[k, i]
            occupied += n_next[k, i]
    return sample_arrivals(occupied, D, rng, q_next)


# -- value approximation --------------------------------------------------------


@_inline
def features(n, q, scheme, phi):
    K, I = n.shape
    if scheme == FULL_STATE:
        for k in range(K):
            for i in range(I):
                phi[k * I + i] = n[k, i]
        for i in range(I):
            phi[K * I + i] = q[i]
    else:
        for k in range(K):
            own = 0.0
            other = 0.0
            for i in range(I):
                if i == k:
                    own += n[k, i]
                else:
                    other += n[k, i]
            phi[2 * k] = own
            phi[2 * k + 1] = other
        for i in range(I):
            phi[2 * K + i] = q[i]


@_inline
def cell_slot(scheme, k, i, I):
    if scheme == FULL_STATE:
        return k * I + i
    return 2 * k if i == k else 2 * k + 1


@_inline
def expected_next_value(na, theta, scheme, D, W):
    """Occupants stay with probability 1 - p; the queue mean is E(Q) split by rate."""
    K, I = na.shape
    v = 0.0
    for k in range(K):
        for i in range(I):
            if na[k, i] > 0:
                v += na[k, i] * (1.0 - D.p[k, i]) * theta[cell_slot(scheme, k, i, I)]
    qbase = K * I if scheme == FULL_STATE else 2 * K
    lam = D.lam_total
    if lam > 0.0:
        eq = expected_admitted(na, D, W)
        for i in range(I):
            v += D.lam[i] / lam * eq * theta[qbase + i]
    return v


@_inline
def decide(n, q, D, W, lab_ymax, lab_reloc, mode, fixed, theta, scheme):
    """Choose a label and realize it into ``W.x, W.y, W.na``.

    ``mode`` 0 applies label ``fixed``; mode 1 is greedy in ``theta``
    (lowest index wins ties).  Returns ``(label, cost, transfers, status)``.
    """
    if mode == 0:
        st = realize(n, q, D, W, lab_ymax[fixed], lab_reloc[fixed], W.x, W.y, W.na)
        if st < 0:
            return fixed, 0.0, 0, st
        return fixed, immediate_cost(W.x, W.y, W.na, D, W), st, 0
    best = -1
    best_val = 0.0
    best_cost = 0.0
    best_moves = 0
    for a in range(lab_ymax.size):
        st = realize(n, q, D, W, lab_ymax[a], lab_reloc[a], W.xs, W.ys, W.nas)
        if st < 0:
            return a, 0.0, 0, st
        c = immediate_cost(W.xs, W.ys, W.nas, D, W)
        ev = 0.0
        seen = False
        for b in range(a):
            if _equal2(W.posts[b], W.nas):
                ev = W.values[b]
                seen = True
                break
        if not seen:
            ev = expected_next_value(W.nas, theta, scheme, D, W)
        _copy2(W.posts[a], W.nas)
        W.values[a] = ev
        val = c + ev
        if best < 0 or val < best_val - 1e-12 * max(1.0, abs(best_val)):
            best = a
            best_val = val
            best_cost = c
            best_moves = st
            _copy2(W.x, W.xs)
            _copy3(W.y, W.ys)
            _copy2(W.na, W.nas)
    return best, best_cost, best_moves, 0


# -- trajectories ----------------------------------------------------------------


@_jit
def simulate(n, q, days, D, W, lab_ymax, lab_reloc, mode, fixed, theta, scheme, shadow_ymax, shadow_reloc, rng,
             rec_label, rec_cost, rec_census, rec_redirected, rec_moves, rec_shadow,
             rec_n, rec_q, rec_post, rec_dep):
    """Run ``days`` decision epochs, filling the per-day record arrays.

    ``rec_shadow`` holds the transfers an unbounded-budget rerun of the
    heuristic would make beyond those actually made (``shadow_ymax < 0``
    disables it).  ``(n, q)`` is advanced in place.  Returns ``(status, day)``;
    status is 0 on success.
    """
    for d in range(days):
        _copy2(rec_n[d], n)
        for i in range(q.size):
            rec_q[d, i] = q[i]
        lab, cost, moves, st = decide(n, q, D, W, lab_ymax, lab_reloc, mode, fixed, theta, scheme)
        if st < 0:
            return st, d
        rec_label[d] = lab
        rec_cost[d] = cost
        rec_moves[d] = moves
        rec_census[d] = census(W.na, D.nonprimary)
        _copy2(rec_post[d], W.na)
        if shadow_ymax >= 0:
            sh = realize(n, q, D, W, shadow_ymax, shadow_reloc, W.xs, W.ys, W.nas)
            rec_shadow[d] = sh - moves if sh > moves else 0
        rec_redirected[d] = advance(W.na, D, rng, W.z, n, q)
        _copy2(rec_dep[d], W.z)
    return 0, days


@_jit
def burn_in(days, D, W, lab_ymax, lab_reloc, mode, fixed, theta, scheme, rng, n, q):
    """Advance ``(n, q)`` in place for ``days`` epochs; returns status."""
    for _ in range(days):
        lab, cost, moves, st = decide(n, q, D, W, lab_ymax, lab_reloc, mode, fixed, theta, scheme)
        if st < 0:
            return st
        advance(W.na, D, rng, W.z, n, q)
    return 0


@_jit
def average_cost(steps, D, W, lab_ymax, lab_reloc, theta, scheme, rng, n, q):
    """Mean immediate cost of the greedy policy over ``steps`` epochs from ``(n, q)``."""
    total = 0.0
    for _ in range(steps):
        lab, cost, moves, st = decide(n, q, D, W, lab_ymax, lab_reloc, 1, 0, theta, scheme)
        if st < 0:
            return total, st
        total += cost
        advance(W.na, D, rng, W.z, n, q)
    return total / steps, 0


@_jit
def lstd_accumulate(steps, D, W, lab_ymax, lab_reloc, theta, scheme, gain, rng, n, q, A, b):
    """Accumulate the LSTD system along one greedy trajectory.

    ``A`` gets ``phi(s_m) (phi(s_m) - phi(s_{m+1}))^T / steps`` and ``b`` gets
    ``phi(s_m) (C_m - gain) / steps``.  Returns ``(mean cost, status)``.
    """
    F = theta.size
    phi = W.phi
    phi_next = W.phi_next
    for f in range(F):
        b[f] = 0.0
        for g in range(F):
            A[f, g] = 0.0
    features(n, q, scheme, phi)
    total = 0.0
    for _ in range(steps):
        lab, cost, moves, st = decide(n, q, D, W, lab_ymax, lab_reloc, 1, 0, theta, scheme)
        if st < 0:
            return total, st
        total += cost
        advance(W.na, D, rng, W.z, n, q)
        features(n, q, scheme, phi_next)
        r = cost - gain
        for f in range(F):
            pf = phi[f]
            if pf != 0.0:
                for g in range(F):
                    A[f, g] += pf * (phi[g] - phi_next[g])
                b[f] += pf * r
        for f in range(F):
            phi[f] = phi_next[f]
    for f in range(F):
        b[f] /= steps
        for g in range(F):
            A[f, g] /= steps
    return total / steps, 0
