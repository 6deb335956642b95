"""Strategies and slow reference implementations shared by the test modules."""

import itertools
import math

import numpy as np
from hypothesis import strategies as st

from patassign.model import ArrivalRegime, ModelParams, State, penalty_matrix


def binomial_probs(n, p):
    return np.array([math.comb(n, z) * p ** z * (1 - p) ** (n - z) for z in range(n + 1)])


def convolve_binomials(terms):
    out = np.ones(1)
    for n, p in terms:
        out = np.convolve(out, binomial_probs(n, p))
    return out


def poisson_probs(lam, kmax):
    if lam == 0:
        return np.eye(1, kmax + 1)[0]
    return np.array([math.exp(-lam + k * math.log(lam) - math.lgamma(k + 1)) for k in range(kmax + 1)])


def admitted_monte_carlo(na, params, days, rng):
    """Admitted-arrival totals over ``days`` independent next days, vectorized."""
    p = params.departure_probs
    z = rng.binomial(np.broadcast_to(na, (days,) + na.shape), p)
    left = na.sum() - z.sum(axis=(1, 2))
    limit = np.full(days, np.iinfo(np.int64).max)
    if params.waiting_capacity is not None:
        limit[:] = params.waiting_capacity
    if params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED:
        limit = np.minimum(limit, params.total_capacity - left)
    return np.minimum(rng.poisson(params.total_rate, days), limit)


def brute_states(params):
    """Every (n, q) in the integer box that satisfies the state constraints."""
    K, I = params.num_wards, params.num_types
    m = params.capacities
    qcap = params.waiting_capacity
    joint = params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED
    out = []
    for cells in itertools.product(*[range(int(m[k]) + 1) for k in range(K) for _ in range(I)]):
        n = np.array(cells).reshape(K, I)
        if np.any(n.sum(axis=1) > m):
            continue
        for qs in itertools.product(range(qcap + 1), repeat=I):
            if sum(qs) > qcap:
                continue
            if joint and n.sum() + sum(qs) > m.sum():
                continue
            out.append(State(n, np.array(qs)))
    return out


def brute_transition(na, params):
    """Next-state law by enumerating every departure cell and every raw arrival total."""
    K, I = na.shape
    p = params.departure_probs
    lam = params.total_rate
    weights = params.arrival_rates / lam if lam > 0 else np.zeros(I)
    out = {}
    ranges = [range(int(na[k, i]) + 1) for k in range(K) for i in range(I)]
    for zs in itertools.product(*ranges):
        z = np.array(zs).reshape(K, I)
        pz = 1.0
        for k in range(K):
            for i in range(I):
                pz *= math.comb(int(na[k, i]), int(z[k, i])) * p[k, i] ** z[k, i] * (1 - p[k, i]) ** (na[k, i] - z[k, i])
        if pz == 0:
            continue
        left = na - z
        limit = params.waiting_capacity if params.waiting_capacity is not None else 10**9
        if params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED:
            limit = min(limit, int(params.total_capacity - left.sum()))
        # raw totals far into the tail, folded onto the admission limit
        tmax = limit + 60
        raw = poisson_probs(lam, tmax) if lam > 0 else np.eye(1, tmax + 1)[0]
        adm = np.zeros(limit + 1)
        for t, pt in enumerate(raw):
            adm[min(t, limit)] += pt
        adm[limit] += max(0.0, 1.0 - raw.sum())
        for t in range(limit + 1):
            if adm[t] == 0:
                continue
            for qs in itertools.product(range(t + 1), repeat=I):
                if sum(qs) != t:
                    continue
                pc = math.factorial(t)
                for c, w in zip(qs, weights):
                    pc *= w ** c / math.factorial(c)
                if pc == 0:
                    continue
                s = State(left, np.array(qs))
                out[s] = out.get(s, 0.0) + pz * adm[t] * pc
    return out


@st.composite
def instances(draw, max_wards=3, max_types=3, max_cap=3, regime=None, waiting=True, min_rate=0.0):
    K = draw(st.integers(1, max_wards))
    I = draw(st.integers(1, max_types))
    caps = draw(st.lists(st.integers(1, max_cap), min_size=K, max_size=K))
    rates = draw(st.lists(st.floats(min_rate, 3.0), min_size=I, max_size=I))
    probs = draw(st.lists(st.floats(0.05, 1.0), min_size=K * I, max_size=K * I))
    order = [list(draw(st.permutations(range(1, K + 1)))) for _ in range(I)]
    cs = draw(st.floats(0.0, 2.0))
    ct = draw(st.floats(0.0, 2.0))
    cp = draw(st.floats(0.0, 2.0))
    scope = draw(st.sampled_from(["nonprimary", "all"]))
    reg = regime or draw(st.sampled_from(list(ArrivalRegime)))
    wcap = draw(st.integers(0, 3)) if waiting else None
    return ModelParams(
        caps, rates, np.reshape(probs, (K, I)), order,
        np.full((K, I), cs), np.full((K, K, I), ct), penalty_matrix(order, cp, scope),
        waiting_capacity=wcap, arrival_regime=reg,
        include_assignment_cost=draw(st.booleans()),
    )


@st.composite
def occupancies(draw, params):
    K, I = params.num_wards, params.num_types
    n = np.zeros((K, I), np.int64)
    for k in range(K):
        room = int(params.capacities[k])
        for i in range(I):
            n[k, i] = draw(st.integers(0, room))
            room -= n[k, i]
    return n


@st.composite
def admissible_states(draw, params, max_queue=None):
    """States whose queue fits in the free beds, so every label is feasible."""
    n = draw(occupancies(params))
    free = int(params.total_capacity - n.sum())
    if max_queue is not None:
        free = min(free, max_queue)
    total = draw(st.integers(0, free))
    q = np.zeros(params.num_types, np.int64)
    for _ in range(total):
        q[draw(st.integers(0, params.num_types - 1))] += 1
    return State(n, q)


def random_state(rng, params, fill=1.0):
    """Occupancy and queue drawn so the queue always fits in the free beds."""
    K, I = params.num_wards, params.num_types
    n = np.zeros((K, I), np.int64)
    for k in range(K):
        room = int(rng.integers(0, int(params.capacities[k] * fill) + 1))
        n[k] = rng.multinomial(room, np.full(I, 1.0 / I))
    free = int(params.total_capacity - n.sum())
    q = rng.multinomial(int(rng.integers(0, free + 1)), np.full(I, 1.0 / I))
    return State(n, q)
