"""Probability machinery: departures, arrivals, exact transitions, ward sizing."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K_
from .model import (
    ArrivalRegime,
    InfeasibleAssignmentError,
    InstanceTooLargeError,
    ModelParams,
    PostDecisionState,
    State,
)

DEFAULT_TRIALS_CAP = 100_000
POISSON_TAIL = 1e-14


def dynamics(params: ModelParams) -> K_.Dynamics:
    """Bundle ``params`` into the flat arrays used by the compiled kernels."""

    def grouped(coef):
        levels, inverse = np.unique(coef, return_inverse=True)
        return levels.astype(np.float64), inverse.reshape(coef.shape).astype(np.int64)

    cs_lv, cs_ix = grouped(params.assign_cost)
    ct_lv, ct_ix = grouped(params.transfer_cost)
    cp_lv, cp_ix = grouped(params.penalty_cost)
    regime = K_.CAPACITY_LIMITED if params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED else K_.UNRESTRICTED
    wcap = -1 if params.waiting_capacity is None else int(params.waiting_capacity)
    bound = params.total_capacity if wcap < 0 else min(wcap, params.total_capacity)
    pmf = K_.poisson_pmf(float(params.total_rate), bound)
    return K_.Dynamics(
        np.ascontiguousarray(params.capacities, dtype=np.int64),
        np.ascontiguousarray(params.wards_by_rank, dtype=np.int64),
        np.ascontiguousarray(params.preference_order, dtype=np.int64),
        np.ascontiguousarray(params.departure_probs, dtype=np.float64),
        np.ascontiguousarray(params.arrival_rates, dtype=np.float64),
        wcap,
        regime,
        cs_lv, cs_ix,
        np.ascontiguousarray(params.transfer_cost, dtype=np.float64), ct_lv, ct_ix,
        cp_lv, cp_ix,
        bool(params.include_assignment_cost),
        np.ascontiguousarray(params.nonprimary_mask()),
        float(params.total_rate),
        int(params.total_capacity),
        pmf,
        K_.cumulative(pmf),
        float(params.total_rate) if wcap < 0 else float(K_.mean_min_poisson(float(params.total_rate), wcap)),
    )


# -- pmfs ----------------------------------------------------------------------


@dataclass(frozen=True)
class Pmf:
    """Distribution on the integers ``offset, offset + 1, ...``."""

    offset: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probabilities must be a nonempty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and nonnegative")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.probs.size)

    @property
    def mean(self) -> float:
        return float(self.support @ self.probs)

    @property
    def variance(self) -> float:
        d = self.support - self.mean
        return float((d * d) @ self.probs)

    def __getitem__(self, value: int) -> float:
        j = value - self.offset
        return float(self.probs[j]) if 0 <= j < self.probs.size else 0.0

    def __len__(self):
        return self.probs.size

    def to_csv(self, path, header: Sequence[str] = ()):
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["value", "probability"])
            for v, p in zip(self.support, self.probs):
                w.writerow([int(v), repr(float(p))])


@dataclass(frozen=True)
class BinomialTerm:
    trials: int
    success_prob: float

    def __post_init__(self):
        if int(self.trials) != self.trials or self.trials < 0:
            raise ValueError(f"trials must be a nonnegative integer, got {self.trials}")
        if not 0.0 <= self.success_prob <= 1.0:
            raise ValueError(f"success probability {self.success_prob} outside [0, 1]")


def _terms(terms: Iterable) -> list[BinomialTerm]:
    out = []
    for t in terms:
        out.append(t if isinstance(t, BinomialTerm) else BinomialTerm(int(t[0]), float(t[1])))
    return out


def departure_pmf(n: int, p: float) -> Pmf:
    t = BinomialTerm(n, p)
    return Pmf(0, K_.sum_binomial(np.array([t.trials], np.int64), np.array([t.success_prob])))


def sum_binomial_pmf(terms: Iterable, cap: int = DEFAULT_TRIALS_CAP) -> Pmf:
    """Exact pmf of a sum of independent binomials via the banded recursion."""
    ts = _terms(terms)
    if not ts:
        raise ValueError("at least one binomial term is required")
    total = sum(t.trials for t in ts)
    if total > cap:
        raise InstanceTooLargeError(f"total trials {total} exceed the cap {cap}")
    ns = np.array([t.trials for t in ts], np.int64)
    ps = np.array([t.success_prob for t in ts], np.float64)
    return Pmf(0, K_.sum_binomial(ns, ps))


def _post_array(post) -> np.ndarray:
    if isinstance(post, (PostDecisionState, State)):
        return np.ascontiguousarray(post.n, dtype=np.int64)
    return np.ascontiguousarray(post, dtype=np.int64)


def occupancy_departure_pmf(post, params: ModelParams) -> Pmf:
    """Pmf of the total number of departures from a post-decision occupancy."""
    na = _post_array(post)
    mask = na > 0
    if not mask.any():
        return Pmf(0, np.ones(1))
    return sum_binomial_pmf(zip(na[mask], params.departure_probs[mask]))


def poisson_pmf(lam: float, tail: float = POISSON_TAIL) -> Pmf:
    """Poisson pmf truncated where the discarded upper tail drops below ``tail``."""
    if lam < 0:
        raise ValueError("rate must be nonnegative")
    kmax = max(1, int(lam + 10 * math.sqrt(lam) + 10))
    while True:
        pmf = K_.poisson_pmf(float(lam), kmax)
        if 1.0 - K_.cumulative(pmf)[-1] < tail and pmf[-1] < tail:
            return Pmf(0, pmf)
        kmax *= 2


def arrival_total_pmf_capped(b: int, lam: float) -> Pmf:
    """Pmf of ``min(Poisson(lam), b)``."""
    if b < 0 or lam < 0:
        raise ValueError("b and lam must be nonnegative")
    if b == 0:
        return Pmf(0, np.ones(1))
    pmf = K_.poisson_pmf(float(lam), b)
    head = K_.cumulative(pmf[:b])[-1]
    probs = pmf.copy()
    probs[b] = max(0.0, 1.0 - head)
    return Pmf(0, probs)


def mean_min_poisson(lam: float, cap: int) -> float:
    return float(K_.mean_min_poisson(float(lam), int(cap)))


def expected_admitted(post, params: ModelParams) -> float:
    """Expected number of arrivals admitted on the next day, E(Q)."""
    D = dynamics(params)
    return float(K_.expected_admitted(_post_array(post), D, K_.make_work(D)))


# -- sampling --------------------------------------------------------------------


def sample_departures(post, params: ModelParams, rng: np.random.Generator) -> np.ndarray:
    na = _post_array(post)
    z = np.zeros_like(na)
    K_.sample_departures(na, np.ascontiguousarray(params.departure_probs), rng, z)
    return z


def sample_arrivals(occupancy, params: ModelParams, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Next queue and redirected count, given the occupancy left after departures."""
    n = _post_array(occupancy)
    q = np.zeros(params.num_types, np.int64)
    redirected = K_.sample_arrivals(int(n.sum()), dynamics(params), rng, q)
    return q, int(redirected)


# -- exact transitions ------------------------------------------------------------


def _admission_limit(occupied: int, params: ModelParams) -> int | None:
    limits = []
    if params.waiting_capacity is not None:
        limits.append(params.waiting_capacity)
    if params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED:
        limits.append(params.total_capacity - occupied)
    return min(limits) if limits else None


def admitted_total_pmf(occupied: int, params: ModelParams) -> Pmf:
    """Law of the admitted arrival total given the occupancy after departures."""
    limit = _admission_limit(occupied, params)
    if limit is None:
        return poisson_pmf(params.total_rate)
    return arrival_total_pmf_capped(limit, params.total_rate)


def multinomial_pmf(counts: Sequence[int], weights: np.ndarray) -> float:
    total = sum(counts)
    logp = math.lgamma(total + 1)
    for c, w in zip(counts, weights):
        if c:
            if w <= 0:
                return 0.0
            logp += c * math.log(w) - math.lgamma(c + 1)
    return math.exp(logp)


def _split_law(total: int, weights: np.ndarray) -> list[tuple[tuple[int, ...], float]]:
    I = weights.size
    if total == 0:
        return [((0,) * I, 1.0)]
    out = []
    for head in itertools.product(range(total + 1), repeat=I - 1):
        rest = total - sum(head)
        if rest < 0:
            continue
        counts = head + (rest,)
        pr = multinomial_pmf(counts, weights)
        if pr > 0:
            out.append((counts, pr))
    return out


def departure_outcomes(na: np.ndarray, params: ModelParams) -> dict[tuple[int, ...], float]:
    """Law of the flattened occupancy left after departures, by product of binomials."""
    cells = [(idx, int(c)) for idx, c in np.ndenumerate(na) if c > 0]
    laws = [departure_pmf(c, float(params.departure_probs[idx])).probs for idx, c in cells]
    out: dict[tuple[int, ...], float] = {}
    flat0 = na.ravel().copy()
    pos = [np.ravel_multi_index(idx, na.shape) for idx, _ in cells]
    for zs in itertools.product(*[range(len(l)) for l in laws]):
        pr = 1.0
        for z, l in zip(zs, laws):
            pr *= l[z]
        if pr == 0.0:
            continue
        flat = flat0.copy()
        for j, z in zip(pos, zs):
            flat[j] -= z
        key = tuple(int(v) for v in flat)
        out[key] = out.get(key, 0.0) + pr
    return out


def transition_from_post(na: np.ndarray, params: ModelParams) -> dict[State, float]:
    """Exact next-state law from a post-decision occupancy."""
    if params.arrival_regime is ArrivalRegime.UNRESTRICTED and params.waiting_capacity is None:
        raise InstanceTooLargeError("unbounded waiting area: next-state law has infinite support")
    shape = na.shape
    lam = params.total_rate
    weights = params.arrival_rates / lam if lam > 0 else np.zeros(params.num_types)
    split_cache: dict[int, list] = {}
    out: dict[State, float] = {}
    for flat, pz in departure_outcomes(na, params).items():
        n_next = np.array(flat, np.int64).reshape(shape)
        totals = admitted_total_pmf(int(n_next.sum()), params)
        for t, pt in zip(totals.support, totals.probs):
            if pt == 0.0:
                continue
            t = int(t)
            if t not in split_cache:
                split_cache[t] = _split_law(t, weights)
            for counts, pc in split_cache[t]:
                s = State(n_next, np.array(counts, np.int64))
                out[s] = out.get(s, 0.0) + pz * pt * pc
    return out


def transition_pmf(s: State, label, params: ModelParams) -> dict[State, float]:
    """Exact law of the next state after realizing ``label`` in ``s``."""
    from .policies import realize

    action = realize(label, s, params)
    return transition_from_post(s.n + action.x + _net_transfers(action), params)


def _net_transfers(action) -> np.ndarray:
    y = action.y_array()
    return y.sum(axis=0) - y.sum(axis=1)


# -- ward sizing ------------------------------------------------------------------


def erlang_b(servers: int, offered_load: float) -> float:
    """Erlang-B blocking probability by the stable forward recursion."""
    b = 1.0
    for n in range(1, servers + 1):
        b = offered_load * b / (n + offered_load * b)
    return b


def erlang_loss_capacity(lam: float, mean_los: float, target: float = 0.15, max_servers: int = 100_000) -> int:
    """Smallest ward size whose full-ward probability is below ``target``."""
    if lam <= 0 or mean_los <= 0 or not 0 < target < 1:
        raise ValueError("need lam > 0, mean_los > 0 and 0 < target < 1")
    a = lam * mean_los
    b = 1.0
    for n in range(1, max_servers + 1):
        b = a * b / (n + a * b)
        if b < target:
            return n
    raise InstanceTooLargeError(f"no ward size up to {max_servers} meets the target")


def raise_status(status: int, context: str = ""):
    if status < 0:
        i = -1 - status
        suffix = f" ({context})" if context else ""
        raise InfeasibleAssignmentError(i, f"no bed available for a type-{i + 1} patient{suffix}")
