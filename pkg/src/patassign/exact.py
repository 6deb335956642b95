"""Exact average-cost solution of small instances by Howard policy iteration."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kernels import transition_from_post
from .model import (
    ArrivalRegime,
    BoundedTransfer,
    DecisionLabel,
    DimensionError,
    InstanceTooLargeError,
    ModelParams,
    NoTransfer,
    State,
    action_cost,
    apply_action,
    count_states,
    enumerate_states,
)
from .policies import realize

DEFAULT_STATE_CAP = 5000


class SingularPolicyError(RuntimeError):
    """Policy evaluation failed; the chain under ``policy`` is not unichain."""

    def __init__(self, policy: np.ndarray, message: str = "singular evaluation system"):
        super().__init__(f"{message}; policy={policy.tolist()}")
        self.policy = policy


@dataclass
class FiniteMdp:
    states: list[State]
    labels: list[DecisionLabel]
    P: np.ndarray  # (L, S, S)
    C: np.ndarray  # (L, S)

    def __post_init__(self):
        S, L = len(self.states), len(self.labels)
        if self.P.shape != (L, S, S) or self.C.shape != (L, S):
            raise DimensionError(f"matrices {self.P.shape}, {self.C.shape} do not match {L} labels x {S} states")
        self._index = {s.key(): j for j, s in enumerate(self.states)}

    @property
    def num_states(self) -> int:
        return len(self.states)

    def index(self, s: State) -> int:
        return self._index[s.key()]

    def reindexed(self, states: Sequence[State]) -> FiniteMdp:
        """Same MDP with rows and columns permuted into ``states`` order."""
        perm = np.array([self.index(s) for s in states])
        return FiniteMdp(list(states), list(self.labels), self.P[:, perm][:, :, perm], self.C[:, perm])

    def check(self, tol: float = 1e-10):
        rows = self.P.sum(axis=2)
        if np.max(np.abs(rows - 1.0)) > tol:
            raise ValueError(f"transition rows deviate from 1 by {np.max(np.abs(rows - 1.0)):.3g}")
        if np.any(self.P < 0) or np.any(self.C < 0):
            raise ValueError("negative probability or cost")

    def to_csv(self, directory, header: Sequence[str] = ()):
        """One ``P_<label>.csv`` and one ``C_<label>.csv`` per label."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        names = [state_name(s) for s in self.states]
        for a, lab in enumerate(self.labels):
            with open(out / f"P_{lab.name}.csv", "w", newline="") as fh:
                _header(fh, header)
                w = csv.writer(fh)
                w.writerow(["state"] + names)
                for name, row in zip(names, self.P[a]):
                    w.writerow([name] + [repr(float(v)) for v in row])
            with open(out / f"C_{lab.name}.csv", "w", newline="") as fh:
                _header(fh, header)
                w = csv.writer(fh)
                w.writerow(["state", "cost"])
                for name, c in zip(names, self.C[a]):
                    w.writerow([name, repr(float(c))])


def _header(fh, lines):
    for line in lines:
        fh.write(f"# {line}\n")


def state_name(s: State) -> str:
    return "".join(map(str, s.n.ravel())) + "|" + "".join(map(str, s.q))


def build_mdp(params: ModelParams, labels: Sequence[DecisionLabel], cap: int = DEFAULT_STATE_CAP) -> FiniteMdp:
    """Transition matrices and cost vectors of every label on the full state space."""
    size = count_states(params)
    if size > cap:
        raise InstanceTooLargeError(f"instance too large for exact enumeration: {size:.4g} states (cap {cap})")
    states = enumerate_states(params, cap=cap)
    index = {s.key(): j for j, s in enumerate(states)}
    S, L = len(states), len(labels)
    P = np.zeros((L, S, S))
    C = np.zeros((L, S))
    row_cache: dict[tuple, np.ndarray] = {}
    for a, lab in enumerate(labels):
        for j, s in enumerate(states):
            action = realize(lab, s, params)
            post = apply_action(s, action)
            C[a, j] = action_cost(s, action, params)
            key = post.key()
            if key not in row_cache:
                row = np.zeros(S)
                for nxt, pr in transition_from_post(post.n, params).items():
                    row[index[nxt.key()]] += pr
                row_cache[key] = row
            P[a, j] = row_cache[key]
    return FiniteMdp(states, list(labels), P, C)


# -- closed forms for the two-ward, two-type instance ---------------------------

EXAMPLE1_STATES = (
    "0000|00", "0000|10", "0000|01", "0000|20", "0000|11", "0000|02",
    "1000|00", "1000|10", "1000|01",
    "0100|00", "0100|10", "0100|01",
    "0010|00", "0010|10", "0010|01",
    "0001|00", "0001|10", "0001|01",
    "1010|00", "0110|00", "1001|00", "0101|00",
)


def _parse_state(code: str) -> State:
    n, q = code.split("|")
    return State(np.array([int(c) for c in n]).reshape(2, 2), np.array([int(c) for c in q]))


def example1_states() -> list[State]:
    """The 22 states in the conventional labelling (state 1 first)."""
    return [_parse_state(c) for c in EXAMPLE1_STATES]


def _uniform(arr: np.ndarray, mask: np.ndarray, what: str) -> float:
    vals = np.unique(arr[mask])
    if vals.size != 1:
        raise ValueError(f"closed forms need a uniform {what}")
    return float(vals[0])


def closed_form_matrices(params: ModelParams) -> FiniteMdp:
    """Closed-form matrices for the two-ward instance with one bed per ward.

    The instance must have two wards and two types, one bed each, a waiting
    area of two, capacity-limited admission, identity preferences and uniform
    assignment, transfer and nonprimary penalty costs.  Labels are
    ``a1`` (no transfers) and ``a2`` (transfers with relocation).
    """
    if (params.num_wards, params.num_types) != (2, 2) or list(params.capacities) != [1, 1]:
        raise DimensionError("closed forms require two wards, two types and one bed per ward")
    if params.waiting_capacity != 2 or params.arrival_regime is not ArrivalRegime.CAPACITY_LIMITED:
        raise DimensionError("closed forms require a waiting area of 2 and capacity-limited admission")
    if not np.array_equal(params.preference_order, [[1, 2], [2, 1]]):
        raise DimensionError("closed forms require each type to prefer its own ward")
    c_sig = _uniform(params.assign_cost, np.ones((2, 2), bool), "assignment cost")
    off = ~np.eye(2, dtype=bool)
    c_t = _uniform(params.transfer_cost, np.stack([off, off], axis=2), "transfer cost")
    c_p = _uniform(params.penalty_cost, params.nonprimary_mask(), "penalty")
    if np.any(params.penalty_cost[~params.nonprimary_mask()] != 0):
        raise ValueError("closed forms require zero penalty in primary wards")
    if not params.include_assignment_cost:
        c_sig = 0.0

    pr = params.departure_probs
    p11, p12, p21, p22 = pr[0, 0], pr[0, 1], pr[1, 0], pr[1, 1]
    q11, q12, q21, q22 = 1 - p11, 1 - p12, 1 - p21, 1 - p22
    l1, l2 = params.arrival_rates
    lam = l1 + l2
    e = math.exp(-lam)
    two = 1 - e * (1 + lam)
    w1, w2 = (l1 / lam, l2 / lam) if lam > 0 else (0.0, 0.0)
    pvec = np.array([e, e * l1, e * l2, two * w1 * w1, two * 2 * w1 * w2, two * w2 * w2])
    wvec = np.array([e, (1 - e) * w1, (1 - e) * w2])

    def row(empty=1.0, blocks=(), single=None):
        r = np.zeros(22)
        r[0:6] = empty * pvec
        for start, coef in blocks:
            r[start - 1:start + 2] = coef * wvec
        if single is not None:
            r[single[0] - 1] = single[1]
        return r

    post_rows = {
        1: row(),
        7: row(p11, [(7, q11)]),
        16: row(p22, [(16, q22)]),
        19: row(p11 * p21, [(7, q11 * p21), (13, p11 * q21)], (19, q11 * q21)),
        21: row(p11 * p22, [(7, q11 * p22), (16, p11 * q22)], (21, q11 * q22)),
        22: row(p12 * p22, [(10, q12 * p22), (16, p12 * q22)], (22, q12 * q22)),
        10: row(p12, [(10, q12)]),
        20: row(p12 * p21, [(10, q12 * p21), (13, p12 * q21)], (20, q12 * q21)),
        13: row(p21, [(13, q21)]),
    }
    classes = {1: [1], 7: [2, 7], 16: [3, 16], 19: [4, 8, 14, 19], 21: [5, 9, 17, 21],
               22: [6, 12, 18, 22], 10: [10], 20: [11, 15, 20], 13: [13]}
    P1 = np.zeros((22, 22))
    for post, members in classes.items():
        for s in members:
            P1[s - 1] = post_rows[post]
    P2 = P1.copy()
    P2[10] = post_rows[21]
    P2[14] = post_rows[21]

    def ind(states):
        v = np.zeros(22)
        v[np.array(states) - 1] = 1.0
        return v

    assign = 2 * c_sig * ind([4, 5, 6]) + c_sig * ind([2, 3, 8, 9, 11, 12, 14, 15, 17, 18])
    pen = c_p * ind([4, 6, 8, 10, 12, 13, 14, 18, 19, 22])
    C1 = assign + pen + 2 * c_p * ind([11, 15, 20])
    C2 = assign + c_t * ind([11, 15]) + pen + 2 * c_p * ind([20])
    labels = [NoTransfer("a1"), BoundedTransfer(2, "a2", relocate=True)]
    return FiniteMdp(example1_states(), labels, np.stack([P1, P2]), np.stack([C1, C2]))


# -- policy iteration -------------------------------------------------------------


@dataclass
class ExactSolution:
    policy: np.ndarray  # label index per state
    gain: float
    bias: np.ndarray
    iterations: int
    gain_trace: list[float] = field(default_factory=list)
    residual: float = 0.0
    mdp: FiniteMdp | None = None

    def chosen_labels(self) -> list[DecisionLabel]:
        return [self.mdp.labels[a] for a in self.policy]

    def summary(self) -> str:
        lines = [f"gain: {self.gain:.4f}", f"gain_exact: {self.gain!r}", f"iterations: {self.iterations}",
                 f"bellman_residual: {self.residual:.3g}", "policy:"]
        if self.mdp is not None:
            for s, a in zip(self.mdp.states, self.policy):
                lines.append(f"  {state_name(s)}: {self.mdp.labels[a].name}")
        return "\n".join(lines)

    def bias_to_csv(self, path, header: Sequence[str] = ()):
        with open(path, "w", newline="") as fh:
            _header(fh, header)
            w = csv.writer(fh)
            w.writerow(["state", "label", "bias"])
            for j, (a, v) in enumerate(zip(self.policy, self.bias)):
                name = state_name(self.mdp.states[j]) if self.mdp else str(j)
                lab = self.mdp.labels[a].name if self.mdp else str(a)
                w.writerow([name, lab, repr(float(v))])


def evaluate_policy(P: np.ndarray, C: np.ndarray) -> tuple[float, np.ndarray]:
    """Gain and bias of a fixed stationary policy with the last bias pinned to 0."""
    S = C.size
    M = np.eye(S) - P
    M[:, S - 1] = 1.0  # column of the last bias becomes the gain column
    try:
        sol = np.linalg.solve(M, C)
    except np.linalg.LinAlgError as err:
        raise SingularPolicyError(np.array([]), str(err)) from err
    if not np.all(np.isfinite(sol)):
        raise SingularPolicyError(np.array([]))
    v = sol.copy()
    gain = float(sol[S - 1])
    v[S - 1] = 0.0
    return gain, v


def q_values(mdp: FiniteMdp, v: np.ndarray) -> np.ndarray:
    return mdp.C + mdp.P @ v


def policy_iteration(mdp: FiniteMdp, tol: float = 1e-12, max_iter: int = 1000) -> ExactSolution:
    """Howard's algorithm from the all-first-label policy.

    A state's action changes only when another label is better by more than
    ``tol`` (relative); among near-ties the lowest label index is chosen.
    """
    S = mdp.num_states
    rows = np.arange(S)
    policy = np.zeros(S, np.int64)
    trace = []
    for it in range(1, max_iter + 1):
        try:
            gain, v = evaluate_policy(mdp.P[policy, rows], mdp.C[policy, rows])
        except SingularPolicyError as err:
            raise SingularPolicyError(policy.copy()) from err
        trace.append(gain)
        Q = q_values(mdp, v)  # (L, S)
        best = Q.min(axis=0)
        slack = tol * np.maximum(1.0, np.abs(best))
        current = Q[policy, rows]
        candidate = np.argmax(Q <= best + slack, axis=0)
        improve = current > best + slack
        new = np.where(improve, candidate, policy)
        if np.array_equal(new, policy):
            residual = float(np.max(np.abs(best - gain - v)))
            return ExactSolution(policy, gain, v, it, trace, residual, mdp)
        policy = new
    raise RuntimeError(f"policy iteration did not converge in {max_iter} sweeps")
