"""Deterministic skeleton of the patient assignment MDP.

Indices are 0-based throughout: ``n[k, i]`` is the number of type-``i``
patients in ward ``k`` and ``q[i]`` the number of type-``i`` arrivals waiting
for a bed.  ``preference_order[i, k]`` is the 1-based rank of ward ``k`` for
type ``i``.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class ArrivalRegime(enum.Enum):
    UNRESTRICTED = "unrestricted"
    CAPACITY_LIMITED = "capacity_limited"


class DimensionError(ValueError):
    """Raised when arrays do not match the instance dimensions."""


class InstanceTooLargeError(RuntimeError):
    """Raised when an exact method is asked to enumerate too many states."""


class InfeasibleAssignmentError(RuntimeError):
    """Raised when a queued patient cannot be given any bed."""

    def __init__(self, patient_type: int, message: str | None = None):
        self.patient_type = patient_type
        super().__init__(message or f"no free bed for a queued type-{patient_type} patient")


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    capacities: np.ndarray
    arrival_rates: np.ndarray
    departure_probs: np.ndarray
    preference_order: np.ndarray
    assign_cost: np.ndarray
    transfer_cost: np.ndarray
    penalty_cost: np.ndarray
    waiting_capacity: int | None = None
    arrival_regime: ArrivalRegime = ArrivalRegime.CAPACITY_LIMITED
    include_assignment_cost: bool = True
    ward_names: tuple[str, ...] | None = None
    type_names: tuple[str, ...] | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        m = np.asarray(self.capacities)
        if m.ndim != 1 or m.size == 0:
            raise DimensionError("capacities must be a nonempty vector")
        K = m.size
        lam = np.asarray(self.arrival_rates, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise DimensionError("arrival_rates must be a nonempty vector")
        I = lam.size
        set_(self, "capacities", _frozen(m, np.int64))
        set_(self, "arrival_rates", _frozen(lam, float))
        shapes = {
            "departure_probs": (K, I),
            "preference_order": (I, K),
            "assign_cost": (K, I),
            "transfer_cost": (K, K, I),
            "penalty_cost": (K, I),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            dtype = np.int64 if name == "preference_order" else float
            if name == "transfer_cost":
                arr = np.array(arr, dtype=float)
                for k in range(K):
                    arr[k, k, :] = 0.0
            set_(self, name, _frozen(arr, dtype))
        if not isinstance(self.arrival_regime, ArrivalRegime):
            set_(self, "arrival_regime", ArrivalRegime(self.arrival_regime))
        for attr, size in (("ward_names", K), ("type_names", I)):
            names = getattr(self, attr)
            if names is not None:
                names = tuple(str(s) for s in names)
                if len(names) != size:
                    raise DimensionError(f"{attr} has {len(names)} entries, expected {size}")
                set_(self, attr, names)
        self._check_invariants()

    def _check_invariants(self):
        if np.any(self.capacities < 1):
            raise ValueError("every ward capacity must be at least 1")
        if np.any(self.arrival_rates < 0) or not np.all(np.isfinite(self.arrival_rates)):
            raise ValueError("arrival rates must be finite and nonnegative")
        p = self.departure_probs
        if np.any(p <= 0) or np.any(p > 1):
            raise ValueError("departure probabilities must lie in (0, 1]")
        expected = np.arange(1, self.num_wards + 1)
        for i, row in enumerate(self.preference_order):
            if not np.array_equal(np.sort(row), expected):
                raise ValueError(f"preference_order row {i} is not a permutation of 1..{self.num_wards}")
        for name in ("assign_cost", "transfer_cost", "penalty_cost"):
            arr = getattr(self, name)
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.waiting_capacity is not None and self.waiting_capacity < 0:
            raise ValueError("waiting_capacity must be nonnegative")

    @property
    def num_wards(self) -> int:
        return int(self.capacities.size)

    @property
    def num_types(self) -> int:
        return int(self.arrival_rates.size)

    @property
    def total_capacity(self) -> int:
        return int(self.capacities.sum())

    @property
    def total_rate(self) -> float:
        return float(self.arrival_rates.sum())

    @property
    def wards_by_rank(self) -> np.ndarray:
        """``wards_by_rank[i, r]`` is the ward of rank ``r + 1`` for type ``i``."""
        return np.argsort(self.preference_order, axis=1, kind="stable")

    @property
    def primary_ward(self) -> np.ndarray:
        return self.wards_by_rank[:, 0]

    def nonprimary_mask(self) -> np.ndarray:
        """Boolean K×I mask of (ward, type) cells outside the type's first choice."""
        mask = np.ones((self.num_wards, self.num_types), dtype=bool)
        mask[self.primary_ward, np.arange(self.num_types)] = False
        return mask

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        arrays = ("capacities", "arrival_rates", "departure_probs", "preference_order",
                  "assign_cost", "transfer_cost", "penalty_cost")
        scalars = ("waiting_capacity", "arrival_regime", "include_assignment_cost",
                   "ward_names", "type_names")
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays) and all(
            getattr(self, s) == getattr(other, s) for s in scalars
        )

    __hash__ = None


def penalty_matrix(preference_order, value: float, scope: str = "nonprimary") -> np.ndarray:
    """Build a K×I penalty matrix from a scalar.

    ``scope="nonprimary"`` charges only cells outside each type's rank-1 ward;
    ``scope="all"`` charges every occupied bed.
    """
    order = np.asarray(preference_order)
    I, K = order.shape
    pen = np.full((K, I), float(value))
    if scope == "nonprimary":
        pen[np.argmin(order, axis=1), np.arange(I)] = 0.0
    elif scope != "all":
        raise ValueError(f"unknown penalty scope {scope!r}")
    return pen


class _IntArrayValue:
    """Mixin giving immutable integer-array value types equality and hashing."""

    __slots__ = ()

    def key(self) -> tuple[int, ...]:
        raise NotImplementedError

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash((type(self).__name__, self.key()))


@dataclass(frozen=True, eq=False)
class State(_IntArrayValue):
    n: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        n = _frozen(self.n, np.int64)
        q = _frozen(self.q, np.int64)
        if n.ndim != 2 or q.ndim != 1 or n.shape[1] != q.size:
            raise DimensionError(f"inconsistent state shapes n{n.shape} q{q.shape}")
        if np.any(n < 0) or np.any(q < 0):
            raise ValueError("state counts must be nonnegative")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "q", q)

    @classmethod
    def empty(cls, params: ModelParams) -> State:
        return cls(np.zeros((params.num_wards, params.num_types), int), np.zeros(params.num_types, int))

    def key(self):
        return tuple(self.n.ravel().tolist()) + tuple(self.q.tolist())

    def __repr__(self):
        return f"State(n={self.n.tolist()}, q={self.q.tolist()})"


@dataclass(frozen=True, eq=False)
class PostDecisionState(_IntArrayValue):
    n: np.ndarray

    def __post_init__(self):
        n = _frozen(self.n, np.int64)
        if n.ndim != 2:
            raise DimensionError("post-decision occupancy must be K×I")
        object.__setattr__(self, "n", n)

    def key(self):
        return tuple(self.n.ravel().tolist())

    def __repr__(self):
        return f"PostDecisionState(n={self.n.tolist()})"


@dataclass(frozen=True, eq=False)
class Action(_IntArrayValue):
    """Assignments ``x[k, i]`` plus transfers keyed by ``(from_ward, to_ward, type)``.

    Same-ward transfers cannot be represented.
    """

    x: np.ndarray
    transfers: tuple[tuple[tuple[int, int, int], int], ...] = ()

    def __post_init__(self):
        x = _frozen(self.x, np.int64)
        if x.ndim != 2:
            raise DimensionError("assignment matrix must be K×I")
        merged: dict[tuple[int, int, int], int] = {}
        items = self.transfers.items() if isinstance(self.transfers, dict) else self.transfers
        for (k, l, i), count in items:
            k, l, i, count = int(k), int(l), int(i), int(count)
            if k == l:
                raise ValueError(f"same-ward transfer ({k}, {l}, {i}) is not a valid action")
            if count < 0:
                raise ValueError("transfer counts must be nonnegative")
            if count:
                merged[(k, l, i)] = merged.get((k, l, i), 0) + count
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "transfers", tuple(sorted(merged.items())))

    @classmethod
    def from_arrays(cls, x, y) -> Action:
        """Build from a dense K×K×I transfer array (the diagonal must be zero)."""
        y = np.asarray(y)
        items = [((k, l, i), int(y[k, l, i])) for k, l, i in zip(*np.nonzero(y))]
        return cls(x, tuple(items))

    def y_array(self) -> np.ndarray:
        K, I = self.x.shape
        y = np.zeros((K, K, I), dtype=np.int64)
        for (k, l, i), c in self.transfers:
            if k >= K or l >= K or i >= I:
                raise DimensionError(f"transfer index {(k, l, i)} out of range")
            y[k, l, i] = c
        return y

    @property
    def num_transfers(self) -> int:
        return sum(c for _, c in self.transfers)

    def key(self):
        return tuple(self.x.ravel().tolist()) + tuple((k, l, i, c) for (k, l, i), c in self.transfers)

    def describe(self, params: ModelParams | None = None) -> str:
        """One line per nonzero assignment or transfer, 1-based, for audit logs."""
        def ward(k):
            return params.ward_names[k] if params is not None and params.ward_names else f"ward{k + 1}"

        def ptype(i):
            return params.type_names[i] if params is not None and params.type_names else f"type{i + 1}"

        lines = [f"assign {c} {ptype(i)} -> {ward(k)}" for (k, i), c in np.ndenumerate(self.x) if c]
        lines += [f"transfer {c} {ptype(i)} {ward(k)} -> {ward(l)}" for (k, l, i), c in self.transfers]
        return "\n".join(lines)


@dataclass(frozen=True)
class NoTransfer:
    name: str = "a1"


@dataclass(frozen=True)
class BoundedTransfer:
    """Priority assignment allowing at most ``y_max`` transfers.

    With ``relocate`` set, an occupant blocking an arrival's preferred ward may
    also be moved into a free ward that ranks strictly better for them.
    """

    y_max: int
    name: str = ""
    relocate: bool = False

    def __post_init__(self):
        if self.y_max < 0:
            raise ValueError("y_max must be nonnegative")
        if not self.name:
            object.__setattr__(self, "name", f"y{self.y_max}")


DecisionLabel = NoTransfer | BoundedTransfer


@dataclass(frozen=True)
class Violation:
    constraint: str
    indices: tuple[int, ...]
    detail: str = ""


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def _check_dims(s: State, a: Action, params: ModelParams):
    shape = (params.num_wards, params.num_types)
    if s.n.shape != shape or s.q.shape != (params.num_types,):
        raise DimensionError(f"state shape n{s.n.shape} q{s.q.shape} does not match instance {shape}")
    if a.x.shape != shape:
        raise DimensionError(f"action shape {a.x.shape} does not match instance {shape}")
    for (k, l, i), _ in a.transfers:
        if k >= shape[0] or l >= shape[0] or i >= shape[1]:
            raise DimensionError(f"transfer index {(k, l, i)} out of range")


def validate_action(s: State, a: Action, params: ModelParams) -> ValidationResult:
    """Check the assignment (3), capacity (6), availability (7) and one-direction rules."""
    _check_dims(s, a, params)
    out = []
    assigned = a.x.sum(axis=0)
    for i in np.nonzero(assigned != s.q)[0]:
        out.append(Violation("assign_all", (int(i),), f"assigned {assigned[i]} of {s.q[i]} queued"))
    if np.any(a.x < 0):
        for k, i in zip(*np.nonzero(a.x < 0)):
            out.append(Violation("nonnegative", (int(k), int(i)), "negative assignment"))
    y = a.y_array()
    moved_out = y.sum(axis=1)
    for k, i in zip(*np.nonzero(moved_out > s.n)):
        out.append(Violation("available_transfer", (int(k), int(i)),
                             f"transfers {moved_out[k, i]} out of {s.n[k, i]} present"))
    K = params.num_wards
    for k, l in itertools.combinations(range(K), 2):
        for i in np.nonzero((y[k, l] > 0) & (y[l, k] > 0))[0]:
            out.append(Violation("one_direction", (k, l, int(i)), "transfers in both directions"))
    post = _post_occupancy(s, a, y)
    totals = post.sum(axis=1)
    for k in np.nonzero(totals > params.capacities)[0]:
        out.append(Violation("capacity", (int(k),), f"{totals[k]} patients in {params.capacities[k]} beds"))
    return ValidationResult(tuple(out))


def _post_occupancy(s: State, a: Action, y: np.ndarray | None = None) -> np.ndarray:
    if y is None:
        y = a.y_array()
    return s.n + a.x + y.sum(axis=0) - y.sum(axis=1)


def apply_action(s: State, a: Action) -> PostDecisionState:
    return PostDecisionState(_post_occupancy(s, a))


def action_cost(s: State, a: Action, params: ModelParams) -> float:
    """Immediate cost of assignments, transfers and the post-decision penalty.

    Each cost component is accumulated as integer counts per distinct
    coefficient before multiplying, so uniform coefficients give ``c * count``
    exactly.
    """
    _check_dims(s, a, params)
    post = _post_occupancy(s, a)
    total = 0.0
    if params.include_assignment_cost:
        total += _grouped_dot(a.x, params.assign_cost)
    total += _grouped_dot(a.y_array(), params.transfer_cost)
    total += _grouped_dot(post, params.penalty_cost)
    return total


def _grouped_dot(counts: np.ndarray, coef: np.ndarray) -> float:
    levels, inverse = np.unique(coef, return_inverse=True)
    sums = np.zeros(levels.size, dtype=np.int64)
    np.add.at(sums, inverse.ravel(), counts.ravel().astype(np.int64))
    out = 0.0
    for level, c in zip(levels, sums):
        if c:
            out += float(level) * int(c)
    return out


def nonprimary_census(n: np.ndarray, params: ModelParams) -> int:
    return int(np.asarray(n)[params.nonprimary_mask()].sum())


# -- state enumeration -------------------------------------------------------


def _compositions(total_max: int, parts: int) -> list[tuple[int, ...]]:
    """All nonnegative integer vectors of length ``parts`` with sum <= total_max, lex order."""
    return [c for c in itertools.product(range(total_max + 1), repeat=parts) if sum(c) <= total_max]


def _queue_limit(params: ModelParams) -> int:
    limits = []
    if params.waiting_capacity is not None:
        limits.append(params.waiting_capacity)
    if params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED:
        limits.append(params.total_capacity)
    if not limits:
        raise InstanceTooLargeError("unbounded waiting area: the state space is infinite")
    return min(limits)


def count_states(params: ModelParams) -> int:
    """Exact number of states :func:`enumerate_states` would emit."""
    I = params.num_types
    # occupancy-total distribution across wards
    dist = {0: 1}
    for mk in params.capacities:
        new: dict[int, int] = {}
        for t, c in dist.items():
            for g in range(int(mk) + 1):
                new[t + g] = new.get(t + g, 0) + c * math.comb(g + I - 1, I - 1)
        dist = new
    qmax = _queue_limit(params)
    joint = params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED
    total = 0
    for t, c in dist.items():
        limit = min(qmax, params.total_capacity - t) if joint else qmax
        # number of queue vectors with sum <= limit
        total += c * math.comb(limit + I, I)
    return total


def post_decision_state_count(params: ModelParams) -> int:
    I = params.num_types
    return math.prod(math.comb(int(mk) + I, I) for mk in params.capacities)


def enumerate_states(params: ModelParams, cap: int = 10**6) -> list[State]:
    """Every admissible state, in lexicographic order of the flattened ``(n, q)``.

    Under the capacity-limited regime the joint admission rule
    ``sum(n) + sum(q) <= sum(m)`` also applies.
    """
    count = count_states(params)
    if count > cap:
        raise InstanceTooLargeError(
            f"instance too large for exact enumeration: {count:.4g} states (cap {cap:.4g})"
        )
    return list(_iter_states(params))


def _iter_states(params: ModelParams) -> Iterator[State]:
    K, I = params.num_wards, params.num_types
    wards = [_compositions(int(mk), I) for mk in params.capacities]
    qmax = _queue_limit(params)
    queues = _compositions(qmax, I)
    joint = params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED
    for rows in itertools.product(*wards):
        occupied = sum(map(sum, rows))
        limit = min(qmax, params.total_capacity - occupied) if joint else qmax
        for q in queues:
            if sum(q) <= limit:
                yield State(np.array(rows, dtype=np.int64).reshape(K, I), np.array(q, dtype=np.int64))


def state_in_space(s: State, params: ModelParams) -> bool:
    if np.any(s.n.sum(axis=1) > params.capacities):
        return False
    if params.waiting_capacity is not None and s.q.sum() > params.waiting_capacity:
        return False
    if params.arrival_regime is ArrivalRegime.CAPACITY_LIMITED and s.n.sum() + s.q.sum() > params.total_capacity:
        return False
    return True


def as_state(n: Sequence, q: Sequence) -> State:
    return State(np.asarray(n), np.asarray(q))
