"""Approximate policy iteration with linear value functions fitted by LSTD."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K_
from .kernels import dynamics, raise_status
from .model import DecisionLabel, DimensionError, InfeasibleAssignmentError, ModelParams, State
from .policies import label_arrays

DEFAULT_BURN_IN = 100
COND_LIMIT = 1e12


class FeatureScheme(enum.Enum):
    FULL_STATE = "full_state"
    PRIMARY_OTHER_QUEUE = "primary_other_queue"

    @property
    def code(self) -> int:
        return K_.FULL_STATE if self is FeatureScheme.FULL_STATE else K_.PRIMARY_OTHER_QUEUE

    def dimension(self, num_wards: int, num_types: int) -> int:
        if self is FeatureScheme.FULL_STATE:
            return num_wards * num_types + num_types
        return 2 * num_wards + num_types

    def check(self, params: ModelParams):
        if self is FeatureScheme.PRIMARY_OTHER_QUEUE and params.num_wards != params.num_types:
            raise DimensionError("primary/other features need one ward per patient type")
        if self is FeatureScheme.PRIMARY_OTHER_QUEUE and not np.array_equal(
            params.primary_ward, np.arange(params.num_types)
        ):
            raise DimensionError("primary/other features need ward k to be the first choice of type k")


@dataclass(frozen=True)
class Weights:
    theta: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        t = np.array(self.theta, dtype=np.float64)
        if t.ndim != 1:
            raise DimensionError("weights must be a vector")
        if not np.all(np.isfinite(t)):
            raise ValueError("weights contain NaN or infinite entries")
        t.setflags(write=False)
        object.__setattr__(self, "theta", t)

    def check(self, params: ModelParams, scheme: FeatureScheme):
        F = scheme.dimension(params.num_wards, params.num_types)
        if self.theta.size != F:
            raise DimensionError(f"{self.theta.size} weights given, the {scheme.value} scheme needs {F}")

    def save(self, path, header: Sequence[str] = (), scheme: FeatureScheme | None = None):
        with open(path, "w") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            if scheme is not None:
                fh.write(f"# scheme: {scheme.value}\n")
            fh.write(f"# iteration: {self.iteration}\n")
            for v in self.theta:
                fh.write(f"{float(v)!r}\n")

    @classmethod
    def load(cls, path) -> tuple[Weights, FeatureScheme | None]:
        scheme = None
        it = 0
        vals = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line[1:].partition(":")
                    if key.strip() == "scheme":
                        scheme = FeatureScheme(val.strip())
                    elif key.strip() == "iteration":
                        it = int(val)
                    continue
                vals.append(float(line))
        return cls(np.array(vals), it), scheme


def feature_map(s: State, scheme: FeatureScheme) -> np.ndarray:
    n, q = s.n, s.q
    if scheme is FeatureScheme.FULL_STATE:
        return np.concatenate([n.ravel(), q]).astype(np.float64)
    K, I = n.shape
    if K != I:
        raise DimensionError("primary/other features need one ward per patient type")
    own = np.diag(n)
    other = n.sum(axis=1) - own
    return np.concatenate([np.stack([own, other], axis=1).ravel(), q]).astype(np.float64)


def _theta(theta) -> np.ndarray:
    t = theta.theta if isinstance(theta, Weights) else theta
    return np.ascontiguousarray(t, dtype=np.float64)


def expected_next_value(post, theta, params: ModelParams, scheme: FeatureScheme) -> float:
    """Expectation of ``phi(next state) . theta`` from a post-decision occupancy."""
    na = np.ascontiguousarray(getattr(post, "n", post), dtype=np.int64)
    th = _theta(theta)
    Weights(th).check(params, scheme)
    D = dynamics(params)
    return float(K_.expected_next_value(na, th, scheme.code, D, K_.make_work(D)))


@dataclass
class _Compiled:
    D: K_.Dynamics
    W: K_.Work
    ymax: np.ndarray
    reloc: np.ndarray
    K: int
    I: int

    @classmethod
    def of(cls, params: ModelParams, labels: Sequence[DecisionLabel], num_features: int = 1) -> _Compiled:
        ymax, reloc = label_arrays(labels)
        D = dynamics(params)
        return cls(D, K_.make_work(D, len(labels), num_features), ymax, reloc, params.num_wards, params.num_types)


def greedy_index(s: State, theta, params: ModelParams, labels: Sequence[DecisionLabel],
                 scheme: FeatureScheme = FeatureScheme.FULL_STATE) -> int:
    th = _theta(theta)
    Weights(th).check(params, scheme)
    c = _Compiled.of(params, labels)
    lab, _, _, st = K_.decide(np.ascontiguousarray(s.n, np.int64), np.ascontiguousarray(s.q, np.int64), c.D, c.W,
                              c.ymax, c.reloc, 1, 0, th, scheme.code)
    raise_status(st, f"state {s!r}")
    return int(lab)


def greedy_decision(s: State, theta, params: ModelParams, labels: Sequence[DecisionLabel],
                    scheme: FeatureScheme = FeatureScheme.FULL_STATE) -> DecisionLabel:
    """Label minimizing immediate cost plus expected next value; lowest index on ties."""
    return labels[greedy_index(s, theta, params, labels, scheme)]


def _start(c: _Compiled, th, scheme, rng, burn_in, start: State | None):
    if start is not None:
        return np.array(start.n, np.int64), np.array(start.q, np.int64)
    n = np.zeros((c.K, c.I), np.int64)
    q = np.zeros(c.I, np.int64)
    st = K_.burn_in(burn_in, c.D, c.W, c.ymax, c.reloc, 1, 0, th, scheme.code, rng, n, q)
    raise_status(st, "burn-in")
    return n, q


def estimate_gain(theta, steps: int, params: ModelParams, scheme: FeatureScheme,
                  labels: Sequence[DecisionLabel], rng: np.random.Generator,
                  burn_in: int = DEFAULT_BURN_IN, start: State | None = None) -> float:
    """Average cost of the greedy policy over ``steps`` days.

    The start is drawn by running ``burn_in`` days from the empty hospital
    under the same policy, unless ``start`` is given.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    th = _theta(theta)
    Weights(th).check(params, scheme)
    c = _Compiled.of(params, labels)
    n, q = _start(c, th, scheme, rng, burn_in, start)
    mean, st = K_.average_cost(steps, c.D, c.W, c.ymax, c.reloc, th, scheme.code, rng, n, q)
    raise_status(st, "gain estimation")
    return float(mean)


@dataclass
class SolveDiagnostics:
    condition: float
    ridge: float
    method: str

    def __str__(self):
        return f"cond={self.condition:.3g} ridge={self.ridge:.3g} method={self.method}"


def solve_lstd(A: np.ndarray, b: np.ndarray, cond_limit: float = COND_LIMIT) -> tuple[np.ndarray, SolveDiagnostics]:
    """Solve ``A theta = b``; ill-conditioned systems get a small ridge."""
    F = b.size
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(A)) if np.all(np.isfinite(A)) else np.inf
    if np.isfinite(cond) and cond < cond_limit:
        return np.linalg.solve(A, b), SolveDiagnostics(cond, 0.0, "lu")
    ridge = 1e-8 * float(np.trace(A)) / F
    if ridge > 0:
        try:
            theta = np.linalg.solve(A + ridge * np.eye(F), b)
            if np.all(np.isfinite(theta)):
                return theta, SolveDiagnostics(cond, ridge, "ridge")
        except np.linalg.LinAlgError:
            pass
    theta = np.linalg.lstsq(A, b, rcond=None)[0]
    return theta, SolveDiagnostics(cond, ridge, "lstsq")


def lstd_from_trajectory(phis: np.ndarray, costs: np.ndarray, gain: float) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` from features ``phis[0..M]`` and costs ``costs[0..M-1]`` of one path."""
    M = costs.size
    cur, nxt = phis[:-1], phis[1:]
    A = cur.T @ (cur - nxt) / M
    b = cur.T @ (costs - gain) / M
    return A, b


def lstd_system(theta, gain: float, steps: int, params: ModelParams, scheme: FeatureScheme,
                labels: Sequence[DecisionLabel], rng: np.random.Generator,
                burn_in: int = DEFAULT_BURN_IN, start: State | None = None):
    """Accumulate ``(A, b)`` along a greedy trajectory; also returns its mean cost."""
    th = _theta(theta)
    Weights(th).check(params, scheme)
    F = th.size
    c = _Compiled.of(params, labels, F)
    n, q = _start(c, th, scheme, rng, burn_in, start)
    A = np.zeros((F, F))
    b = np.zeros(F)
    mean, st = K_.lstd_accumulate(steps, c.D, c.W, c.ymax, c.reloc, th, scheme.code, float(gain), rng, n, q, A, b)
    raise_status(st, "LSTD sweep")
    return A, b, float(mean)


def lstd_sweep(theta, gain: float, steps: int, params: ModelParams, scheme: FeatureScheme,
               labels: Sequence[DecisionLabel], rng: np.random.Generator,
               burn_in: int = DEFAULT_BURN_IN) -> tuple[Weights, SolveDiagnostics]:
    """One policy-evaluation sweep: fit new weights to the greedy policy of ``theta``."""
    F = scheme.dimension(params.num_wards, params.num_types)
    if steps < F:
        raise ValueError(f"steps={steps} is below the feature count {F}; the system would be rank-deficient")
    A, b, _ = lstd_system(theta, gain, steps, params, scheme, labels, rng, burn_in)
    new, diag = solve_lstd(A, b)
    it = theta.iteration + 1 if isinstance(theta, Weights) else 1
    return Weights(new, it), diag


@dataclass
class TrainReport:
    scheme: FeatureScheme
    thetas: list[np.ndarray] = field(default_factory=list)
    gains: list[float] = field(default_factory=list)
    diagnostics: list[SolveDiagnostics] = field(default_factory=list)

    @property
    def final(self) -> Weights:
        return Weights(self.thetas[-1], len(self.thetas) - 1)

    def to_csv(self, path, header: Sequence[str] = ()):
        F = self.thetas[0].size
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"theta_{j}" for j in range(F)] + ["gain", "condition", "ridge", "method"])
            for it, (th, g) in enumerate(zip(self.thetas, self.gains)):
                d = self.diagnostics[it - 1] if it > 0 else None
                extra = [repr(d.condition), repr(d.ridge), d.method] if d else ["", "", ""]
                w.writerow([it] + [repr(float(v)) for v in th] + [repr(float(g))] + extra)


def initial_weights(params: ModelParams, scheme: FeatureScheme, value: float = 1e-4) -> Weights:
    return Weights(np.full(scheme.dimension(params.num_wards, params.num_types), value))


def train(params: ModelParams, scheme: FeatureScheme, labels: Sequence[DecisionLabel], theta0, iterations: int,
          steps: int, rng: np.random.Generator, burn_in: int = DEFAULT_BURN_IN,
          gain_steps: int | None = None, progress=None) -> TrainReport:
    """Alternate gain estimation and LSTD sweeps, ``iterations`` times."""
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    scheme.check(params)
    theta = theta0 if isinstance(theta0, Weights) else Weights(theta0)
    theta.check(params, scheme)
    gain_steps = steps if gain_steps is None else gain_steps
    report = TrainReport(scheme)
    gain = estimate_gain(theta, gain_steps, params, scheme, labels, rng, burn_in)
    report.thetas.append(theta.theta.copy())
    report.gains.append(gain)
    for it in range(1, iterations + 1):
        try:
            theta, diag = lstd_sweep(theta, gain, steps, params, scheme, labels, rng, burn_in)
            gain = estimate_gain(theta, gain_steps, params, scheme, labels, rng, burn_in)
        except InfeasibleAssignmentError as err:
            raise InfeasibleAssignmentError(err.patient_type, f"iteration {it}: {err}") from err
        report.thetas.append(theta.theta.copy())
        report.gains.append(gain)
        report.diagnostics.append(diag)
        if progress is not None:
            progress(it, gain, diag)
    return report
