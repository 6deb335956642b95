"""Day-by-day simulation of the hospital under fixed, greedy or custom policies."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import _kernels as K_
from .adp import FeatureScheme, Weights
from .kernels import dynamics, raise_status
from .model import DecisionLabel, ModelParams, PostDecisionState, State, as_state
from .policies import label_arrays

DEFAULT_WARMUP = 100
# budget large enough that the shadow heuristic is never constrained
UNBOUNDED_BUDGET = 1 << 30


@dataclass(frozen=True)
class FixedPolicy:
    """Apply the same decision label every day."""

    label: DecisionLabel

    @property
    def name(self) -> str:
        return self.label.name

    @property
    def labels(self) -> tuple[DecisionLabel, ...]:
        return (self.label,)


@dataclass(frozen=True)
class GreedyPolicy:
    """Pick, each day, the label minimizing immediate cost plus expected next value."""

    weights: Weights
    scheme: FeatureScheme
    labels: tuple[DecisionLabel, ...]
    name: str = "near-optimal"

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels:
            raise ValueError("a greedy policy needs at least one label")


@dataclass(frozen=True)
class CustomPolicy:
    """Any ``State -> DecisionLabel`` callable; runs day by day in Python."""

    rule: Callable[[State], DecisionLabel]
    labels: tuple[DecisionLabel, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))


Policy = Union[FixedPolicy, GreedyPolicy, CustomPolicy]


@dataclass(frozen=True)
class DayRecord:
    day: int
    state: State
    label: str
    cost: float
    post: PostDecisionState
    departures: np.ndarray
    admitted: np.ndarray
    redirected: int
    census: int
    transfers: int
    extra_transfers: int


@dataclass
class DayTrace:
    """Per-day arrays of one replication; ``record(d)`` rebuilds a :class:`DayRecord`."""

    label_names: tuple[str, ...]
    label: np.ndarray
    cost: np.ndarray
    census: np.ndarray
    redirected: np.ndarray
    transfers: np.ndarray
    extra: np.ndarray
    occupancy: np.ndarray
    queue: np.ndarray
    post: np.ndarray
    departures: np.ndarray
    admitted: np.ndarray

    @classmethod
    def empty(cls, days: int, K: int, I: int, label_names) -> DayTrace:
        z = np.zeros
        return cls(tuple(label_names), z(days, np.int64), z(days), z(days, np.int64), z(days, np.int64),
                   z(days, np.int64), z(days, np.int64), z((days, K, I), np.int64), z((days, I), np.int64),
                   z((days, K, I), np.int64), z((days, K, I), np.int64), z((days, I), np.int64))

    @property
    def days(self) -> int:
        return self.cost.size

    def kernel_args(self):
        return (self.label, self.cost, self.census, self.redirected, self.transfers, self.extra,
                self.occupancy, self.queue, self.post, self.departures)

    def record(self, d: int) -> DayRecord:
        return DayRecord(
            day=d,
            state=as_state(self.occupancy[d], self.queue[d]),
            label=self.label_names[self.label[d]],
            cost=float(self.cost[d]),
            post=PostDecisionState(self.post[d].copy()),
            departures=self.departures[d].copy(),
            admitted=self.admitted[d].copy(),
            redirected=int(self.redirected[d]),
            census=int(self.census[d]),
            transfers=int(self.transfers[d]),
            extra_transfers=int(self.extra[d]),
        )


def _kernel_policy(policy: Policy, params: ModelParams):
    """``(label arrays, mode, theta, scheme code)`` for the compiled loop."""
    ymax, reloc = label_arrays(policy.labels)
    if isinstance(policy, GreedyPolicy):
        policy.scheme.check(params)
        policy.weights.check(params, policy.scheme)
        return ymax, reloc, 1, np.ascontiguousarray(policy.weights.theta), policy.scheme.code
    return ymax, reloc, 0, np.zeros(1), K_.FULL_STATE


def _run_kernel(n, q, days, D, policy, params, rng, trace: DayTrace, offset=0, fixed=0):
    ymax, reloc, mode, theta, scheme = _kernel_policy(policy, params)
    view = DayTrace(trace.label_names, *(a[offset:offset + days] for a in trace.kernel_args()),
                    trace.admitted[offset:offset + days])
    W = K_.make_work(D, ymax.size, theta.size)
    st, day = K_.simulate(n, q, days, D, W, ymax, reloc, mode, fixed, theta, scheme,
                          UNBOUNDED_BUDGET, False, rng, *view.kernel_args())
    if st < 0:
        raise_status(st, f"day {offset + day}")
    # the queue at the start of day d + 1 holds the arrivals admitted on day d
    if days > 1:
        view.admitted[:-1] = view.queue[1:]
    view.admitted[-1] = q


def _trajectory(params: ModelParams, policy: Policy, days: int, rng, D, start: State | None = None) -> tuple[DayTrace, State]:
    K, I = params.num_wards, params.num_types
    n = np.zeros((K, I), np.int64) if start is None else np.array(start.n, np.int64)
    q = np.zeros(I, np.int64) if start is None else np.array(start.q, np.int64)
    trace = DayTrace.empty(days, K, I, [lab.name for lab in policy.labels])
    if isinstance(policy, CustomPolicy):
        index = {id(lab): j for j, lab in enumerate(policy.labels)}
        for d in range(days):
            lab = policy.rule(as_state(n, q))
            if id(lab) not in index:
                matches = [j for j, known in enumerate(policy.labels) if known == lab]
                if not matches:
                    raise ValueError(f"custom policy returned {lab!r}, which is not among its labels")
                index[id(lab)] = matches[0]
            _run_kernel(n, q, 1, D, FixedPolicy(lab), params, rng, trace, offset=d)
            trace.label[d] = index[id(lab)]
    else:
        _run_kernel(n, q, days, D, policy, params, rng, trace)
    return trace, as_state(n, q)


def simulate_day(s: State, policy: Policy, params: ModelParams, rng: np.random.Generator) -> tuple[State, DayRecord]:
    """Decide, depart, arrive: one day from ``s``."""
    trace, nxt = _trajectory(params, policy, 1, rng, dynamics(params), start=s)
    return nxt, trace.record(0)


def replication_rng(base_seed: int, rep: int) -> np.random.Generator:
    """Independent stream for replication ``rep``; shared across policies for common random numbers."""
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(rep,)))


@dataclass
class SimReport:
    policy: str
    days: int
    warmup: int
    label_names: tuple[str, ...]
    cost: np.ndarray           # per-replication mean daily cost after warm-up
    census: np.ndarray         # per-replication mean nonprimary census
    redirected: np.ndarray     # per-replication mean redirected arrivals per day
    zero_extra: np.ndarray     # per-replication fraction of days needing no extra transfers
    transfers: np.ndarray      # per-replication mean transfers per day
    label_counts: np.ndarray   # (reps, labels) day counts after warm-up
    extra_hist: np.ndarray     # pooled histogram of extra transfers per day
    traces: list[DayTrace] | None = field(default=None, repr=False)

    @property
    def reps(self) -> int:
        return self.cost.size

    @property
    def mean_cost(self) -> float:
        return float(self.cost.mean())

    @property
    def mean_census(self) -> float:
        return float(self.census.mean())

    @property
    def mean_redirected(self) -> float:
        return float(self.redirected.mean())

    @property
    def zero_extra_fraction(self) -> float:
        return float(self.zero_extra.mean())

    @property
    def label_frequencies(self) -> dict[str, float]:
        tot = self.label_counts.sum(axis=0)
        return {name: float(c) / max(1, int(tot.sum())) for name, c in zip(self.label_names, tot)}

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "reps": self.reps,
            "mean_cost": self.mean_cost,
            "mean_nonprimary": self.mean_census,
            "mean_redirected": self.mean_redirected,
            "zero_extra_fraction": self.zero_extra_fraction,
            "mean_transfers": float(self.transfers.mean()),
        }

    def to_csv(self, path, header: Sequence[str] = ()):
        """One row per replication, then a ``mean`` row."""
        cols = ["rep", "cost", "nonprimary", "redirected", "zero_extra_fraction", "transfers"]
        cols += [f"days_{name}" for name in self.label_names]
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for r in range(self.reps):
                w.writerow([r, repr(float(self.cost[r])), repr(float(self.census[r])), repr(float(self.redirected[r])),
                            repr(float(self.zero_extra[r])), repr(float(self.transfers[r]))]
                           + [int(c) for c in self.label_counts[r]])
            w.writerow(["mean", repr(self.mean_cost), repr(self.mean_census), repr(self.mean_redirected),
                        repr(self.zero_extra_fraction), repr(float(self.transfers.mean()))]
                       + [repr(float(c)) for c in self.label_counts.mean(axis=0)])

    def days_to_csv(self, path, header: Sequence[str] = ()):
        """Long format: one row per (replication, day); needs ``keep_days``."""
        if self.traces is None:
            raise ValueError("per-day records were not kept; rerun with keep_days=True")
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["rep", "day", "label", "cost", "nonprimary", "redirected", "transfers", "extra_transfers",
                        "occupied", "queued", "admitted"])
            for r, t in enumerate(self.traces):
                occ = t.occupancy.sum(axis=(1, 2))
                que = t.queue.sum(axis=1)
                adm = t.admitted.sum(axis=1)
                for d in range(t.days):
                    w.writerow([r, d, t.label_names[t.label[d]], repr(float(t.cost[d])), int(t.census[d]),
                                int(t.redirected[d]), int(t.transfers[d]), int(t.extra[d]),
                                int(occ[d]), int(que[d]), int(adm[d])])


def _rep_stats(t: DayTrace, warmup: int, num_labels: int):
    w = slice(warmup, None)
    return (t.cost[w].mean(), t.census[w].mean(), t.redirected[w].mean(), (t.extra[w] == 0).mean(),
            t.transfers[w].mean(), np.bincount(t.label[w], minlength=num_labels), np.bincount(t.extra[w]))


def run_replications(params: ModelParams, policy: Policy, days: int, reps: int, base_seed: int,
                     warmup: int = DEFAULT_WARMUP, threads: int = 1, keep_days: bool | int = False) -> SimReport:
    """``reps`` independent runs of ``days`` days from the empty hospital.

    Means exclude the first ``warmup`` days.  Replication ``r`` always uses
    :func:`replication_rng` ``(base_seed, r)``.  ``keep_days`` retains the
    per-day traces: ``True`` for all replications, an integer for that many
    leading ones.
    """
    if days < 1 or reps < 1:
        raise ValueError("days and reps must both be at least 1")
    if not 0 <= warmup < days:
        raise ValueError(f"warmup={warmup} must be below days={days}")
    D = dynamics(params)
    L = len(policy.labels)
    keep = reps if keep_days is True else int(keep_days)

    def one(r):
        t = _trajectory(params, policy, days, replication_rng(base_seed, r), D)[0]
        return _rep_stats(t, warmup, L), (t if r < keep else None)

    if threads > 1 and reps > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, range(reps)))
    else:
        out = [one(r) for r in range(reps)]
    stats = [o[0] for o in out]
    width = max(st[6].size for st in stats)
    hist = np.zeros(width, np.int64)
    for st in stats:
        hist[:st[6].size] += st[6]
    return SimReport(
        policy=policy.name,
        days=days,
        warmup=warmup,
        label_names=tuple(lab.name for lab in policy.labels),
        cost=np.array([st[0] for st in stats]),
        census=np.array([st[1] for st in stats]),
        redirected=np.array([st[2] for st in stats]),
        zero_extra=np.array([st[3] for st in stats]),
        transfers=np.array([st[4] for st in stats]),
        label_counts=np.array([st[5] for st in stats]),
        extra_hist=hist,
        traces=[o[1] for o in out[:keep]] if keep else None,
    )


@dataclass
class Comparison:
    reports: list[SimReport]

    def table(self) -> str:
        """Fixed-width table with the mean cost, nonprimary census and redirections per policy."""
        head = f"{'policy':<16}{'mean cost':>12}{'nonprimary':>12}{'redirected':>12}{'no extra':>10}"
        lines = [head, "-" * len(head)]
        for r in self.reports:
            lines.append(f"{r.policy:<16}{r.mean_cost:>12.4f}{r.mean_census:>12.4f}{r.mean_redirected:>12.4f}"
                         f"{r.zero_extra_fraction:>10.4f}")
        return "\n".join(lines)

    def to_csv(self, path, header: Sequence[str] = ()):
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["policy", "reps", "mean_cost", "mean_nonprimary", "mean_redirected",
                        "zero_extra_fraction", "mean_transfers", "label_frequencies"])
            for r in self.reports:
                s = r.summary()
                freqs = ";".join(f"{k}={v:.6f}" for k, v in r.label_frequencies.items())
                w.writerow([s["policy"], s["reps"], repr(s["mean_cost"]), repr(s["mean_nonprimary"]),
                            repr(s["mean_redirected"]), repr(s["zero_extra_fraction"]),
                            repr(s["mean_transfers"]), freqs])

    def histograms_to_csv(self, path, header: Sequence[str] = ()):
        """Extra transfers per day, pooled over replications, one column per policy."""
        width = max(r.extra_hist.size for r in self.reports)
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["extra_transfers"] + [r.policy for r in self.reports])
            for j in range(width):
                w.writerow([j] + [int(r.extra_hist[j]) if j < r.extra_hist.size else 0 for r in self.reports])


def compare_policies(params: ModelParams, policies: Sequence[Policy], days: int, reps: int, base_seed: int,
                     warmup: int = DEFAULT_WARMUP, threads: int = 1) -> Comparison:
    """Run every policy on the same replication streams."""
    if len(policies) < 2:
        raise ValueError("comparison needs at least two policies")
    return Comparison([run_replications(params, p, days, reps, base_seed, warmup, threads) for p in policies])
