"""Turning decision labels into concrete assignment and transfer actions."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels as K_
from .kernels import dynamics, raise_status
from .model import Action, BoundedTransfer, DecisionLabel, ModelParams, NoTransfer, State


def _run(s: State, params: ModelParams, y_max: int, relocate: bool) -> Action:
    K, I = params.num_wards, params.num_types
    n = np.ascontiguousarray(s.n, dtype=np.int64)
    q = np.ascontiguousarray(s.q, dtype=np.int64)
    x = np.zeros((K, I), np.int64)
    y = np.zeros((K, K, I), np.int64)
    na = np.zeros((K, I), np.int64)
    D = dynamics(params)
    status = K_.realize(n, q, D, K_.make_work(D), int(y_max), bool(relocate), x, y, na)
    raise_status(status, f"state {s!r}")
    return Action.from_arrays(x, y)


def assign_no_transfer(s: State, params: ModelParams) -> Action:
    """Each queued patient, by type index, goes to their best ward with a free bed."""
    return _run(s, params, -1, False)


def assign_with_transfers(s: State, params: ModelParams, y_max: int, relocate: bool = False) -> Action:
    """Priority assignment that may displace up to ``y_max`` lower-priority occupants.

    A displaced occupant is always outside their own first-choice ward and of a
    higher type index than the arrival taking the bed; it is moved to the
    cheapest ward with space once its own type is processed.  ``relocate``
    enables the extra move described on :class:`BoundedTransfer`.
    """
    if y_max < 0:
        raise ValueError("y_max must be nonnegative")
    return _run(s, params, y_max, relocate)


def realize(label: DecisionLabel, s: State, params: ModelParams) -> Action:
    if isinstance(label, NoTransfer):
        return assign_no_transfer(s, params)
    if isinstance(label, BoundedTransfer):
        return assign_with_transfers(s, params, label.y_max, label.relocate)
    raise TypeError(f"unknown decision label {label!r}")


def label_arrays(labels: Sequence[DecisionLabel]) -> tuple[np.ndarray, np.ndarray]:
    """Encode labels for the kernels: ``(y_max or -1, relocate flag)``."""
    if not labels:
        raise ValueError("at least one decision label is required")
    ymax = np.empty(len(labels), np.int64)
    reloc = np.zeros(len(labels), np.bool_)
    for j, lab in enumerate(labels):
        if isinstance(lab, NoTransfer):
            ymax[j] = -1
        elif isinstance(lab, BoundedTransfer):
            ymax[j] = lab.y_max
            reloc[j] = lab.relocate
        else:
            raise TypeError(f"unknown decision label {lab!r}")
    return ymax, reloc


STANDARD_LABELS = (NoTransfer("a1"), BoundedTransfer(4, "a2"), BoundedTransfer(10, "a3"))
