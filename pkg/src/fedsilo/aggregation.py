"""Server-side aggregation strategies.

Five synchronous strategies (FedAvg, FedAvgM, FedAdagrad, FedAdam,
FedYogi) and two asynchronous ones (FedAsync, FedBuff), all written as
pure functions from (state, updates) to a fresh state. The orchestrator
owns the single mutable state per experiment and serializes calls; the
functions themselves never mutate their inputs.

The common primitive is the pseudo-gradient: the sample-count-weighted
mean of (client weights - current global). With a server learning rate
of 1 and no momentum this reduces exactly to FedAvg, which keeps the
whole family coherent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AlgorithmArityMismatch,
    EmptyUpdateSet,
    LayoutMismatch,
    NegativeStaleness,
)
from .params import ParameterVector, weighted_mean


class Algorithm(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDAVGM = "fedavgm"
    FEDADAGRAD = "fedadagrad"
    FEDADAM = "fedadam"
    FEDYOGI = "fedyogi"
    FEDASYNC = "fedasync"
    FEDBUFF = "fedbuff"

    @property
    def is_async(self) -> bool:
        return self in (Algorithm.FEDASYNC, Algorithm.FEDBUFF)


SYNC_ALGORITHMS = tuple(a for a in Algorithm if not a.is_async)
ASYNC_ALGORITHMS = tuple(a for a in Algorithm if a.is_async)

_ADAPTIVE_VARIANTS = {
    Algorithm.FEDADAGRAD: "adagrad",
    Algorithm.FEDADAM: "adam",
    Algorithm.FEDYOGI: "yogi",
}


@dataclass(frozen=True)
class TrainingMetrics:
    """Loss/accuracy/wall-time triple reported with every client result."""

    loss: float
    accuracy: float
    train_seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.train_seconds < 0:
            raise ValueError("train_seconds must be non-negative")

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "accuracy": self.accuracy,
            "train_seconds": self.train_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingMetrics":
        return cls(
            loss=float(d["loss"]),
            accuracy=float(d["accuracy"]),
            train_seconds=float(d.get("train_seconds", 0.0)),
        )


@dataclass(frozen=True)
class ClientUpdate:
    """One client's post-training weights plus bookkeeping."""

    endpoint_id: str
    base_round: int
    weights: ParameterVector
    sample_count: int
    metrics: TrainingMetrics

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.base_round < 0:
            raise ValueError("base_round must be non-negative")


@dataclass(frozen=True)
class AggregatorHyper:
    """Server-side hyper-parameters; defaults apply when config omits a field."""

    server_lr: float = 1.0
    server_momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    adaptivity: float = 1e-3
    async_alpha: float = 0.9
    staleness_exponent: float = 0.5
    buffer_size: int = 3

    def __post_init__(self):
        checks = {
            "server_lr": self.server_lr > 0,
            "server_momentum": 0.0 <= self.server_momentum < 1.0,
            "beta1": 0.0 <= self.beta1 < 1.0,
            "beta2": 0.0 <= self.beta2 < 1.0,
            "adaptivity": self.adaptivity > 0,
            "async_alpha": 0.0 < self.async_alpha <= 1.0,
            "staleness_exponent": self.staleness_exponent >= 0,
            "buffer_size": self.buffer_size >= 1,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"hyper-parameters out of range: {', '.join(bad)}")

    def to_dict(self) -> dict:
        return {
            "server_lr": self.server_lr,
            "server_momentum": self.server_momentum,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adaptivity": self.adaptivity,
            "async_alpha": self.async_alpha,
            "staleness_exponent": self.staleness_exponent,
            "buffer_size": self.buffer_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregatorHyper":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        if "buffer_size" in known:
            known["buffer_size"] = int(known["buffer_size"])
        return cls(**known)


@dataclass(frozen=True)
class AggregatorState:
    """Per-experiment server state; advanced only through the step functions.

    ``buffer`` holds FedBuff's pending updates together with the deltas
    recorded against the global model at the moment each was buffered.
    """

    algorithm: Algorithm
    global_model: ParameterVector
    round: int = 0
    momentum: Optional[ParameterVector] = None
    second_moment: Optional[ParameterVector] = None
    buffer: tuple[ClientUpdate, ...] = ()
    buffer_deltas: tuple[ParameterVector, ...] = ()
    hyper: AggregatorHyper = field(default_factory=AggregatorHyper)

    def __post_init__(self):
        for name in ("momentum", "second_moment"):
            v = getattr(self, name)
            if v is not None and v.layout != self.global_model.layout:
                raise LayoutMismatch(f"{name} layout differs from global model")


def _check_updates(state: AggregatorState, updates: Sequence[ClientUpdate]) -> None:
    if not updates:
        raise EmptyUpdateSet("aggregation requires at least one client update")
    for u in updates:
        if u.weights.layout != state.global_model.layout:
            raise LayoutMismatch(f"update from {u.endpoint_id} has a different layout")


def pseudo_gradient(state: AggregatorState, updates: Sequence[ClientUpdate]) -> ParameterVector:
    """Sample-count-weighted mean of client deltas against the current global."""
    _check_updates(state, updates)
    deltas = [
        ParameterVector(state.global_model.layout, u.weights.values - state.global_model.values)
        for u in updates
    ]
    return weighted_mean(deltas, [u.sample_count for u in updates])


def step_fedavg(state: AggregatorState, updates: Sequence[ClientUpdate]) -> AggregatorState:
    """Classic federated averaging: the global becomes the weighted client mean."""
    _check_updates(state, updates)
    new_global = weighted_mean([u.weights for u in updates], [u.sample_count for u in updates])
    return replace(state, global_model=new_global, round=state.round + 1)


def step_fedavgm(state: AggregatorState, updates: Sequence[ClientUpdate]) -> AggregatorState:
    """Heavy-ball server momentum: m <- beta*m + delta, global += lr*m."""
    delta = pseudo_gradient(state, updates)
    m0 = (
        state.momentum
        if state.momentum is not None
        else ParameterVector.zeros(state.global_model.layout)
    )
    h = state.hyper
    m = ParameterVector(m0.layout, h.server_momentum * m0.values + delta.values)
    new_global = ParameterVector(
        state.global_model.layout, state.global_model.values + h.server_lr * m.values
    )
    return replace(state, global_model=new_global, momentum=m, round=state.round + 1)


def step_fedadaptive(
    state: AggregatorState, updates: Sequence[ClientUpdate], variant: str
) -> AggregatorState:
    """Adaptive server optimizers (adagrad, adam, yogi) on the pseudo-gradient.

    First-moment m and second-moment v accumulate the delta; the global
    moves by lr * m / (sqrt(v) + tau). On first use m starts at zeros and
    v at tau^2.
    """
    if variant not in ("adagrad", "adam", "yogi"):
        raise ValueError(f"unknown adaptive variant {variant!r}")
    delta = pseudo_gradient(state, updates)
    h = state.hyper
    layout = state.global_model.layout
    m0 = state.momentum if state.momentum is not None else ParameterVector.zeros(layout)
    v0 = (
        state.second_moment
        if state.second_moment is not None
        else ParameterVector(layout, np.full(layout.total_len, h.adaptivity**2))
    )

    d = delta.values
    m = h.beta1 * m0.values + (1.0 - h.beta1) * d
    d2 = d * d
    if variant == "adagrad":
        v = v0.values + d2
    elif variant == "adam":
        v = h.beta2 * v0.values + (1.0 - h.beta2) * d2
    else:  # yogi
        v = v0.values - (1.0 - h.beta2) * d2 * np.sign(v0.values - d2)

    new_global = state.global_model.values + h.server_lr * m / (np.sqrt(v) + h.adaptivity)
    return replace(
        state,
        global_model=ParameterVector(layout, new_global),
        momentum=ParameterVector(layout, m),
        second_moment=ParameterVector(layout, v),
        round=state.round + 1,
    )


def _staleness(state: AggregatorState, update: ClientUpdate) -> int:
    s = state.round - update.base_round
    if s < 0:
        raise NegativeStaleness(
            f"update base_round {update.base_round} is ahead of server round {state.round}"
        )
    return s


def step_fedasync(state: AggregatorState, update: ClientUpdate) -> AggregatorState:
    """Staleness-discounted mixing of a single client's weights.

    alpha_s = alpha * (s + 1)^(-a) with polynomial discount; the global
    becomes the convex combination (1 - alpha_s)*global + alpha_s*client.
    """
    _check_updates(state, [update])
    s = _staleness(state, update)
    h = state.hyper
    alpha_s = h.async_alpha * (s + 1) ** (-h.staleness_exponent)
    mixed = (1.0 - alpha_s) * state.global_model.values + alpha_s * update.weights.values
    return replace(
        state,
        global_model=ParameterVector(state.global_model.layout, mixed),
        round=state.round + 1,
    )


def step_fedbuff(
    state: AggregatorState, update: ClientUpdate
) -> tuple[AggregatorState, bool]:
    """Buffered async aggregation: emit once K updates have been buffered.

    Each update's delta is recorded against the global model at the
    moment it is buffered; the emission applies the unweighted mean of
    the recorded deltas scaled by the server learning rate.
    """
    _check_updates(state, [update])
    _staleness(state, update)
    delta = ParameterVector(
        state.global_model.layout, update.weights.values - state.global_model.values
    )
    buffer = state.buffer + (update,)
    deltas = state.buffer_deltas + (delta,)
    if len(buffer) < state.hyper.buffer_size:
        return replace(state, buffer=buffer, buffer_deltas=deltas), False
    mean_delta = np.mean([d.values for d in deltas], axis=0)
    new_global = state.global_model.values + state.hyper.server_lr * mean_delta
    emitted = replace(
        state,
        global_model=ParameterVector(state.global_model.layout, new_global),
        buffer=(),
        buffer_deltas=(),
        round=state.round + 1,
    )
    return emitted, True


def aggregate(state: AggregatorState, updates: Sequence[ClientUpdate]) -> AggregatorState:
    """Dispatch to the matching step function, validating update arity."""
    algo = state.algorithm
    if algo.is_async:
        if len(updates) != 1:
            raise AlgorithmArityMismatch(
                f"{algo.value} takes exactly one update, got {len(updates)}"
            )
        if algo is Algorithm.FEDASYNC:
            return step_fedasync(state, updates[0])
        return step_fedbuff(state, updates[0])[0]
    if not updates:
        raise AlgorithmArityMismatch(f"{algo.value} requires a non-empty update set")
    if algo is Algorithm.FEDAVG:
        return step_fedavg(state, updates)
    if algo is Algorithm.FEDAVGM:
        return step_fedavgm(state, updates)
    return step_fedadaptive(state, updates, _ADAPTIVE_VARIANTS[algo])
