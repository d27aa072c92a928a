"""Client-side local training and evaluation.

Plain mini-batch SGD with deterministic shuffling: given identical
inputs and seed, two runs on one machine produce bit-identical weights.
The reported loss and accuracy describe the final epoch, computed from
each batch's pre-step logits, so lr=0 still yields meaningful metrics.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .aggregation import TrainingMetrics
from .data import LocalDataset
from .errors import NonFiniteLoss
from .models import ModelSpec, forward, loss_and_grad, _loss_and_dlogits
from .params import ParameterVector


def local_train(
    model: ParameterVector,
    spec: ModelSpec,
    data: LocalDataset,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    loss: str = "cross_entropy",
) -> tuple[ParameterVector, TrainingMetrics]:
    """Run SGD for the given epochs over the train split."""
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    x, y = data.split("train")
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    weights = model.values.copy()
    start = time.perf_counter()

    epoch_loss = 0.0
    epoch_correct = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            xb, yb = x[idx], y[idx]
            value, grad, logits = loss_and_grad(
                spec, ParameterVector(model.layout, weights), xb, yb, loss
            )
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss diverged to {value} in epoch {epoch + 1}")
            weights = weights - lr * grad
            if not np.all(np.isfinite(weights)):
                raise NonFiniteLoss(f"weights diverged in epoch {epoch + 1}")
            epoch_loss += value * idx.size
            epoch_correct += int((logits.argmax(axis=1) == yb).sum())

    metrics = TrainingMetrics(
        loss=epoch_loss / n,
        accuracy=epoch_correct / n,
        train_seconds=time.perf_counter() - start,
    )
    return ParameterVector(model.layout, weights), metrics


def evaluate(
    model: ParameterVector,
    spec: ModelSpec,
    data: LocalDataset,
    split: str,
    loss: str = "cross_entropy",
) -> TrainingMetrics:
    """Loss and accuracy on the chosen split; pure, no mutation."""
    x, y = data.split(split)
    start = time.perf_counter()
    logits = forward(spec, model, x)
    value, _ = _loss_and_dlogits(logits, y, loss, spec.num_classes)
    accuracy = float((logits.argmax(axis=1) == y).mean())
    return TrainingMetrics(
        loss=float(value), accuracy=accuracy, train_seconds=time.perf_counter() - start
    )
