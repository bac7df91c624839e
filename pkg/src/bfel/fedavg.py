"""First-order baseline: plain local SGD and sample-count-weighted averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .data import Dataset, shuffled_batches
from .fedcurv import AggregationError, EmptyDatasetError, HyperParams
from .models import ModelSpec, ParameterVector, lr_schedule, require_same_layout


@dataclass(frozen=True)
class PlainClientUpdate:
    client_id: int
    round: int
    theta_local: ParameterVector
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def local_train_plain(
    spec: ModelSpec,
    theta_global: ParameterVector,
    local_dataset: Dataset,
    hp: HyperParams,
    seed: int,
    epoch_offset: int = 0,
) -> ParameterVector:
    """E epochs of mini-batch SGD on the unregularized loss, from theta_global."""
    if len(local_dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    theta = theta_global
    for epoch in range(hp.local_epochs):
        lr = hp.eta_local
        if hp.lr_decay:
            lr = lr_schedule(hp.eta_local, epoch_offset + epoch)
        if lr == 0.0:
            continue
        for idx in shuffled_batches(len(local_dataset), hp.batch_size, rng):
            batch = local_dataset.subset(idx).as_batch()
            _, grad = models.loss_and_grad(spec, theta, batch)
            theta = models.sgd_step(theta, grad, lr)
    return theta


def average_models(updates: list[PlainClientUpdate]) -> ParameterVector:
    """Sample-count-weighted mean of the client models, summed in id order."""
    if not updates:
        raise AggregationError("no client updates to average")
    ordered = sorted(updates, key=lambda u: u.client_id)
    require_same_layout(*[u.theta_local for u in ordered])
    total_n = sum(u.sample_count for u in ordered)
    acc = np.zeros_like(ordered[0].theta_local.values)
    for u in ordered:
        acc += (u.sample_count / total_n) * u.theta_local.values
    return ordered[0].theta_local.with_values(acc)
