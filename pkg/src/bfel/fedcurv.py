"""Curvature-regularized federated learning.

Client side: diagonal Fisher estimation at the broadcast global model,
then local SGD on a loss anchored to that model by a Fisher-weighted
quadratic penalty. Server side: unweighted aggregation of client Fisher
diagonals and gradients, followed by an inverse-curvature-scaled step on
the global model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import models
from .data import Dataset, shuffled_batches
from .models import (
    LayoutMismatchError,
    ModelSpec,
    ParameterVector,
    lr_schedule,
    require_same_layout,
)


class EmptyDatasetError(ValueError):
    pass


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class FisherDiagonal:
    """Per-parameter importance scores: mean squared log-likelihood gradient."""

    values: np.ndarray
    layout: models.ParamLayout

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vals.ndim != 1 or vals.shape[0] != self.layout.size:
            raise LayoutMismatchError("fisher diagonal does not match layout")
        if np.any(vals < 0):
            raise ValueError("fisher diagonal entries must be nonnegative")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class HyperParams:
    lam: float = 0.1
    local_epochs: int = 1
    eta_local: float = 0.01
    eta_global: float = 1.0
    epsilon: float = 1e-8
    batch_size: int = 20
    client_fraction: float = 1.0
    lr_decay: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.client_fraction <= 1:
            raise ValueError("client_fraction must be in (0, 1]")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    fisher: FisherDiagonal
    gradient: ParameterVector
    theta_local: ParameterVector
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not (
            self.fisher.layout == self.gradient.layout == self.theta_local.layout
        ):
            raise LayoutMismatchError("client update fields have mixed layouts")


@dataclass(frozen=True)
class GlobalModelState:
    theta_global: ParameterVector
    round: int
    spec: ModelSpec


def compute_fisher_diagonal(
    spec: ModelSpec, theta_global: ParameterVector, local_dataset: Dataset
) -> FisherDiagonal:
    """Diagonal empirical Fisher at theta_global over the local dataset."""
    n = len(local_dataset)
    if n == 0:
        raise EmptyDatasetError("cannot estimate Fisher on an empty dataset")
    acc = np.zeros(theta_global.layout.size)
    if spec.kind == "mlp":
        for start in range(0, n, 512):
            idx = np.arange(start, min(start + 512, n))
            acc += models.sum_squared_loglik_grads(
                spec, theta_global, local_dataset.subset(idx).as_batch()
            )
    else:
        for i in range(n):
            g = models.per_sample_loglik_grad(
                spec, theta_global, local_dataset.sample_batch(i)
            )
            acc += g.values**2
    return FisherDiagonal(acc / n, theta_global.layout)


def regularized_loss(
    spec: ModelSpec,
    theta: ParameterVector,
    theta_global: ParameterVector,
    fisher: FisherDiagonal,
    batch,
    lam: float,
) -> float:
    """Cross-entropy plus (lam/2) * sum_i F[i] * (theta - theta_global)[i]^2."""
    require_same_layout(theta, theta_global)
    loss, _ = models.loss_and_grad(spec, theta, batch)
    if lam == 0.0:
        return loss
    diff = theta.values - theta_global.values
    return loss + 0.5 * lam * float(np.dot(fisher.values, diff * diff))


def regularized_gradient(
    spec: ModelSpec,
    theta: ParameterVector,
    theta_global: ParameterVector,
    fisher: FisherDiagonal,
    batch,
    lam: float,
) -> ParameterVector:
    """Gradient of regularized_loss: dL + lam * F * (theta - theta_global)."""
    require_same_layout(theta, theta_global)
    _, grad = models.loss_and_grad(spec, theta, batch)
    if lam == 0.0:
        return grad
    penalty = lam * fisher.values * (theta.values - theta_global.values)
    return grad.with_values(grad.values + penalty)


def local_train(
    spec: ModelSpec,
    theta_global: ParameterVector,
    fisher: FisherDiagonal,
    local_dataset: Dataset,
    hp: HyperParams,
    seed: int,
    epoch_offset: int = 0,
) -> ParameterVector:
    """E epochs of mini-batch SGD on the anchored loss, from theta_global.

    epoch_offset shifts the decay schedule when epochs accumulate across
    rounds.
    """
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
            grad = regularized_gradient(
                spec, theta, theta_global, fisher, batch, hp.lam
            )
            theta = models.sgd_step(theta, grad, lr)
    return theta


def server_gradient(
    spec: ModelSpec, theta_local: ParameterVector, local_dataset: Dataset
) -> ParameterVector:
    """Unregularized full-dataset gradient at theta_local (g_k)."""
    if len(local_dataset) == 0:
        raise EmptyDatasetError("cannot take a gradient on an empty dataset")
    _, grad = models.loss_and_grad(spec, theta_local, local_dataset.as_batch())
    return grad


def _check_updates(updates: list[ClientUpdate]) -> None:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    if len({u.round for u in updates}) > 1:
        raise AggregationError("client updates span multiple rounds")
    require_same_layout(*[u.theta_local for u in updates])


def aggregate_fisher(updates: list[ClientUpdate]) -> FisherDiagonal:
    """Unweighted elementwise mean of the participating clients' Fishers."""
    _check_updates(updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = np.zeros_like(ordered[0].fisher.values)
    for u in ordered:
        total += u.fisher.values
    return FisherDiagonal(total / len(ordered), ordered[0].fisher.layout)


def aggregate_gradients(updates: list[ClientUpdate]) -> ParameterVector:
    """Unweighted elementwise mean of the participating clients' gradients."""
    _check_updates(updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = np.zeros_like(ordered[0].gradient.values)
    for u in ordered:
        total += u.gradient.values
    return ordered[0].gradient.with_values(total / len(ordered))


def invert_fisher(f_global: FisherDiagonal, epsilon: float) -> FisherDiagonal:
    """Elementwise 1 / (F + epsilon); epsilon guards zero curvature."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return FisherDiagonal(1.0 / (f_global.values + epsilon), f_global.layout)


def global_update(
    state: GlobalModelState,
    f_inv: FisherDiagonal,
    g_global: ParameterVector,
    eta_global: float,
) -> GlobalModelState:
    """Curvature-scaled step: theta - eta * F_inv ⊙ g; round advances by 1."""
    require_same_layout(state.theta_global, g_global)
    new_theta = state.theta_global.with_values(
        state.theta_global.values - eta_global * f_inv.values * g_global.values
    )
    return replace(state, theta_global=new_theta, round=state.round + 1)


def client_round(
    spec: ModelSpec,
    theta_global: ParameterVector,
    local_dataset: Dataset,
    hp: HyperParams,
    client_id: int,
    round_no: int,
    seed: int,
    epoch_offset: int = 0,
) -> ClientUpdate:
    """Full client-side pipeline: Fisher at the anchor, anchored SGD, g_k."""
    fisher = compute_fisher_diagonal(spec, theta_global, local_dataset)
    theta_local = local_train(
        spec, theta_global, fisher, local_dataset, hp, seed, epoch_offset
    )
    g_k = server_gradient(spec, theta_local, local_dataset)
    return ClientUpdate(
        client_id=client_id,
        round=round_no,
        fisher=fisher,
        gradient=g_k,
        theta_local=theta_local,
        sample_count=len(local_dataset),
    )


def sample_clients(
    client_count: int, fraction: float, rng: np.random.Generator
) -> list[int]:
    """ceil(fraction * N) distinct client ids, ascending."""
    m = max(1, math.ceil(fraction * client_count))
    return sorted(int(i) for i in rng.choice(client_count, size=m, replace=False))


def divergence(thetas: list[ParameterVector]) -> float:
    """Mean L2 distance of client parameter vectors from their round mean."""
    stack = np.stack([t.values for t in thetas])
    mean = stack.mean(axis=0)
    return float(np.linalg.norm(stack - mean, axis=1).mean())


def run_round(
    state: GlobalModelState,
    clients: list[Dataset],
    hp: HyperParams,
    rng: np.random.Generator,
    test_set: Dataset | None = None,
    epoch_offset: int = 0,
) -> tuple[GlobalModelState, list[ClientUpdate], dict]:
    """One full FedCurv round: sample, train, aggregate, update.

    Per-client training seeds are drawn in ascending client-id order so the
    outcome is independent of execution order.
    """
    if not clients:
        raise AggregationError("run_round requires at least one client")
    sampled = sample_clients(len(clients), hp.client_fraction, rng)
    seeds = {cid: int(rng.integers(2**63)) for cid in sampled}
    updates = [
        client_round(
            state.spec,
            state.theta_global,
            clients[cid],
            hp,
            client_id=cid,
            round_no=state.round,
            seed=seeds[cid],
            epoch_offset=epoch_offset,
        )
        for cid in sampled
    ]
    f_global = aggregate_fisher(updates)
    g_global = aggregate_gradients(updates)
    f_inv = invert_fisher(f_global, hp.epsilon)
    new_state = global_update(state, f_inv, g_global, hp.eta_global)
    metrics = {
        "sampled_clients": sampled,
        "divergence": divergence([u.theta_local for u in updates]),
    }
    if test_set is not None:
        batch = test_set.as_batch()
        client_accs = [
            models.accuracy(state.spec, u.theta_local, batch) for u in updates
        ]
        metrics["client_accuracy"] = client_accs
        metrics["global_accuracy"] = models.accuracy(
            state.spec, new_state.theta_global, batch
        )
    return new_state, updates, metrics
