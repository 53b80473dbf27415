"""Federated training loop: penalized local SGD, upload, fusion, redistribution.

FedAvg, FedProx, FedAMP and pFedCFR are all the same loop with different
fusion plans and penalty coefficients:

    method    fusion                         penalty (c/2 ||v - target||^2)
    fedavg    mean of every layer            none
    fedprox   mean of every layer            c = mu toward the mean
    fedamp    whole-model similarity fusion  c = lam / alpha_t toward own fused model
    pfedcfr   layers <= r similarity-fused,  c = lam / alpha_t on layers <= r,
              layers > r averaged            c = mu on layers > r

After fusion every shared (averaged) layer overwrites the client's layer; a
similarity-fused layer only becomes the penalty target and the client keeps
training its own copy, unless ``overwrite_personalized`` is set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .data import ClientShard, Dataset
from .fusion import (
    GENERIC,
    PERSONALIZED,
    FusionPlan,
    FusionResult,
    SimilarityParams,
    fuse_round,
    fuse_whole_model,
    make_plan,
)

METHODS = ("fedavg", "fedprox", "fedamp", "pfedcfr")


class PenaltyTargetMissing(KeyError):
    def __init__(self, layer: int, tag: str):
        self.layer = layer
        self.tag = tag
        super().__init__(f"layer {layer}: no {tag} target to penalize toward")


@dataclass(frozen=True)
class MethodConfig:
    method: str = "pfedcfr"
    similarity: SimilarityParams = SimilarityParams()
    r: Optional[int] = None
    local_steps: int = 10
    batch_size: int = 32
    eta: float = 0.005
    rounds: int = 100
    seed: int = 0
    overwrite_personalized: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    def plan(self, spec: nn.ModelSpec) -> FusionPlan:
        if self.method in ("fedavg", "fedprox"):
            return FusionPlan(spec.depth, 0)
        if self.method == "fedamp":
            return FusionPlan(spec.depth, spec.depth)
        return make_plan(spec, self.r)

    def penalty(self, spec: nn.ModelSpec) -> Optional["PenaltySpec"]:
        if self.method == "fedavg":
            return None
        return PenaltySpec.from_plan(self.plan(spec), self.similarity)


@dataclass(frozen=True)
class PenaltySpec:
    """Per-layer ``(tag, coef)``; a layer contributes ``coef/2 * ||v - target||^2``."""

    entries: tuple

    def __post_init__(self):
        for tag, coef in self.entries:
            if tag not in (PERSONALIZED, GENERIC):
                raise ValueError(f"unknown penalty tag {tag!r}")
            if coef < 0:
                raise ValueError("penalty coefficients must be >= 0")

    @classmethod
    def from_plan(cls, plan: FusionPlan, p: SimilarityParams) -> "PenaltySpec":
        return cls(
            tuple(
                (tag, p.lam / p.alpha_t if tag == PERSONALIZED else p.mu) for tag in plan.tags
            )
        )


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    params: list
    personalized_target: Optional[dict] = None  # layer -> vector, layers <= r
    global_layers: Optional[dict] = None  # layer -> vector, layers > r

    def target(self, layer: int, tag: str) -> np.ndarray:
        pool = self.personalized_target if tag == PERSONALIZED else self.global_layers
        if not pool or layer not in pool:
            raise PenaltyTargetMissing(layer, tag)
        return pool[layer]


@dataclass
class RoundMetrics:
    t: int
    train_loss: np.ndarray
    test_loss: np.ndarray
    test_acc: np.ndarray
    wall_ms: float = 0.0

    @property
    def acc_mean(self) -> float:
        return float(np.mean(self.test_acc))

    @property
    def acc_std(self) -> float:
        return float(np.std(self.test_acc))

    @property
    def test_loss_mean(self) -> float:
        return float(np.mean(self.test_loss))

    @property
    def train_loss_mean(self) -> float:
        return float(np.mean(self.train_loss))


def penalty_value_and_grad(params: Sequence[np.ndarray], state: ClientState, spec: PenaltySpec):
    value = 0.0
    grads = []
    for l, ((tag, coef), v) in enumerate(zip(spec.entries, params), start=1):
        diff = v - state.target(l, tag)
        value += 0.5 * coef * float(diff @ diff)
        grads.append(coef * diff)
    return value, grads


def evaluate(spec: nn.ModelSpec, params: Sequence[np.ndarray], test: Dataset):
    """Mean cross-entropy and accuracy; argmax ties go to the lowest class."""
    logits, _ = nn.forward(spec, params, nn.Batch(test.inputs, test.labels))
    loss, _ = nn.softmax_cross_entropy(logits, test.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == test.labels))
    return loss, acc


def local_train(
    spec: nn.ModelSpec,
    state: ClientState,
    cfg: MethodConfig,
    penalty: Optional[PenaltySpec] = None,
    t: int = 1,
    data_weight: float = 1.0,
) -> list:
    """``cfg.local_steps`` epochs of shuffled mini-batch SGD on data loss + penalty.

    The shuffle stream depends only on ``(cfg.seed, t)``, so clients holding
    identical data follow identical trajectories.
    """
    params = nn.copy_params(state.params)
    if cfg.eta == 0:
        return params
    train = state.shard.train
    extra = None
    if penalty is not None:
        extra = lambda ps: penalty_value_and_grad(ps, state, penalty)  # noqa: E731
    rng = np.random.default_rng([cfg.seed, t])
    m = len(train)
    step = 0
    for epoch in range(cfg.local_steps):
        order = rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = nn.Batch(train.inputs[idx], train.labels[idx])
            ctx = {"round": t, "client": state.client_id, "epoch": epoch, "step": step}
            _, grad = nn.loss_and_grad(spec, params, batch, extra, data_weight, ctx)
            params = nn.sgd_step(params, grad, cfg.eta)
            step += 1
    return params


def fuse_uploads(spec: nn.ModelSpec, uploads, cfg: MethodConfig) -> FusionResult:
    if cfg.method == "fedamp":
        return fuse_whole_model(uploads, cfg.similarity)
    return fuse_round(uploads, cfg.plan(spec), cfg.similarity)


def init_clients(spec: nn.ModelSpec, shards: Sequence[ClientShard], cfg: MethodConfig) -> list:
    """Common random start; penalty targets begin at the starting point."""
    plan = cfg.plan(spec)
    base = nn.init_model(spec, cfg.seed)
    clients = []
    for shard in shards:
        params = nn.copy_params(base)
        clients.append(
            ClientState(
                shard.client_id,
                shard,
                params,
                {l: params[l - 1].copy() for l in plan.personalized_layers},
                {l: params[l - 1].copy() for l in plan.generic_layers},
            )
        )
    return clients


def run_round(spec: nn.ModelSpec, clients: Sequence[ClientState], cfg: MethodConfig, t: int):
    """One round: train all clients, fuse, hand back targets, evaluate.

    Returns ``(new_clients, metrics, fusion_result)``.
    """
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    start = time.perf_counter()
    plan = cfg.plan(spec)
    penalty = cfg.penalty(spec)

    uploads = [local_train(spec, c, cfg, penalty, t) for c in clients]
    fused = fuse_uploads(spec, uploads, cfg)

    new_clients = []
    for n, (c, trained) in enumerate(zip(clients, uploads)):
        params = []
        for l in range(1, spec.depth + 1):
            if plan.tag(l) == GENERIC or cfg.overwrite_personalized:
                params.append(fused.per_client[n][l - 1].copy())
            else:
                params.append(trained[l - 1])
        new_clients.append(
            replace(
                c,
                params=params,
                personalized_target={l: fused.per_client[n][l - 1] for l in plan.personalized_layers},
                global_layers={l: fused.global_layers[l] for l in plan.generic_layers},
            )
        )

    train_loss, test_loss, test_acc = [], [], []
    for c in new_clients:
        tr_loss, _ = evaluate(spec, c.params, c.shard.train)
        te_loss, te_acc = evaluate(spec, c.params, c.shard.test)
        train_loss.append(tr_loss)
        test_loss.append(te_loss)
        test_acc.append(te_acc)
    metrics = RoundMetrics(
        t,
        np.array(train_loss),
        np.array(test_loss),
        np.array(test_acc),
        (time.perf_counter() - start) * 1e3,
    )
    return new_clients, metrics, fused


def run_experiment(
    spec: nn.ModelSpec,
    shards: Sequence[ClientShard],
    cfg: MethodConfig,
    on_round: Optional[Callable] = None,
) -> list:
    """Run ``cfg.rounds`` rounds and return the per-round metrics.

    ``on_round(t, clients, metrics, fusion_result)`` is called after each round.
    """
    clients = init_clients(spec, shards, cfg)
    history = []
    for t in range(1, cfg.rounds + 1):
        clients, metrics, fused = run_round(spec, clients, cfg, t)
        history.append(metrics)
        if on_round is not None:
            on_round(t, clients, metrics, fused)
    return history


def final_accuracy(history: Sequence[RoundMetrics], window: int = 5):
    """Mean and std of the per-round mean accuracy over the last ``window`` rounds."""
    tail = np.array([m.acc_mean for m in history[-window:]])
    return float(tail.mean()), float(tail.std())
