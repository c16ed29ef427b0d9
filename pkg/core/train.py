import logging
import math
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.dataset import InteractionLog, SplitBundle
from core.evaluation import precision_recall_ndcg
from core.ml_models import PreferenceModel, top_k

logger = logging.getLogger(__name__)

# Size of the fixed triple sample the per-epoch trace is measured on
TRACE_SAMPLE_SIZE = 4096
LOSS_TRACE_COLUMNS = ["epoch", "l_bpr", "l_ipl", "l_total", "val_recall"]


class TrainingDivergedError(RuntimeError):
    """Raised when the composite loss stops being finite."""


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class IplScope(str, Enum):
    BATCH = "batch"
    FULL = "full"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(20, ge=0)
    batch_size: int = Field(1024, ge=1)
    learning_rate: float = Field(0.05, ge=0)
    l2_coeff: float = Field(1e-4, ge=0)
    lambda_f: float = Field(0.0, ge=0)
    gamma: Optional[float] = None
    optimizer: OptimizerKind = OptimizerKind.SGD
    seed: int = 0
    eval_every: int = Field(1, ge=0, description="Epochs between validation runs; 0 disables them")
    eval_k: int = Field(20, ge=1)
    ipl_scope: IplScope = IplScope.BATCH
    early_stopping_patience: Optional[int] = Field(None, ge=1)
    deterministic: bool = True

    @model_validator(mode="after")
    def _gamma_when_regularised(self):
        if self.lambda_f > 0 and self.gamma is None:
            raise ValueError("gamma is required when lambda_f > 0")
        if self.gamma is not None and not math.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        return self


@dataclass(frozen=True)
class BprTriple:
    u: int
    i_pos: int
    i_neg: int


@dataclass(frozen=True)
class BprBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return int(self.users.size)

    def triples(self) -> List[BprTriple]:
        return [BprTriple(int(u), int(i), int(j)) for u, i, j in zip(self.users, self.pos, self.neg)]


@dataclass(frozen=True)
class LossBreakdown:
    l_bpr: float
    l_ipl: float
    l_total: float
    grad_norm: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    val_recall: Optional[float] = None

    def to_row(self) -> Dict[str, Optional[float]]:
        return {
            "epoch": self.epoch,
            "l_bpr": self.loss.l_bpr,
            "l_ipl": self.loss.l_ipl,
            "l_total": self.loss.l_total,
            "val_recall": self.val_recall,
        }


@dataclass
class TrainResult:
    model: PreferenceModel
    trace: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False


EpochCallback = Callable[[EpochRecord], None]


def _empty_batch() -> BprBatch:
    empty = np.empty(0, dtype=np.int64)
    return BprBatch(empty, empty, empty)


def sample_bpr_batch(train: InteractionLog, batch_size: int, rng: np.random.Generator) -> BprBatch:
    """
    Draw interactions uniformly (users appear in proportion to |I_u+|) and pair
    each with a uniformly drawn non-positive item by rejection. Users whose
    positives cover the whole catalogue are dropped with a warning.
    """
    if batch_size == 0:
        return _empty_batch()
    if train.is_empty():
        raise ValueError("Cannot sample BPR triples from an empty training log")

    picks = rng.integers(0, train.n_interactions, size=batch_size)
    users = np.searchsorted(train.matrix.indptr, picks, side="right") - 1
    pos = train.matrix.indices[picks].astype(np.int64)

    saturated = train.user_degrees()[users] >= train.n_items
    if saturated.any():
        logger.warning(f"Skipping {int(saturated.sum())} triples from users who interacted with every item")
        users, pos = users[~saturated], pos[~saturated]

    neg = rng.integers(0, train.n_items, size=users.size)
    clash = train.contains(users, neg)
    while clash.any():
        neg[clash] = rng.integers(0, train.n_items, size=int(clash.sum()))
        clash = train.contains(users, neg)
    return BprBatch(users.astype(np.int64), pos, neg.astype(np.int64))


def _as_index(values: np.ndarray, device: Optional[torch.device] = None) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=np.int64), device=device)


def bpr_loss(model: PreferenceModel, batch: BprBatch, l2_coeff: float) -> torch.Tensor:
    """Mean softplus(-(y_ui+ - y_ui-)) plus l2_coeff times the squared norm of the base rows the batch touches."""
    if len(batch) == 0:
        raise ValueError("BPR loss needs a non-empty batch")
    user_vecs, item_vecs = model.final_embeddings()
    device = model.device
    u, p, n = _as_index(batch.users, device), _as_index(batch.pos, device), _as_index(batch.neg, device)
    diff = (user_vecs[u] * (item_vecs[p] - item_vecs[n])).sum(dim=-1)
    loss = F.softplus(-diff).mean()
    if l2_coeff > 0:
        touched_users = _as_index(np.unique(batch.users), device)
        touched_items = _as_index(np.unique(np.concatenate([batch.pos, batch.neg])), device)
        loss = loss + l2_coeff * (
            model.user_emb.weight[touched_users].pow(2).sum() + model.item_emb.weight[touched_items].pow(2).sum()
        )
    return loss


def _parameters(model: PreferenceModel) -> List[torch.Tensor]:
    return [model.user_emb.weight, model.item_emb.weight]


def _grad_norm(grads: Sequence[torch.Tensor]) -> float:
    return float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))


def bpr_loss_and_grads(
    model: PreferenceModel, batch: BprBatch, l2_coeff: float
) -> Tuple[LossBreakdown, Tuple[torch.Tensor, torch.Tensor]]:
    """BPR loss with its gradients w.r.t. the user and item tables."""
    loss = bpr_loss(model, batch, l2_coeff)
    grads = torch.autograd.grad(loss, _parameters(model))
    value = float(loss)
    return LossBreakdown(l_bpr=value, l_ipl=0.0, l_total=value, grad_norm=_grad_norm(grads)), grads


def expected_interaction_rate(
    model: PreferenceModel, items: np.ndarray, train: InteractionLog, gamma: float
) -> torch.Tensor:
    """r_hat_i = sum over U_i* of sigma(y_ui), divided by |U_i*|^(2-gamma)."""
    items = np.asarray(items, dtype=np.int64)
    degrees = train.item_degrees()[items]
    if np.any(degrees == 0):
        raise ValueError("Items without training users cannot enter the IPL regularizer")
    sub = train.item_matrix[:, items].tocoo()
    device = model.device
    users, local = _as_index(sub.row, device), _as_index(sub.col, device)
    user_vecs, item_vecs = model.final_embeddings()
    item_index = _as_index(items, device)[local]
    probs = torch.sigmoid((user_vecs[users] * item_vecs[item_index]).sum(dim=-1))
    sums = torch.zeros(items.size, dtype=probs.dtype, device=device).index_add(0, local, probs)
    denominator = torch.as_tensor(degrees.astype(np.float64), dtype=probs.dtype, device=device).pow(2.0 - gamma)
    return sums / denominator


def ipl_regularizer(
    model: PreferenceModel,
    items: np.ndarray,
    train: InteractionLog,
    gamma: float,
    m_effective: Optional[int] = None,
) -> torch.Tensor:
    """
    Population standard deviation of r_hat over `items`, normalised by
    `m_effective` (defaults to the item count). The gradient is 0 where
    every r_hat is equal.
    """
    items = np.unique(np.asarray(items, dtype=np.int64))
    r_hat = expected_interaction_rate(model, items, train, gamma)
    m = m_effective if m_effective is not None else items.size
    variance = ((r_hat - r_hat.mean()) ** 2).sum() / m
    flat = variance <= 0
    safe = torch.where(flat, torch.ones_like(variance), variance)
    return torch.where(flat, torch.zeros_like(variance), torch.sqrt(safe))


def _ipl_items(train: InteractionLog, batch: BprBatch, scope: IplScope) -> np.ndarray:
    if scope is IplScope.FULL:
        return np.flatnonzero(train.item_degrees() > 0)
    return np.unique(batch.pos)


def _make_optimizer(model: PreferenceModel, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer is OptimizerKind.ADAM:
        return torch.optim.Adam(_parameters(model), lr=config.learning_rate)
    return torch.optim.SGD(_parameters(model), lr=config.learning_rate)


def debias_loss(
    model: PreferenceModel, batch: BprBatch, train: InteractionLog, config: TrainConfig
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(l_bpr, l_ipl, l_total) for one batch; l_ipl stays out of the graph when lambda_f is 0."""
    l_bpr = bpr_loss(model, batch, config.l2_coeff)
    if config.lambda_f > 0:
        l_ipl = ipl_regularizer(model, _ipl_items(train, batch, config.ipl_scope), train, config.gamma)
        return l_bpr, l_ipl, l_bpr + config.lambda_f * l_ipl
    if config.gamma is not None:
        with torch.no_grad():
            l_ipl = ipl_regularizer(model, _ipl_items(train, batch, config.ipl_scope), train, config.gamma)
    else:
        l_ipl = torch.zeros((), dtype=l_bpr.dtype, device=l_bpr.device)
    return l_bpr, l_ipl, l_bpr


def measure_loss(
    model: PreferenceModel, batch: BprBatch, train: InteractionLog, config: TrainConfig
) -> LossBreakdown:
    l_bpr, l_ipl, l_total = debias_loss(model, batch, train, config)
    grads = torch.autograd.grad(l_total, _parameters(model), allow_unused=True)
    grads = [g for g in grads if g is not None]
    return LossBreakdown(
        l_bpr=float(l_bpr),
        l_ipl=float(l_ipl),
        l_total=float(l_bpr) + config.lambda_f * float(l_ipl),
        grad_norm=_grad_norm(grads) if grads else 0.0,
    )


def _epoch_batches(train: InteractionLog, config: TrainConfig, rng: np.random.Generator) -> List[BprBatch]:
    steps = math.ceil(train.n_interactions / config.batch_size)
    return [sample_bpr_batch(train, config.batch_size, rng) for _ in range(steps)]


def validation_recall(model: PreferenceModel, split: SplitBundle, k: int) -> Optional[float]:
    if split.validation.is_empty():
        return None
    users = np.flatnonzero(split.validation.user_degrees() > 0)
    run = top_k(model, users, k, exclude=split.train)
    _, recall, _ = precision_recall_ndcg(run, split.validation, k)
    return recall


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        logger.error(f"Training diverged at {where}: l_total={value}")
        raise TrainingDivergedError(f"l_total became non-finite at {where}; lower learning_rate or lambda_f")


def train(
    model: PreferenceModel,
    split: SplitBundle,
    config: TrainConfig,
    callbacks: Optional[Sequence[EpochCallback]] = None,
) -> TrainResult:
    """
    Mini-batch optimisation of L_BPR + lambda_f * L_IPL.

    Batches come from np.random.default_rng(config.seed) only, so the
    trajectory is a function of the seed and the initial parameters. The
    trace holds one record per epoch (epoch 0 is the untrained model),
    measured on a fixed trace sample drawn from an independent stream.
    """
    train_log = split.train
    if train_log.is_empty():
        raise ValueError("Training split is empty")
    if model.n_users != train_log.n_users or model.n_items != train_log.n_items:
        raise ValueError(
            f"Model shape ({model.n_users}, {model.n_items}) does not match split "
            f"({train_log.n_users}, {train_log.n_items})"
        )

    rng = np.random.default_rng(config.seed)
    trace_sample = sample_bpr_batch(train_log, min(TRACE_SAMPLE_SIZE, train_log.n_interactions), np.random.default_rng([config.seed, 1]))
    optimizer = _make_optimizer(model, config)
    result = TrainResult(model=model)
    callbacks = list(callbacks or [])

    best_recall, best_state, stale = -math.inf, None, 0

    def _record(epoch: int) -> EpochRecord:
        loss = measure_loss(model, trace_sample, train_log, config)
        _check_finite(loss.l_total, f"epoch {epoch}")
        val = None
        if config.eval_every and epoch > 0 and epoch % config.eval_every == 0:
            val = validation_recall(model, split, config.eval_k)
        record = EpochRecord(epoch=epoch, loss=loss, val_recall=val)
        result.trace.append(record)
        for callback in callbacks:
            callback(record)
        return record

    _record(0)
    logger.info(
        f"Training {model.kind.value} for {config.epochs} epochs "
        f"(lambda_f={config.lambda_f}, scope={config.ipl_scope.value}, optimizer={config.optimizer.value})"
    )

    sampler = None if config.deterministic else ThreadPoolExecutor(max_workers=1)
    pending: Optional[Future] = None
    try:
        for epoch in range(1, config.epochs + 1):
            if sampler is None:
                batches = _epoch_batches(train_log, config, rng)
            else:
                batches = pending.result() if pending is not None else _epoch_batches(train_log, config, rng)
                if epoch < config.epochs:
                    pending = sampler.submit(_epoch_batches, train_log, config, rng)

            for step, batch in enumerate(batches):
                if len(batch) == 0:
                    continue
                optimizer.zero_grad()
                l_bpr, l_ipl, l_total = debias_loss(model, batch, train_log, config)
                _check_finite(float(l_total), f"epoch {epoch} step {step}")
                l_total.backward()
                optimizer.step()
                logger.debug(f"epoch {epoch} step {step}: l_bpr={float(l_bpr):.6f} l_ipl={float(l_ipl):.6f}")

            record = _record(epoch)
            logger.info(
                f"Epoch {epoch}: l_bpr={record.loss.l_bpr:.6f} l_ipl={record.loss.l_ipl:.6f} "
                f"l_total={record.loss.l_total:.6f} val_recall={record.val_recall}"
            )

            if config.early_stopping_patience and record.val_recall is not None:
                if record.val_recall > best_recall:
                    best_recall, stale = record.val_recall, 0
                    result.best_epoch = epoch
                    best_state = [p.detach().clone() for p in _parameters(model)]
                else:
                    stale += 1
                    if stale >= config.early_stopping_patience:
                        logger.info(f"Early stopping at epoch {epoch}; best epoch {result.best_epoch}")
                        result.stopped_early = True
                        break
    finally:
        if sampler is not None:
            sampler.shutdown(wait=True, cancel_futures=True)

    if best_state is not None:
        with torch.no_grad():
            for param, saved in zip(_parameters(model), best_state):
                param.copy_(saved)
    return result


def write_loss_trace(trace: Sequence[EpochRecord], path) -> None:
    frame = pd.DataFrame([record.to_row() for record in trace], columns=LOSS_TRACE_COLUMNS)
    frame.to_csv(path, index=False)
