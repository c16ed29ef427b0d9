import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn

from core.dataset import IdMaps, InteractionLog

logger = logging.getLogger(__name__)

DEFAULT_LAYERS = 3
EXCLUDE_TRAIN = "train-positives"
EXCLUDE_NONE = "none"


class ModelKind(str, Enum):
    MF = "mf"
    LIGHTGCN = "lightgcn"


def default_init_scale(dim: int) -> float:
    return 0.1 / math.sqrt(dim)


def build_normalized_adjacency(train: InteractionLog, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    Symmetric-normalised bipartite adjacency D^-1/2 A D^-1/2 as a sparse
    (N+M) x (N+M) tensor. Users occupy rows 0..N-1, items N..N+M-1; isolated
    nodes get all-zero rows.
    """
    n_users, n_items = train.n_users, train.n_items
    users, items = train.pairs()
    rows = np.concatenate([users, items + n_users])
    cols = np.concatenate([items + n_users, users])
    degree = np.bincount(rows, minlength=n_users + n_items).astype(np.float64)
    inv_sqrt = np.zeros_like(degree)
    connected = degree > 0
    inv_sqrt[connected] = degree[connected] ** -0.5
    values = inv_sqrt[rows] * inv_sqrt[cols]
    indices = torch.from_numpy(np.vstack([rows, cols]).astype(np.int64))
    return torch.sparse_coo_tensor(
        indices,
        torch.from_numpy(values).to(dtype),
        size=(n_users + n_items, n_users + n_items),
    ).coalesce()


def propagate_embeddings(
    graph: torch.Tensor,
    user_emb: torch.Tensor,
    item_emb: torch.Tensor,
    n_layers: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Light graph convolution: e^(l+1) = A e^(l), read out as the mean of e^(0..L)."""
    n_users = user_emb.shape[0]
    embs = torch.cat([user_emb, item_emb], dim=0)
    layers = [embs]
    for _ in range(n_layers):
        embs = torch.sparse.mm(graph, embs)
        layers.append(embs)
    out = torch.stack(layers, dim=0).mean(dim=0)
    return out[:n_users], out[n_users:]


class PreferenceModel(nn.Module):
    """User/item embedding tables scored by dot product, optionally propagated over the training graph."""

    def __init__(
        self,
        kind: Union[ModelKind, str],
        n_users: int,
        n_items: int,
        dim: int,
        n_layers: int = DEFAULT_LAYERS,
        graph: Optional[torch.Tensor] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.kind = ModelKind(kind)
        self.n_users = n_users
        self.n_items = n_items
        self.dim = dim
        self.n_layers = n_layers if self.kind is ModelKind.LIGHTGCN else 0
        self.user_emb = nn.Embedding(n_users, dim, dtype=dtype)
        self.item_emb = nn.Embedding(n_items, dim, dtype=dtype)
        if self.kind is ModelKind.LIGHTGCN and graph is None:
            raise ValueError("LightGCN needs a normalised training graph")
        self.register_buffer("graph", graph.to(dtype) if graph is not None else None)

    @property
    def dtype(self) -> torch.dtype:
        return self.user_emb.weight.dtype

    @property
    def device(self) -> torch.device:
        return self.user_emb.weight.device

    def propagate(self) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.graph is None:
            raise ValueError("propagate requires a LightGCN model with a graph")
        return propagate_embeddings(self.graph, self.user_emb.weight, self.item_emb.weight, self.n_layers)

    def final_embeddings(self) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.kind is ModelKind.LIGHTGCN:
            return self.propagate()
        return self.user_emb.weight, self.item_emb.weight

    def forward(self, users: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
        user_vecs, item_vecs = self.final_embeddings()
        return (user_vecs[users] * item_vecs[items]).sum(dim=-1)

    def score(self, u: int, i: int) -> float:
        if not 0 <= u < self.n_users:
            raise IndexError(f"User index {u} out of range [0, {self.n_users})")
        if not 0 <= i < self.n_items:
            raise IndexError(f"Item index {i} out of range [0, {self.n_items})")
        with torch.no_grad():
            user_vecs, item_vecs = self.final_embeddings()
            return float(torch.dot(user_vecs[u], item_vecs[i]))

    def score_users(self, users: Sequence[int]) -> np.ndarray:
        """Full score rows (len(users) x M) as float64."""
        with torch.no_grad():
            user_vecs, item_vecs = self.final_embeddings()
            index = torch.as_tensor(np.asarray(users, dtype=np.int64), device=self.device)
            return (user_vecs[index] @ item_vecs.T).double().cpu().numpy()


def init_model(
    kind: Union[ModelKind, str],
    n_users: int,
    n_items: int,
    dim: int,
    n_layers: int = DEFAULT_LAYERS,
    init_scale: Optional[float] = None,
    seed: int = 0,
    train: Optional[InteractionLog] = None,
    graph: Optional[torch.Tensor] = None,
    dtype: torch.dtype = torch.float32,
    device: Optional[Union[str, torch.device]] = None,
) -> PreferenceModel:
    """
    Create a model with zero-mean Gaussian embeddings of std `init_scale`
    (default 0.1/sqrt(d)), deterministic under `seed`. LightGCN builds its
    graph from `train` unless one is given. Draws happen on CPU so `seed`
    gives the same tables on every device; the model is then moved to `device`.
    """
    if dim < 1 or n_users < 1 or n_items < 1:
        raise ValueError(f"Model dimensions must be positive (N={n_users}, M={n_items}, d={dim})")
    if n_layers < 0:
        raise ValueError(f"n_layers must be non-negative, got {n_layers}")
    kind = ModelKind(kind)
    if kind is ModelKind.LIGHTGCN:
        if n_layers == 0:
            logger.warning("LightGCN with 0 layers is plain MF scoring")
        if graph is None:
            if train is None:
                raise ValueError("LightGCN needs the training split to build its graph")
            if train.n_users != n_users or train.n_items != n_items:
                raise ValueError("Training split shape does not match model shape")
            graph = build_normalized_adjacency(train, dtype=dtype)

    scale = default_init_scale(dim) if init_scale is None else float(init_scale)
    if scale < 0 or not math.isfinite(scale):
        raise ValueError(f"init_scale must be finite and non-negative, got {init_scale}")

    model = PreferenceModel(kind, n_users, n_items, dim, n_layers=n_layers, graph=graph, dtype=dtype)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for table in (model.user_emb.weight, model.item_emb.weight):
            if scale == 0:
                table.zero_()
            else:
                table.normal_(0.0, scale, generator=generator)
    if device is not None:
        model = model.to(device)
    logger.info(f"Initialised {kind.value} model N={n_users} M={n_items} d={dim} scale={scale:.4g} seed={seed} device={model.device}")
    return model


def score(model: PreferenceModel, u: int, i: int) -> float:
    return model.score(u, i)


def propagate(model: PreferenceModel) -> Tuple[torch.Tensor, torch.Tensor]:
    with torch.no_grad():
        return model.propagate()


@dataclass(frozen=True)
class RecommendationRun:
    k: int
    users: np.ndarray
    lists: Tuple[np.ndarray, ...]
    scores: Tuple[np.ndarray, ...]
    excluded: str = EXCLUDE_TRAIN
    _position: Dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_position", {int(u): pos for pos, u in enumerate(self.users)})

    def list_for(self, u: int) -> np.ndarray:
        pos = self._position.get(int(u))
        if pos is None:
            return np.empty(0, dtype=np.int64)
        return self.lists[pos]

    def truncated(self, k: int) -> "RecommendationRun":
        if k > self.k:
            raise ValueError(f"Cannot truncate a top-{self.k} run to {k}")
        return RecommendationRun(
            k=k,
            users=self.users,
            lists=tuple(lst[:k] for lst in self.lists),
            scores=tuple(s[:k] for s in self.scores),
            excluded=self.excluded,
        )

    def to_frame(self, id_maps: Optional[IdMaps] = None) -> pd.DataFrame:
        records = []
        for u, items, values in zip(self.users, self.lists, self.scores):
            for rank, (i, s) in enumerate(zip(items, values), start=1):
                records.append((
                    id_maps.user_ids[u] if id_maps else int(u),
                    rank,
                    id_maps.item_ids[i] if id_maps else int(i),
                    float(s),
                ))
        return pd.DataFrame.from_records(records, columns=["user", "rank", "item", "score"])

    def write_delimited(self, path, id_maps: Optional[IdMaps] = None, delimiter: str = "\t") -> None:
        self.to_frame(id_maps).to_csv(path, sep=delimiter, index=False)


def rank_scores(scores: np.ndarray, k: int, excluded: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Top-k of one score row: descending score, ascending item index on ties, excluded items dropped."""
    allowed = np.arange(scores.shape[0], dtype=np.int64)
    if excluded is not None and len(excluded):
        mask = np.ones(scores.shape[0], dtype=bool)
        mask[excluded] = False
        allowed = allowed[mask]
    values = scores[allowed]
    if values.size > k:
        kth = np.partition(values, values.size - k)[values.size - k]
        keep = values >= kth
        allowed, values = allowed[keep], values[keep]
    order = np.lexsort((allowed, -values))[:k]
    return allowed[order], values[order]


def top_k(
    model: PreferenceModel,
    users: Sequence[int],
    k: int,
    exclude: Optional[InteractionLog] = None,
    batch_size: int = 1024,
    n_workers: int = 1,
) -> RecommendationRun:
    """Rank every item for each user and keep the k best outside that user's excluded positives."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    users = np.unique(np.asarray(list(users), dtype=np.int64))
    if users.size and (users[0] < 0 or users[-1] >= model.n_users):
        raise IndexError("User index out of range")
    if exclude is not None and exclude.n_items != model.n_items:
        raise ValueError("Exclusion log does not match the model's item space")

    def _rank_chunk(chunk: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        block = model.score_users(chunk)
        if not np.all(np.isfinite(block)):
            raise RuntimeError("Model produced non-finite scores")
        return [
            rank_scores(row, k, exclude.by_user(u) if exclude is not None else None)
            for u, row in zip(chunk, block)
        ]

    chunks = [users[start:start + batch_size] for start in range(0, users.size, batch_size)]
    if n_workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            ranked = [pair for part in pool.map(_rank_chunk, chunks) for pair in part]
    else:
        ranked = [pair for chunk in chunks for pair in _rank_chunk(chunk)]

    return RecommendationRun(
        k=k,
        users=users,
        lists=tuple(items for items, _ in ranked),
        scores=tuple(values for _, values in ranked),
        excluded=EXCLUDE_TRAIN if exclude is not None else EXCLUDE_NONE,
    )
