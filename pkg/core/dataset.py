import io
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp

logger = logging.getLogger(__name__)

RATIO_TOLERANCE = 1e-9
SPLIT_NAMES = ("train", "validation", "test")
SPLIT_MANIFEST = "split_manifest.json"

Source = Union[str, os.PathLike, bytes, BinaryIO]


class DatasetError(ValueError):
    """Raised when interaction data cannot be ingested or split."""


@dataclass(frozen=True)
class InteractionFormat:
    """Delimiter and column layout of a delimited interaction file."""

    delimiter: str = ","
    user_column: int = 0
    item_column: int = 1
    rating_column: Optional[int] = None
    rating_threshold: Optional[float] = None
    has_header: bool = False

    def required_columns(self) -> List[int]:
        columns = [self.user_column, self.item_column]
        if self.rating_column is not None:
            columns.append(self.rating_column)
        return columns


# Layouts of the public benchmark dumps
FORMAT_PRESETS: Dict[str, InteractionFormat] = {
    "movielens-1m": InteractionFormat(delimiter="::", user_column=0, item_column=1, rating_column=2),
    "movielens-100k": InteractionFormat(delimiter="\t", user_column=0, item_column=1, rating_column=2),
    "gowalla": InteractionFormat(delimiter="\t", user_column=0, item_column=4),
    "csv": InteractionFormat(),
}


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    weight: Optional[float] = None


@dataclass(frozen=True)
class IngestReport:
    rows_read: int
    rows_kept: int
    malformed: int
    below_threshold: int
    duplicates: int

    def to_dict(self) -> Dict[str, int]:
        return {
            "rows_read": self.rows_read,
            "rows_kept": self.rows_kept,
            "malformed": self.malformed,
            "below_threshold": self.below_threshold,
            "duplicates": self.duplicates,
        }


@dataclass(frozen=True)
class IdMaps:
    """Bijections between external tokens and dense internal indices."""

    user_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    _user_index: Dict[str, int] = field(init=False, repr=False, compare=False)
    _item_index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        user_index = {token: idx for idx, token in enumerate(self.user_ids)}
        item_index = {token: idx for idx, token in enumerate(self.item_ids)}
        if len(user_index) != len(self.user_ids) or len(item_index) != len(self.item_ids):
            raise DatasetError("External ids must be unique")
        object.__setattr__(self, "_user_index", user_index)
        object.__setattr__(self, "_item_index", item_index)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def user_index(self, token: str) -> int:
        return self._user_index[token]

    def item_index(self, token: str) -> int:
        return self._item_index[token]

    def user_indices(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self._user_index[t] for t in tokens), dtype=np.int64, count=len(tokens))

    def item_indices(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self._item_index[t] for t in tokens), dtype=np.int64, count=len(tokens))


@dataclass(frozen=True, eq=False)
class InteractionLog:
    """
    Deduplicated positive interactions over a dense N x M index space.

    `matrix` is a binary CSR matrix with sorted column indices, so row u lists
    I_u in ascending order; the CSC transpose gives U_i* the same way.
    `weights`, when present, is aligned with the CSR storage order.
    """

    matrix: sp.csr_matrix
    id_maps: IdMaps
    weights: Optional[np.ndarray] = None
    report: Optional[IngestReport] = None
    _by_item: sp.csc_matrix = field(init=False, repr=False)
    _keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_users, n_items = self.matrix.shape
        if n_users != self.id_maps.n_users or n_items != self.id_maps.n_items:
            raise DatasetError(
                f"Matrix shape {self.matrix.shape} does not match id maps "
                f"({self.id_maps.n_users}, {self.id_maps.n_items})"
            )
        if self.weights is not None and len(self.weights) != self.matrix.nnz:
            raise DatasetError("Weights must align with the stored interactions")
        by_item = self.matrix.tocsc()
        by_item.sort_indices()
        users = np.repeat(np.arange(n_users, dtype=np.int64), np.diff(self.matrix.indptr))
        keys = users * max(n_items, 1) + self.matrix.indices.astype(np.int64)
        object.__setattr__(self, "_by_item", by_item)
        object.__setattr__(self, "_keys", keys)

    @classmethod
    def from_pairs(
        cls,
        users: Sequence[int],
        items: Sequence[int],
        id_maps: IdMaps,
        weights: Optional[Sequence[float]] = None,
        report: Optional[IngestReport] = None,
    ) -> "InteractionLog":
        """Build a log from index pairs; repeated pairs keep their first occurrence."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise DatasetError("users and items must have the same length")
        n_users, n_items = id_maps.n_users, id_maps.n_items
        if users.size and (users.min() < 0 or users.max() >= n_users):
            raise DatasetError("User index out of range")
        if items.size and (items.min() < 0 or items.max() >= n_items):
            raise DatasetError("Item index out of range")

        order = np.lexsort((items, users))
        users, items = users[order], items[order]
        keep = np.ones(users.size, dtype=bool)
        if users.size > 1:
            keep[1:] = (users[1:] != users[:-1]) | (items[1:] != items[:-1])
        users, items = users[keep], items[keep]
        kept_weights = None
        if weights is not None:
            kept_weights = np.asarray(weights, dtype=np.float64)[order][keep]

        indptr = np.zeros(n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(users, minlength=n_users), out=indptr[1:])
        matrix = sp.csr_matrix(
            (np.ones(users.size, dtype=np.float64), items, indptr),
            shape=(n_users, n_items),
        )
        return cls(matrix=matrix, id_maps=id_maps, weights=kept_weights, report=report)

    @property
    def n_users(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_items(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_interactions(self) -> int:
        return int(self.matrix.nnz)

    def is_empty(self) -> bool:
        return self.matrix.nnz == 0

    def by_user(self, u: int) -> np.ndarray:
        start, end = self.matrix.indptr[u], self.matrix.indptr[u + 1]
        return self.matrix.indices[start:end]

    def by_item(self, i: int) -> np.ndarray:
        start, end = self._by_item.indptr[i], self._by_item.indptr[i + 1]
        return self._by_item.indices[start:end]

    @property
    def item_matrix(self) -> sp.csc_matrix:
        return self._by_item

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.matrix.indptr).astype(np.int64)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self._by_item.indptr).astype(np.int64)

    def pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """(users, items) in CSR order."""
        users = np.repeat(np.arange(self.n_users, dtype=np.int64), np.diff(self.matrix.indptr))
        return users, self.matrix.indices.astype(np.int64)

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorised membership test for (u, i) pairs."""
        query = np.asarray(users, dtype=np.int64) * max(self.n_items, 1) + np.asarray(items, dtype=np.int64)
        if self._keys.size == 0:
            return np.zeros(query.shape, dtype=bool)
        pos = np.searchsorted(self._keys, query)
        pos = np.minimum(pos, self._keys.size - 1)
        return self._keys[pos] == query

    def interactions(self) -> List[Interaction]:
        users, items = self.pairs()
        weights = self.weights if self.weights is not None else [None] * users.size
        return [
            Interaction(self.id_maps.user_ids[u], self.id_maps.item_ids[i], None if w is None else float(w))
            for u, i, w in zip(users, items, weights)
        ]


@dataclass(frozen=True)
class SplitBundle:
    train: InteractionLog
    validation: InteractionLog
    test: InteractionLog
    seed: int
    ratios: Tuple[float, float, float]

    def members(self) -> Dict[str, InteractionLog]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def write(self, directory: Union[str, os.PathLike], delimiter: str = "\t") -> Path:
        """Write the three member logs plus a JSON manifest for reproducibility."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        id_maps = self.train.id_maps
        for name, log in self.members().items():
            users, items = log.pairs()
            frame = pd.DataFrame({
                "user": [id_maps.user_ids[u] for u in users],
                "item": [id_maps.item_ids[i] for i in items],
            })
            if log.weights is not None:
                frame["weight"] = log.weights
            frame.to_csv(out / f"{name}.tsv", sep=delimiter, header=False, index=False)
        manifest = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "counts": {name: log.n_interactions for name, log in self.members().items()},
            "n_users": id_maps.n_users,
            "n_items": id_maps.n_items,
            "delimiter": delimiter,
            "user_ids": list(id_maps.user_ids),
            "item_ids": list(id_maps.item_ids),
        }
        with open(out / SPLIT_MANIFEST, "w") as f:
            json.dump(manifest, f, indent=2)
        logger.info(f"Split bundle written to '{out}' ({manifest['counts']})")
        return out


@dataclass(frozen=True)
class PopularityStats:
    q_star: np.ndarray
    user_degree: np.ndarray
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.gamma is not None and not np.isfinite(self.gamma):
            raise ValueError(f"gamma must be finite, got {self.gamma}")

    def with_gamma(self, gamma: float) -> "PopularityStats":
        return PopularityStats(q_star=self.q_star, user_degree=self.user_degree, gamma=float(gamma))


def _open_source(source: Source) -> Union[str, BinaryIO]:
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(source)
    if isinstance(source, (str, os.PathLike)):
        return os.fspath(source)
    return source


def parse_interactions(source: Source, fmt: InteractionFormat = InteractionFormat()) -> InteractionLog:
    """
    Read delimited (user, item[, rating]) rows into a deduplicated, densely indexed log.

    Rows missing a required field or carrying a non-numeric rating are counted as
    malformed and dropped; rows under the rating threshold are dropped too.
    Internal indices follow first appearance in the source.
    """
    if fmt.rating_threshold is not None and fmt.rating_column is None:
        logger.warning("rating_threshold ignored: no rating column configured")
    bad_lines: List[List[str]] = []

    def _on_bad_line(fields: List[str]) -> None:
        bad_lines.append(fields)
        return None

    sep = re.escape(fmt.delimiter) if len(fmt.delimiter) > 1 else fmt.delimiter
    try:
        frame = pd.read_csv(
            _open_source(source),
            sep=sep,
            header=0 if fmt.has_header else None,
            dtype=str,
            engine="python",
            keep_default_na=False,
            skip_blank_lines=True,
            on_bad_lines=_on_bad_line,
        )
    except pd.errors.EmptyDataError as e:
        raise DatasetError("No valid rows in interaction source") from e
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as e:
        logger.error(f"Could not read interaction source: {e}")
        raise DatasetError(f"Unreadable interaction source: {e}") from e

    n_columns = frame.shape[1]
    if max(fmt.required_columns()) >= n_columns:
        raise DatasetError(
            f"Column layout {fmt.required_columns()} out of range for {n_columns} columns"
        )

    users = frame.iloc[:, fmt.user_column].str.strip()
    items = frame.iloc[:, fmt.item_column].str.strip()
    valid = users.notna() & items.notna() & (users != "") & (items != "")

    ratings = None
    if fmt.rating_column is not None:
        ratings = pd.to_numeric(frame.iloc[:, fmt.rating_column], errors="coerce")
        valid &= ratings.notna()

    kept = valid
    below_threshold = 0
    if ratings is not None and fmt.rating_threshold is not None:
        below = valid & (ratings < fmt.rating_threshold)
        below_threshold = int(below.sum())
        kept = valid & ~below

    malformed = int((~valid).sum()) + len(bad_lines)
    if malformed:
        logger.warning(f"Dropped {malformed} malformed interaction rows")

    rows = pd.DataFrame({"user": users[kept], "item": items[kept]})
    if ratings is not None:
        rows["weight"] = ratings[kept].astype(np.float64)
    duplicates = int(rows.duplicated(subset=["user", "item"]).sum())
    rows = rows.drop_duplicates(subset=["user", "item"], keep="first")
    if rows.empty:
        raise DatasetError("No valid rows in interaction source")

    user_codes, user_tokens = pd.factorize(rows["user"], sort=False)
    item_codes, item_tokens = pd.factorize(rows["item"], sort=False)
    id_maps = IdMaps(tuple(str(t) for t in user_tokens), tuple(str(t) for t in item_tokens))
    report = IngestReport(
        rows_read=len(frame) + len(bad_lines),
        rows_kept=len(rows),
        malformed=malformed,
        below_threshold=below_threshold,
        duplicates=duplicates,
    )
    logger.info(
        f"Parsed {report.rows_kept} interactions "
        f"({id_maps.n_users} users, {id_maps.n_items} items) from {report.rows_read} rows"
    )
    weights = rows["weight"].to_numpy() if "weight" in rows else None
    return InteractionLog.from_pairs(user_codes, item_codes, id_maps, weights=weights, report=report)


def validate_ratios(ratios: Sequence[float]) -> Tuple[float, float, float]:
    if len(ratios) != 3:
        raise DatasetError(f"Expected three split ratios, got {len(ratios)}")
    values = tuple(float(r) for r in ratios)
    if any(not np.isfinite(r) or r <= 0 for r in values):
        raise DatasetError(f"Split ratios must be positive, got {values}")
    if abs(sum(values) - 1.0) > RATIO_TOLERANCE:
        raise DatasetError(f"Split ratios must sum to 1, got {sum(values):.12g}")
    return values


def split_counts(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    """Floor each bucket, then hand the remainder to the largest fractional parts (train > val > test on ties)."""
    exact = np.asarray(ratios, dtype=np.float64) * n
    counts = np.floor(exact + RATIO_TOLERANCE).astype(np.int64)
    remainder = int(n - counts.sum())
    fractions = exact - counts
    order = sorted(range(len(counts)), key=lambda b: (-fractions[b], b))
    for b in order[:remainder]:
        counts[b] += 1
    return tuple(int(c) for c in counts)


def stratified_split(
    log: InteractionLog,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitBundle:
    """Shuffle each item's interactions with a seeded generator and cut them by `ratios`."""
    ratios = validate_ratios(ratios)
    if log.is_empty():
        raise DatasetError("Cannot split an empty interaction log")

    rng = np.random.default_rng(seed)
    by_item = log.item_matrix
    item_weights = None
    if log.weights is not None:
        weighted = sp.csr_matrix((log.weights, log.matrix.indices, log.matrix.indptr), shape=log.matrix.shape)
        weighted = weighted.tocsc()
        weighted.sort_indices()
        item_weights = weighted.data

    parts_users: List[List[np.ndarray]] = [[], [], []]
    parts_items: List[List[np.ndarray]] = [[], [], []]
    parts_weights: List[List[np.ndarray]] = [[], [], []]
    for i in range(log.n_items):
        start, end = by_item.indptr[i], by_item.indptr[i + 1]
        n = end - start
        if n == 0:
            continue
        perm = rng.permutation(n)
        users = by_item.indices[start:end][perm]
        weights = item_weights[start:end][perm] if item_weights is not None else None
        offset = 0
        for bucket, count in enumerate(split_counts(n, ratios)):
            parts_users[bucket].append(users[offset:offset + count])
            parts_items[bucket].append(np.full(count, i, dtype=np.int64))
            if weights is not None:
                parts_weights[bucket].append(weights[offset:offset + count])
            offset += count

    members = []
    for bucket in range(3):
        users = np.concatenate(parts_users[bucket]) if parts_users[bucket] else np.empty(0, np.int64)
        items = np.concatenate(parts_items[bucket]) if parts_items[bucket] else np.empty(0, np.int64)
        weights = np.concatenate(parts_weights[bucket]) if item_weights is not None and parts_weights[bucket] else None
        if item_weights is not None and weights is None:
            weights = np.empty(0, np.float64)
        members.append(InteractionLog.from_pairs(users, items, log.id_maps, weights=weights))

    bundle = SplitBundle(train=members[0], validation=members[1], test=members[2], seed=seed, ratios=ratios)
    logger.info(
        f"Split {log.n_interactions} interactions into train={bundle.train.n_interactions} "
        f"validation={bundle.validation.n_interactions} test={bundle.test.n_interactions} (seed={seed})"
    )
    return bundle


def read_split_bundle(directory: Union[str, os.PathLike]) -> SplitBundle:
    """Load a bundle previously written by SplitBundle.write."""
    root = Path(directory)
    try:
        with open(root / SPLIT_MANIFEST, "r") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Could not read split manifest in '{root}': {e}") from e

    id_maps = IdMaps(tuple(manifest["user_ids"]), tuple(manifest["item_ids"]))
    members = {}
    for name in SPLIT_NAMES:
        try:
            frame = pd.read_csv(
                root / f"{name}.tsv", sep=manifest["delimiter"], header=None, dtype=str, keep_default_na=False
            )
        except pd.errors.EmptyDataError:
            members[name] = InteractionLog.from_pairs([], [], id_maps)
            continue
        weights = frame.iloc[:, 2].astype(np.float64).to_numpy() if frame.shape[1] > 2 else None
        members[name] = InteractionLog.from_pairs(
            id_maps.user_indices(list(frame.iloc[:, 0])),
            id_maps.item_indices(list(frame.iloc[:, 1])),
            id_maps,
            weights=weights,
        )
    return SplitBundle(
        train=members["train"],
        validation=members["validation"],
        test=members["test"],
        seed=int(manifest["seed"]),
        ratios=tuple(manifest["ratios"]),
    )


def popularity(log: InteractionLog) -> PopularityStats:
    """Observed item popularity Q_i* and user degree |I_u|; gamma left unset."""
    return PopularityStats(q_star=log.item_degrees(), user_degree=log.user_degrees())
