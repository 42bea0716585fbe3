"""Triplet dataset loading, dictionaries, adjacency and batch iteration.

Datasets are three tab-separated files (train.txt / valid.txt / test.txt),
one ``head<TAB>relation<TAB>tail`` triplet per line, UTF-8, LF or CRLF.
Indices are assigned by first appearance scanning train, then valid, then
test, so a given file ordering always produces the same dictionaries.

Message passing uses both edge directions: for a relation index ``r`` in
``[0, n_relations)``, ``neighbors(i, r)`` is the set of heads pointing at
``i``; the synthetic index ``r + n_relations`` addresses the inverse
direction (tails that ``i`` points at).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ParseError

HEAD = 0  # corrupt the head entity
TAIL = 1  # corrupt the tail entity

SPLIT_FILES = {"train": "train.txt", "valid": "valid.txt", "test": "test.txt"}


@dataclass
class PositiveBatch:
    """A chunk of positive triplets plus, per triplet, which end to corrupt."""

    triplets: np.ndarray  # (B, 3) int64 rows (h, r, t)
    sides: np.ndarray     # (B,) uint8, HEAD or TAIL

    def __len__(self) -> int:
        return len(self.triplets)


class TripletStore:
    """Immutable container for one dataset: dictionaries, splits, indexes."""

    def __init__(self, entity_names, relation_names, train, valid, test):
        self.entity_names: list[str] = list(entity_names)
        self.relation_names: list[str] = list(relation_names)
        self.entity_index = {name: i for i, name in enumerate(self.entity_names)}
        self.relation_index = {name: i for i, name in enumerate(self.relation_names)}
        self.train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
        self.valid = np.asarray(valid, dtype=np.int64).reshape(-1, 3)
        self.test = np.asarray(test, dtype=np.int64).reshape(-1, 3)

        self.filter_index: frozenset[tuple[int, int, int]] = frozenset(
            map(tuple, np.concatenate([self.train, self.valid, self.test])))

        h, t = self.train[:, 0], self.train[:, 2]
        deg = np.bincount(h, minlength=self.n_entities)
        deg += np.bincount(t[t != h], minlength=self.n_entities)
        self.degree = deg

        # Directed adjacency from the train split only, sorted by
        # (directed relation, target entity) for both queries and the
        # encoder's aggregation plan.
        r = self.train[:, 1]
        dir_rel = np.concatenate([r, r + self.n_relations])
        target = np.concatenate([t, h])
        source = np.concatenate([h, t])
        order = np.lexsort((source, target, dir_rel))
        self._adj_rel = dir_rel[order]
        self._adj_target = target[order]
        self._adj_source = source[order]
        self._adj_key = self._adj_rel * self.n_entities + self._adj_target

        self._known_tails: dict[tuple[int, int], np.ndarray] | None = None
        self._known_heads: dict[tuple[int, int], np.ndarray] | None = None

    # -- basic facts --------------------------------------------------------

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLIT_FILES:
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)

    def triplet_names(self, triplet) -> tuple[str, str, str]:
        h, r, t = (int(x) for x in triplet)
        return self.entity_names[h], self.relation_names[r], self.entity_names[t]

    # -- adjacency -----------------------------------------------------------

    def neighbors(self, i: int, r: int) -> set[int]:
        """Neighbor set of entity ``i`` under directed relation ``r``.

        For ``r < n_relations`` these are in-neighbors (heads of train
        triplets whose tail is ``i``); ``r + n_relations`` addresses the
        inverse direction.
        """
        if not 0 <= i < self.n_entities:
            raise IndexError(f"entity index {i} out of range")
        if not 0 <= r < 2 * self.n_relations:
            raise IndexError(f"directed relation index {r} out of range")
        key = r * self.n_entities + i
        lo = np.searchsorted(self._adj_key, key, side="left")
        hi = np.searchsorted(self._adj_key, key, side="right")
        return set(self._adj_source[lo:hi].tolist())

    def adjacency_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(directed relation, target, source) rows sorted by (relation, target)."""
        return self._adj_rel, self._adj_target, self._adj_source

    def is_known(self, h: int, r: int, t: int) -> bool:
        return (h, r, t) in self.filter_index

    def known_tails(self, h: int, r: int) -> np.ndarray:
        if self._known_tails is None:
            index: dict[tuple[int, int], list[int]] = {}
            for hh, rr, tt in self.filter_index:
                index.setdefault((hh, rr), []).append(tt)
            self._known_tails = {k: np.array(sorted(v)) for k, v in index.items()}
        return self._known_tails.get((h, r), np.empty(0, dtype=np.int64))

    def known_heads(self, r: int, t: int) -> np.ndarray:
        if self._known_heads is None:
            index: dict[tuple[int, int], list[int]] = {}
            for hh, rr, tt in self.filter_index:
                index.setdefault((rr, tt), []).append(hh)
            self._known_heads = {k: np.array(sorted(v)) for k, v in index.items()}
        return self._known_heads.get((r, t), np.empty(0, dtype=np.int64))

    # -- sampling ------------------------------------------------------------

    def batches(self, split: str = "train", batch_size: int = 1000, seed: int = 0):
        """Yield PositiveBatch chunks of a seeded permutation of a split.

        Corruption sides are drawn uniformly from the same seeded stream,
        so a seed fully determines the epoch.
        """
        if batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        yield from self.batches_rng(np.random.default_rng(seed), split, batch_size)

    def batches_rng(self, rng: np.random.Generator, split: str = "train",
                    batch_size: int = 1000):
        triplets = self.split(split)
        n = len(triplets)
        perm = rng.permutation(n)
        sides = rng.integers(0, 2, size=n, dtype=np.int64).astype(np.uint8)
        for start in range(0, n, batch_size):
            chunk = perm[start:start + batch_size]
            yield PositiveBatch(triplets[chunk], sides[start:start + len(chunk)])

    def popularity_distribution(self, exponent: float = 0.75) -> np.ndarray:
        """p(i) proportional to degree(i)**exponent over positive-degree entities.

        Falls back to uniform over all entities when every degree is zero.
        """
        if exponent < 0:
            raise ContractError("popularity exponent must be >= 0")
        weights = np.zeros(self.n_entities, dtype=np.float64)
        positive = self.degree > 0
        weights[positive] = self.degree[positive].astype(np.float64) ** exponent
        total = weights.sum()
        if total == 0.0:
            return np.full(self.n_entities, 1.0 / self.n_entities)
        return weights / total


def _read_split(path: Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ParseError(path, line_no,
                                 "expected head<TAB>relation<TAB>tail")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def load_dataset(directory) -> TripletStore:
    """Load train/valid/test files from ``directory`` into a TripletStore."""
    directory = Path(directory)
    raw: dict[str, list[tuple[str, str, str]]] = {}
    for split, filename in SPLIT_FILES.items():
        path = directory / filename
        if not path.exists():
            raise DataError(f"missing dataset file: {path}")
        raw[split] = _read_split(path)
    if not raw["train"]:
        raise DataError(f"empty train split in {directory}")

    entity_names: list[str] = []
    relation_names: list[str] = []
    entity_index: dict[str, int] = {}
    relation_index: dict[str, int] = {}

    def entity_id(name: str) -> int:
        if name not in entity_index:
            entity_index[name] = len(entity_names)
            entity_names.append(name)
        return entity_index[name]

    def relation_id(name: str) -> int:
        if name not in relation_index:
            relation_index[name] = len(relation_names)
            relation_names.append(name)
        return relation_index[name]

    splits: dict[str, list[tuple[int, int, int]]] = {}
    for split in ("train", "valid", "test"):
        splits[split] = [(entity_id(h), relation_id(r), entity_id(t))
                         for h, r, t in raw[split]]

    return TripletStore(entity_names, relation_names,
                        np.array(splits["train"], dtype=np.int64).reshape(-1, 3),
                        np.array(splits["valid"], dtype=np.int64).reshape(-1, 3),
                        np.array(splits["test"], dtype=np.int64).reshape(-1, 3))


def write_dataset(store: TripletStore, directory) -> None:
    """Write a store back to the three-file on-disk format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, filename in SPLIT_FILES.items():
        with open(directory / filename, "w", encoding="utf-8") as fh:
            for triplet in store.split(split):
                fh.write("\t".join(store.triplet_names(triplet)) + "\n")
