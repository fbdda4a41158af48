"""Multi-label node annotations and the ``labels.tsv`` format."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class LabelMatrix:
    node_count: int
    class_count: int
    labels: tuple[tuple[int, ...], ...]  # per node, sorted and deduplicated

    @classmethod
    def from_lists(cls, lists: Sequence[Iterable[int]], class_count: int) -> "LabelMatrix":
        rows = []
        for i, ls in enumerate(lists):
            row = tuple(sorted(set(int(c) for c in ls)))
            if row and (row[0] < 0 or row[-1] >= class_count):
                raise ValueError(f"node {i}: class id out of range [0, {class_count})")
            rows.append(row)
        return cls(len(rows), int(class_count), tuple(rows))

    def labeled_nodes(self) -> np.ndarray:
        return np.array([i for i, row in enumerate(self.labels) if row], dtype=np.int64)

    def dense(self, nodes: np.ndarray | None = None, dtype=np.float64) -> np.ndarray:
        """0/1 indicator matrix for ``nodes`` (all nodes by default)."""
        nodes = np.arange(self.node_count) if nodes is None else np.asarray(nodes)
        out = np.zeros((len(nodes), self.class_count), dtype=dtype)
        for r, v in enumerate(nodes):
            out[r, list(self.labels[v])] = 1
        return out

    def subset(self, nodes: Sequence[int]) -> list[tuple[int, ...]]:
        return [self.labels[int(v)] for v in nodes]


def read_labels_tsv(path: str | os.PathLike, node_count: int, class_count: int) -> LabelMatrix:
    lists: list[list[int]] = [[] for _ in range(node_count)]
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            node, _, classes = line.partition("\t")
            v = int(node)
            if not 0 <= v < node_count:
                raise ValueError(f"{path}:{lineno}: node id {v} out of range")
            lists[v].extend(int(c) for c in classes.split(",") if c)
    return LabelMatrix.from_lists(lists, class_count)


def write_labels_tsv(path: str | os.PathLike, labels: LabelMatrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v, row in enumerate(labels.labels):
            if row:
                fh.write(f"{v}\t{','.join(map(str, row))}\n")
