"""Immutable heterogeneous graph stored destination-major.

Each destination ``v`` owns a contiguous slice ``indptr[v]:indptr[v+1]`` of
source ids (ascending). Each (src, dst) pair owns a slice of ``type_ptr``
into ``type_ids`` holding its sorted, deduplicated edge types.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np


class GraphError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    node_count: int
    edge_type_count: int
    indptr: np.ndarray  # int64[n + 1]
    src: np.ndarray  # int64[edge_count]
    type_ptr: np.ndarray  # int64[edge_count + 1]
    type_ids: np.ndarray  # int32[total type assignments]

    @property
    def edge_count(self) -> int:
        return int(self.src.shape[0])

    @cached_property
    def dst(self) -> np.ndarray:
        """Destination id of every stored pair (expanded from ``indptr``)."""
        return _frozen(np.repeat(np.arange(self.node_count, dtype=np.int64), np.diff(self.indptr)))

    @cached_property
    def in_degree(self) -> np.ndarray:
        return _frozen(np.diff(self.indptr))

    @cached_property
    def out_degree(self) -> np.ndarray:
        return _frozen(np.bincount(self.src, minlength=self.node_count).astype(np.int64))

    def pair_types(self, j: int) -> list[int]:
        return self.type_ids[self.type_ptr[j] : self.type_ptr[j + 1]].tolist()

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Expand to flat (src, dst, type) arrays, one row per type assignment."""
        counts = np.diff(self.type_ptr)
        return np.repeat(self.src, counts), np.repeat(self.dst, counts), self.type_ids.astype(np.int64)

    def edges(self) -> list[tuple[int, int, list[int]]]:
        return [(int(u), int(v), self.pair_types(j)) for j, (u, v) in enumerate(zip(self.src, self.dst))]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and self.edge_type_count == other.edge_type_count
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.type_ptr, other.type_ptr)
            and np.array_equal(self.type_ids, other.type_ids)
        )

    def __repr__(self) -> str:
        return (
            f"HeteroGraph(node_count={self.node_count}, edge_count={self.edge_count}, "
            f"edge_type_count={self.edge_type_count})"
        )


def from_triples(
    src: np.ndarray, dst: np.ndarray, types: np.ndarray, node_count: int, edge_type_count: int
) -> HeteroGraph:
    """Build from flat (src, dst, type) arrays; duplicate triples collapse."""
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    types = np.asarray(types, dtype=np.int64).ravel()
    if not (src.shape == dst.shape == types.shape):
        raise GraphError("src/dst/types length mismatch")
    if node_count < 0 or edge_type_count < 0:
        raise GraphError("counts must be non-negative")
    if src.size:
        if src.min() < 0 or src.max() >= node_count or dst.min() < 0 or dst.max() >= node_count:
            raise GraphError("node index out of range")
        if types.min() < 0 or types.max() >= edge_type_count:
            raise GraphError("edge type id out of range")

    order = np.lexsort((types, src, dst))
    src, dst, types = src[order], dst[order], types[order]
    if src.size:
        keep = np.ones(src.size, dtype=bool)
        keep[1:] = (src[1:] != src[:-1]) | (dst[1:] != dst[:-1]) | (types[1:] != types[:-1])
        src, dst, types = src[keep], dst[keep], types[keep]

    new_pair = np.ones(src.size, dtype=bool)
    if src.size:
        new_pair[1:] = (src[1:] != src[:-1]) | (dst[1:] != dst[:-1])
    pair_starts = np.flatnonzero(new_pair)
    type_ptr = np.append(pair_starts, src.size).astype(np.int64)
    pair_src = src[pair_starts]
    pair_dst = dst[pair_starts]
    indptr = np.zeros(node_count + 1, dtype=np.int64)
    np.cumsum(np.bincount(pair_dst, minlength=node_count), out=indptr[1:])

    return HeteroGraph(
        node_count=int(node_count),
        edge_type_count=int(edge_type_count),
        indptr=_frozen(indptr),
        src=_frozen(pair_src.astype(np.int64)),
        type_ptr=_frozen(type_ptr),
        type_ids=_frozen(types.astype(np.int32)),
    )


def build_graph(
    edges: Iterable[tuple[int, int, Sequence[int]]], node_count: int, edge_type_count: int
) -> HeteroGraph:
    """Build a graph from ``(src, dst, type_ids)`` rows.

    Rows repeating a (src, dst) pair are merged into one pair carrying the
    union of their types.
    """
    s, d, t = [], [], []
    for u, v, types in edges:
        types = list(types)
        if not types:
            raise GraphError(f"edge ({u}, {v}) has an empty type list")
        for ty in types:
            s.append(u)
            d.append(v)
            t.append(ty)
    return from_triples(np.array(s, dtype=np.int64), np.array(d, dtype=np.int64),
                        np.array(t, dtype=np.int64), node_count, edge_type_count)


def in_neighbors(g: HeteroGraph, v: int) -> Iterator[tuple[int, list[int]]]:
    if not 0 <= v < g.node_count:
        raise GraphError(f"node {v} out of range")
    for j in range(g.indptr[v], g.indptr[v + 1]):
        yield int(g.src[j]), g.pair_types(j)


def add_reverse_edges(g: HeteroGraph) -> HeteroGraph:
    s, d, t = g.triples()
    return from_triples(np.concatenate([s, d]), np.concatenate([d, s]), np.concatenate([t, t]),
                        g.node_count, g.edge_type_count)


def relabel(g: HeteroGraph, perm: np.ndarray) -> HeteroGraph:
    """Return the graph with node ``i`` renamed to ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    s, d, t = g.triples()
    return from_triples(perm[s], perm[d], t, g.node_count, g.edge_type_count)


def induced_subgraph(g: HeteroGraph, nodes: np.ndarray) -> HeteroGraph:
    """Keep edges with both endpoints in ``nodes``; node ``nodes[i]`` becomes ``i``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    remap = np.full(g.node_count, -1, dtype=np.int64)
    remap[nodes] = np.arange(nodes.size, dtype=np.int64)
    s, d, t = g.triples()
    keep = (remap[s] >= 0) & (remap[d] >= 0)
    return from_triples(remap[s[keep]], remap[d[keep]], t[keep], int(nodes.size), g.edge_type_count)


# --- edges.tsv -------------------------------------------------------------

def read_edges_tsv(path: str | os.PathLike, node_count: int, edge_type_count: int) -> HeteroGraph:
    s, d, t = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[2]:
                raise GraphError(f"{path}:{lineno}: expected src<TAB>dst<TAB>types")
            u, v = int(parts[0]), int(parts[1])
            for ty in parts[2].split(","):
                s.append(u)
                d.append(v)
                t.append(int(ty))
    return from_triples(np.array(s, dtype=np.int64), np.array(d, dtype=np.int64),
                        np.array(t, dtype=np.int64), node_count, edge_type_count)


def write_edges_tsv(path: str | os.PathLike, g: HeteroGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v, types in g.edges():
            fh.write(f"{u}\t{v}\t{','.join(map(str, types))}\n")
