"""Anisotropic multi-hop propagation over typed edges.

One hop, for every destination ``v`` with in-neighbours ``u``::

    e_vu   = combine(rel[types(u, v)])          # mean or sum of type rows
    m_vu   = e_vu * c[u]                        # elementwise modulation
    q_vu   = ||m_vu||_2
    w_vu   = softmax_u(q_vu)                    # over v's in-edges only
    c'[v]  = sum_u w_vu * m_vu                  # ascending u

Destinations with no in-edges get zeros (``isolated_policy="zero"``) or keep
their previous row (``"carry"``). Storage is float32; each destination row
is accumulated in float64. Rows are independent, so the result does not
depend on the number of worker threads.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numba
import numpy as np
from numba import njit, prange

from . import ukgf
from .graph import HeteroGraph, add_reverse_edges

# The bundled TBB is too old for numba; skip straight to OpenMP.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

IsolatedPolicy = Literal["zero", "carry"]
TypeCombine = Literal["mean", "sum"]


class PropagationError(ValueError):
    pass


@dataclass(frozen=True)
class ApmConfig:
    num_hops: int = 3
    isolated_policy: IsolatedPolicy = "zero"
    type_combine: TypeCombine = "mean"
    add_reverse: bool = False

    def __post_init__(self):
        if self.num_hops < 1:
            raise PropagationError("num_hops must be >= 1")
        if self.isolated_policy not in ("zero", "carry"):
            raise PropagationError(f"unknown isolated_policy {self.isolated_policy!r}")
        if self.type_combine not in ("mean", "sum"):
            raise PropagationError(f"unknown type_combine {self.type_combine!r}")


@dataclass
class PropagationStack:
    hops: list[np.ndarray] = field(default_factory=list)

    @property
    def num_hops(self) -> int:
        return len(self.hops) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.hops[0].shape

    def __len__(self) -> int:
        return len(self.hops)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.hops[k]

    def save(self, directory: str | os.PathLike) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, h in enumerate(self.hops):
            p = directory / f"hop_{k}.ukgf"
            ukgf.write_matrix(p, h)
            paths.append(p)
        return paths

    @classmethod
    def load(cls, directory: str | os.PathLike, num_hops: int | None = None,
             mmap: bool = False) -> "PropagationStack":
        directory = Path(directory)
        if num_hops is None:
            num_hops = sum(1 for _ in directory.glob("hop_*.ukgf")) - 1
        reader = ukgf.open_memmap if mmap else ukgf.read_matrix
        return cls([reader(directory / f"hop_{k}.ukgf") for k in range(num_hops + 1)])


def edge_embedding(rel_table: np.ndarray, types, combine: TypeCombine = "mean") -> np.ndarray:
    types = np.asarray(types, dtype=np.int64)
    if types.size == 0:
        raise PropagationError("empty type list")
    if types.min() < 0 or types.max() >= rel_table.shape[0]:
        raise PropagationError("edge type id out of range")
    rows = np.asarray(rel_table, dtype=np.float64)[types]
    total = rows.sum(axis=0)
    return total / types.size if combine == "mean" else total


# --- sparse kernel -----------------------------------------------------------

@njit(cache=True, inline="always")
def _fill_edge_embedding(e, rel, type_ids, t0, t1, mean):
    d = e.shape[0]
    for k in range(d):
        e[k] = 0.0
    for t in range(t0, t1):
        ty = type_ids[t]
        for k in range(d):
            e[k] += rel[ty, k]
    if mean:
        inv = 1.0 / (t1 - t0)
        for k in range(d):
            e[k] *= inv


@njit(parallel=True, cache=True)
def _hop_kernel(indptr, src, type_ptr, type_ids, rel, c, out, v0, v1, mean, carry, weights):
    d = c.shape[1]
    want_weights = weights.shape[0] > 0
    for v in prange(v0, v1):
        row = v - v0
        start = indptr[v]
        end = indptr[v + 1]
        if start == end:
            for k in range(d):
                out[row, k] = c[v, k] if carry else 0.0
            continue
        e = np.empty(d)
        acc = np.zeros(d)
        scores = np.empty(end - start)
        qmax = -np.inf
        for j in range(start, end):
            _fill_edge_embedding(e, rel, type_ids, type_ptr[j], type_ptr[j + 1], mean)
            u = src[j]
            s = 0.0
            for k in range(d):
                m = e[k] * np.float64(c[u, k])
                s += m * m
            q = math.sqrt(s)
            scores[j - start] = q
            if q > qmax:
                qmax = q
        z = 0.0
        for i in range(end - start):
            scores[i] = math.exp(scores[i] - qmax)
            z += scores[i]
        for j in range(start, end):
            w = scores[j - start] / z
            if want_weights:
                weights[j] = w
            _fill_edge_embedding(e, rel, type_ids, type_ptr[j], type_ptr[j + 1], mean)
            u = src[j]
            for k in range(d):
                acc[k] += w * (e[k] * np.float64(c[u, k]))
        for k in range(d):
            out[row, k] = acc[k]


@contextlib.contextmanager
def worker_threads(workers: int | None):
    """Temporarily set the numba thread count (``None`` keeps the current one)."""
    if workers is None:
        yield
        return
    workers = max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS))
    previous = numba.get_num_threads()
    numba.set_num_threads(workers)
    try:
        yield
    finally:
        numba.set_num_threads(previous)


def _check_inputs(g: HeteroGraph, rel_table: np.ndarray, c: np.ndarray) -> None:
    if c.ndim != 2 or c.shape[0] != g.node_count:
        raise PropagationError(f"features must have {g.node_count} rows, got shape {c.shape}")
    if rel_table.ndim != 2 or rel_table.shape[0] < g.edge_type_count:
        raise PropagationError("relation table needs one row per edge type")
    if rel_table.shape[1] != c.shape[1]:
        raise PropagationError(
            f"relation dim {rel_table.shape[1]} != feature dim {c.shape[1]}")
    if not np.isfinite(c).all() or not np.isfinite(rel_table).all():
        raise PropagationError("non-finite input")


def _run_block(g, rel64, c, out, v0, v1, cfg: ApmConfig, weights=None):
    if weights is None:
        weights = np.empty(0, dtype=np.float64)
    _hop_kernel(g.indptr, g.src, g.type_ptr, g.type_ids, rel64, c, out, v0, v1,
                cfg.type_combine == "mean", cfg.isolated_policy == "carry", weights)


def propagate_one_hop(g: HeteroGraph, rel_table: np.ndarray, c_k: np.ndarray,
                      cfg: ApmConfig = ApmConfig(), workers: int | None = None) -> np.ndarray:
    """One propagation step on ``g`` as given (``cfg.add_reverse`` is not applied here)."""
    _check_inputs(g, rel_table, c_k)
    rel64 = np.ascontiguousarray(rel_table, dtype=np.float64)
    out = np.empty(c_k.shape, dtype=np.float32)
    with worker_threads(workers):
        _run_block(g, rel64, np.ascontiguousarray(c_k, dtype=np.float32), out, 0, g.node_count, cfg)
    return out


def attention_weights(g: HeteroGraph, rel_table: np.ndarray, c_k: np.ndarray,
                      cfg: ApmConfig = ApmConfig()) -> np.ndarray:
    """Per stored pair softmax coefficient used by one hop from ``c_k``."""
    _check_inputs(g, rel_table, c_k)
    weights = np.zeros(g.edge_count, dtype=np.float64)
    out = np.empty(c_k.shape, dtype=np.float32)
    _run_block(g, np.ascontiguousarray(rel_table, dtype=np.float64),
               np.ascontiguousarray(c_k, dtype=np.float32), out, 0, g.node_count, cfg, weights)
    return weights


def propagate(g: HeteroGraph, rel_table: np.ndarray, x: np.ndarray,
              cfg: ApmConfig = ApmConfig(), workers: int | None = None) -> PropagationStack:
    x = np.asarray(x)
    if cfg.add_reverse:
        g = add_reverse_edges(g)
    _check_inputs(g, rel_table, x)
    rel64 = np.ascontiguousarray(rel_table, dtype=np.float64)
    hops = [x]
    with worker_threads(workers):
        for _ in range(cfg.num_hops):
            out = np.empty(x.shape, dtype=np.float32)
            _run_block(g, rel64, np.ascontiguousarray(hops[-1], dtype=np.float32), out,
                       0, g.node_count, cfg)
            hops.append(out)
    return PropagationStack(hops)


# --- dense reference -------------------------------------------------------------

def dense_oracle(g: HeteroGraph, rel_table: np.ndarray, x: np.ndarray,
                 cfg: ApmConfig = ApmConfig(), max_nodes: int = 200) -> PropagationStack:
    """Reference propagation using explicit n x n x d tensors.

    Builds the relation-aware adjacency ``A[v, u, :]`` (destination-major),
    lifts hop features to ``H[v, u, :] = c[u]``, forms ``B = A * H``, takes
    L2 norms over the last axis, softmaxes each row over existing edges and
    contracts over sources. Only usable on tiny graphs.
    """
    if g.node_count > max_nodes:
        raise PropagationError(f"dense oracle limited to {max_nodes} nodes")
    if cfg.add_reverse:
        g = add_reverse_edges(g)
    n, d = x.shape
    rel = np.asarray(rel_table, dtype=np.float64)
    adj = np.zeros((n, n, d))
    mask = np.zeros((n, n), dtype=bool)
    for u, v, types in g.edges():
        e = rel[types].sum(axis=0)
        if cfg.type_combine == "mean":
            e = e / len(types)
        adj[v, u] = e
        mask[v, u] = True
    has_in = mask.any(axis=1)

    hops = [np.asarray(x)]
    for _ in range(cfg.num_hops):
        c = hops[-1].astype(np.float64)
        lifted = np.broadcast_to(c[None, :, :], (n, n, d))
        messages = adj * lifted
        scores = np.linalg.norm(messages, axis=2)
        masked = np.where(mask, scores, -np.inf)
        row_max = np.where(has_in, masked.max(axis=1, initial=-np.inf), 0.0)
        expd = np.where(mask, np.exp(masked - row_max[:, None]), 0.0)
        denom = expd.sum(axis=1)
        coef = np.divide(expd, denom[:, None], out=np.zeros_like(expd), where=has_in[:, None])
        nxt = np.einsum("vu,vud->vd", coef, messages)
        if cfg.isolated_policy == "carry":
            nxt[~has_in] = c[~has_in]
        hops.append(nxt.astype(np.float32))
    return PropagationStack(hops)


# --- out-of-core ----------------------------------------------------------------

def _inputs_digest(g: HeteroGraph, rel_table: np.ndarray, x: np.ndarray, cfg: ApmConfig) -> str:
    h = hashlib.sha256()
    for a in (g.indptr, g.src, g.type_ptr, g.type_ids,
              np.ascontiguousarray(rel_table, dtype=np.float32), np.ascontiguousarray(x, dtype=np.float32)):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(json.dumps([g.node_count, g.edge_type_count, asdict(cfg)], sort_keys=True).encode())
    return h.hexdigest()


def propagate_chunked(g: HeteroGraph, rel_table: np.ndarray, x: np.ndarray, cfg: ApmConfig,
                      block_size: int, spill_dir: str | os.PathLike,
                      workers: int | None = None) -> PropagationStack:
    """Disk-backed :func:`propagate`: destination blocks, one UKGF file per hop.

    Completed hop files are reused when ``spill_dir/.chunked.json`` matches
    the current inputs, so an interrupted run resumes after its last hop.
    """
    if block_size < 1:
        raise PropagationError("block_size must be >= 1")
    if cfg.add_reverse:
        g = add_reverse_edges(g)
    _check_inputs(g, rel_table, x)
    spill = Path(spill_dir)
    spill.mkdir(parents=True, exist_ok=True)
    n, d = x.shape
    manifest = {"n": n, "d": d, "num_hops": cfg.num_hops, "config": asdict(cfg),
                "inputs_sha256": _inputs_digest(g, rel_table, x, cfg)}
    manifest_path = spill / ".chunked.json"
    previous = json.loads(manifest_path.read_text()) if manifest_path.exists() else None
    if previous != manifest:
        for stale in spill.glob("hop_*.ukgf*"):
            stale.unlink()
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    rel64 = np.ascontiguousarray(rel_table, dtype=np.float64)
    hop0 = spill / "hop_0.ukgf"
    if not _usable(hop0, n, d):
        ukgf.write_matrix(hop0, x)
    with worker_threads(workers):
        for k in range(cfg.num_hops):
            target = spill / f"hop_{k + 1}.ukgf"
            if _usable(target, n, d):
                continue
            prev = ukgf.open_memmap(spill / f"hop_{k}.ukgf")
            tmp = target.with_name(target.name + ".tmp")
            out = ukgf.create_memmap(tmp, n, d)
            for v0 in range(0, n, block_size):
                v1 = min(n, v0 + block_size)
                block = np.empty((v1 - v0, d), dtype=np.float32)
                _run_block(g, rel64, prev, block, v0, v1, cfg)
                out[v0:v1] = block
            out.flush()
            del out, prev
            os.replace(tmp, target)
    return PropagationStack.load(spill, cfg.num_hops, mmap=True)


def _usable(path: Path, n: int, d: int) -> bool:
    if not path.exists():
        return False
    try:
        return ukgf.read_header(path) == (n, d) and \
            path.stat().st_size == ukgf.HEADER_SIZE + n * d * 4
    except ukgf.UkgfError:
        return False
