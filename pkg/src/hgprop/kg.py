"""Knowledge-graph to heterograph construction.

Streaming extraction of complete entities from a Wikidata-style JSON dump,
feature-description templating, a deterministic hashing text embedder,
instance-of label harvesting with k-means coarsening, snowball subsampling
and random splits.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .graph import HeteroGraph, induced_subgraph
from .labels import LabelMatrix

log = logging.getLogger(__name__)

DEFAULT_SCREEN = frozenset({"external-id"})
INSTANCE_OF = "P31"


@dataclass(frozen=True)
class Claim:
    property: str
    target: str  # entity id when ``is_entity``, literal text otherwise
    is_entity: bool


@dataclass(frozen=True)
class EntityRecord:
    id: str
    label: str
    description: str
    claims: tuple[Claim, ...] = ()

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "label": self.label, "description": self.description,
            "claims": [[c.property, c.target, c.is_entity] for c in self.claims],
        }, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "EntityRecord":
        raw = json.loads(line)
        return cls(raw["id"], raw["label"], raw["description"],
                   tuple(Claim(p, t, bool(e)) for p, t, e in raw["claims"]))


@dataclass
class ParseStats:
    lines: int = 0
    malformed: int = 0
    incomplete: int = 0
    properties: int = 0
    emitted: int = 0
    screened_claims: int = 0


def read_screen_set(path: str | os.PathLike) -> frozenset[str]:
    """One property id (or datatype such as ``external-id``) per line; ``#`` comments."""
    items = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                items.add(line)
    return frozenset(items)


def _dump_documents(lines: Iterable[str], stats: ParseStats) -> Iterator[dict]:
    for line in lines:
        line = line.strip()
        if line in ("", "[", "]"):
            continue
        stats.lines += 1
        if line.endswith(","):
            line = line[:-1]
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            stats.malformed += 1
            log.warning("skipping malformed dump line %d", stats.lines)
            continue
        if not isinstance(doc, dict):
            stats.malformed += 1
            continue
        yield doc


def _english(doc: dict, key: str) -> str | None:
    value = (doc.get(key) or {}).get("en")
    if isinstance(value, dict):
        value = value.get("value")
    return value if isinstance(value, str) and value else None


def _literal(datavalue: dict) -> str:
    value = datavalue.get("value")
    kind = datavalue.get("type")
    if kind == "string":
        return str(value)
    if kind == "monolingualtext":
        return value["text"]
    if kind == "time":
        return value["time"]
    if kind == "quantity":
        return value["amount"]
    if kind == "globecoordinate":
        return f"{value['latitude']},{value['longitude']}"
    return json.dumps(value, sort_keys=True, ensure_ascii=False)


def _claims(doc: dict, screen: frozenset[str], stats: ParseStats) -> list[Claim]:
    out = []
    for prop, statements in doc["claims"].items():
        for st in statements:
            snak = st.get("mainsnak", {})
            if prop in screen or snak.get("datatype") in screen:
                stats.screened_claims += 1
                continue
            if snak.get("snaktype", "value") != "value" or "datavalue" not in snak:
                continue
            dv = snak["datavalue"]
            if dv.get("type") == "wikibase-entityid":
                out.append(Claim(prop, dv["value"]["id"], True))
            else:
                out.append(Claim(prop, _literal(dv), False))
    return out


def parse_dump(lines: Iterable[str], screen: frozenset[str] = DEFAULT_SCREEN,
               stats: ParseStats | None = None) -> Iterator[EntityRecord]:
    """Yield complete entities (English label, description and claims present).

    Claims whose property id or datatype is in ``screen`` are dropped. Lines
    that fail to parse are counted in ``stats.malformed`` and skipped.
    """
    stats = stats if stats is not None else ParseStats()
    for doc in _dump_documents(lines, stats):
        if doc.get("type") == "property":
            stats.properties += 1
            continue
        ident = doc.get("id")
        label = _english(doc, "labels")
        desc = _english(doc, "descriptions")
        if not ident or label is None or desc is None or not doc.get("claims"):
            stats.incomplete += 1
            continue
        stats.emitted += 1
        yield EntityRecord(ident, label, desc, tuple(_claims(doc, screen, stats)))


def scan_labels(lines: Iterable[str]) -> dict[str, str]:
    """English label of every document in the dump, entities and properties alike."""
    labels = {}
    for doc in _dump_documents(lines, ParseStats()):
        label = _english(doc, "labels")
        if doc.get("id") and label is not None:
            labels[doc["id"]] = label
    return labels


def reorganize_text(e: EntityRecord, label_of: Callable[[str], str | None] | Mapping[str, str]) -> str:
    lookup = label_of.get if isinstance(label_of, Mapping) else label_of
    parts = [f"{e.label} be {e.description}."]
    for c in e.claims:
        obj = (lookup(c.target) or c.target) if c.is_entity else c.target
        parts.append(f"{lookup(c.property) or c.property} {obj}.")
    return " ".join(parts)


_TOKEN_SPLIT = re.compile(r"[\W_]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def token_hash(token: str, seed: int) -> tuple[int, int]:
    """(bucket hash, sign bit) of a token under ``seed``."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=16,
                             key=int(seed).to_bytes(8, "little", signed=False)).digest()
    return int.from_bytes(digest[:8], "little"), digest[8] & 1


def embed_text(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Signed feature hashing, L2-normalised; empty text gives the zero vector."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        h, sign = token_hash(tok, seed)
        vec[h % dim] += 1.0 if sign else -1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec.astype(np.float32)


def embed_texts(texts: Iterable[str], dim: int, seed: int = 0) -> np.ndarray:
    rows = [embed_text(t, dim, seed) for t in texts]
    return np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)


def harvest_labels(records: Iterable[EntityRecord], instance_of: str = INSTANCE_OF
                   ) -> tuple[list[str], list[list[str]]]:
    """Instance-of parents per record and their union (sorted for determinism)."""
    per_entity = []
    union: set[str] = set()
    for r in records:
        parents = list(dict.fromkeys(c.target for c in r.claims
                                     if c.property == instance_of and c.is_entity))
        per_entity.append(parents)
        union.update(parents)
    return sorted(union), per_entity


@dataclass
class AnnotationMap:
    mapping: dict[str, int]
    class_count: int
    centroids: np.ndarray = field(repr=False)
    inertia_history: list[float] = field(default_factory=list, repr=False)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def lloyd_kmeans(x: np.ndarray, k: int, seed: int = 0, max_iters: int = 100
                 ) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """k-means++ seeding then Lloyd iterations; returns (assignment, centers, inertia per step)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"cannot form {k} clusters from {x.shape[0]} points")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    assign = np.full(x.shape[0], -1, dtype=np.int64)
    history = []
    for _ in range(max_iters):
        dist = _sq_dists(x, centers)
        new_assign = dist.argmin(axis=1)
        history.append(float(dist[np.arange(x.shape[0]), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its centre
                far = dist[np.arange(x.shape[0]), assign].argmax()
                centers[c] = x[far]
    return assign, centers, history


def cluster_labels(parent_ids: Sequence[str], embeddings: np.ndarray, class_count: int,
                   seed: int = 0, max_iters: int = 100) -> AnnotationMap:
    if len(parent_ids) != embeddings.shape[0]:
        raise ValueError("one embedding row per parent id required")
    assign, centers, history = lloyd_kmeans(embeddings, class_count, seed, max_iters)
    return AnnotationMap({p: int(a) for p, a in zip(parent_ids, assign)}, class_count, centers, history)


def annotate(parents: Sequence[Sequence[str]], amap: AnnotationMap) -> LabelMatrix:
    lists = []
    for i, ps in enumerate(parents):
        try:
            lists.append([amap.mapping[p] for p in ps])
        except KeyError as exc:
            raise KeyError(f"entity {i}: parent {exc.args[0]} has no cluster") from None
    return LabelMatrix.from_lists(lists, amap.class_count)


def read_annotation_map(path: str | os.PathLike, class_count: int) -> AnnotationMap:
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                parent, cls = line.rstrip("\n").split("\t")
                mapping[parent] = int(cls)
    return AnnotationMap(mapping, class_count, np.zeros((0, 0)))


def write_annotation_map(path: str | os.PathLike, amap: AnnotationMap) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for parent, cls in sorted(amap.mapping.items()):
            fh.write(f"{parent}\t{cls}\n")


# --- sampling ------------------------------------------------------------------

@dataclass
class SnowballSample:
    nodes: np.ndarray  # original ids, ascending; new id i <-> nodes[i]
    graph: HeteroGraph
    filled: bool  # True when walks could not reach target_n and uniform fill was used

    @property
    def remap(self) -> dict[int, int]:
        return {int(old): new for new, old in enumerate(self.nodes)}


def _undirected_neighbors(g: HeteroGraph) -> tuple[np.ndarray, np.ndarray]:
    a = np.concatenate([g.src, g.dst])
    b = np.concatenate([g.dst, g.src])
    order = np.lexsort((b, a))
    a, b = a[order], b[order]
    ptr = np.zeros(g.node_count + 1, dtype=np.int64)
    np.cumsum(np.bincount(a, minlength=g.node_count), out=ptr[1:])
    return ptr, b


def snowball_sample(g: HeteroGraph, target_n: int, high_degree_fraction: float = 0.5,
                    num_seeds: int | None = None, restart_prob: float = 0.15,
                    walk_length: int = 1000, seed: int = 0) -> SnowballSample:
    """Random-walk snowball sample of exactly ``target_n`` nodes.

    Seeds are the highest total-degree nodes (``high_degree_fraction`` of
    ``num_seeds``) plus uniformly drawn ones. Each seed starts an undirected
    walk with restarts to the seed; a walk ends after ``walk_length`` steps
    without discovering a node. When seeds run out, fresh seeds are drawn
    uniformly from unvisited nodes.
    """
    n = g.node_count
    if not 1 <= target_n <= n:
        raise ValueError(f"target_n must be in [1, {n}]")
    if not 0.0 <= high_degree_fraction <= 1.0:
        raise ValueError("high_degree_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    num_seeds = num_seeds or max(1, min(n, target_n // 10 or 1))
    n_high = int(round(high_degree_fraction * num_seeds))
    degree = g.in_degree + g.out_degree
    by_degree = np.lexsort((np.arange(n), -degree))
    seeds = [int(v) for v in by_degree[:n_high]]
    chosen = set(seeds)
    for v in rng.permutation(n):
        if len(seeds) >= num_seeds:
            break
        if int(v) not in chosen:
            seeds.append(int(v))
            chosen.add(int(v))

    ptr, nbrs = _undirected_neighbors(g)
    visited = np.zeros(n, dtype=bool)
    order: list[int] = []
    filled = False

    def visit(v: int) -> None:
        if not visited[v]:
            visited[v] = True
            order.append(v)

    pending = list(seeds)
    while len(order) < target_n:
        if pending:
            start = pending.pop(0)
        else:
            filled = True
            start = int(rng.choice(np.flatnonzero(~visited)))
        visit(start)
        cur, idle = start, 0
        while len(order) < target_n and idle < walk_length:
            lo, hi = ptr[cur], ptr[cur + 1]
            if lo == hi:
                break
            if cur != start and rng.random() < restart_prob:
                cur = start
            else:
                cur = int(nbrs[lo + rng.integers(hi - lo)])
            if visited[cur]:
                idle += 1
            else:
                visit(cur)
                idle = 0
    nodes = np.sort(np.array(order, dtype=np.int64))
    return SnowballSample(nodes, induced_subgraph(g, nodes), filled)


def split(nodes: Sequence[int], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    nodes = np.asarray(nodes, dtype=np.int64)
    perm = nodes[np.random.default_rng(seed).permutation(nodes.size)]
    n_train = int(round(ratios[0] * nodes.size))
    n_val = min(nodes.size - n_train, int(round(ratios[1] * nodes.size)))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
