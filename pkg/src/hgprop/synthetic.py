"""Synthetic inputs: a planted heterograph task and a small Wikidata-shaped dump."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graph import HeteroGraph, from_triples
from .labels import LabelMatrix


@dataclass
class PlantedTask:
    graph: HeteroGraph
    features: np.ndarray
    relations: np.ndarray
    labels: LabelMatrix
    targets: np.ndarray


def planted_heterograph(n_targets: int = 1000, n_middle: int = 500, n_sources: int = 500,
                        class_count: int = 4, dim: int = 32, middles_per_target: int = 3,
                        sources_per_middle: int = 3, noise: float = 0.5, seed: int = 0
                        ) -> PlantedTask:
    """Class of a target is readable only two typed hops away.

    Targets receive type-0 edges from middles of their class's flavour; a
    middle of flavour ``f`` receives type ``1 + f`` edges from random
    sources. All node features are drawn from one distribution, so a node's
    own features say nothing about its class.
    """
    rng = np.random.default_rng(seed)
    n = n_targets + n_middle + n_sources
    targets = np.arange(n_targets)
    middles = n_targets + np.arange(n_middle)
    sources = n_targets + n_middle + np.arange(n_sources)

    flavour = np.arange(n_middle) % class_count
    rng.shuffle(flavour)
    target_class = rng.integers(class_count, size=n_targets)

    src, dst, typ = [], [], []
    for t, c in zip(targets, target_class):
        pool = middles[flavour == c]
        for m in rng.choice(pool, size=middles_per_target, replace=False):
            src.append(m), dst.append(t), typ.append(0)
    for m, f in zip(middles, flavour):
        for s in rng.choice(sources, size=sources_per_middle, replace=False):
            src.append(s), dst.append(m), typ.append(1 + f)
    graph = from_triples(np.array(src), np.array(dst), np.array(typ), n, class_count + 1)

    mean = np.abs(rng.standard_normal(dim)) + 0.5
    features = (mean + noise * rng.standard_normal((n, dim))).astype(np.float32)
    relations = rng.standard_normal((class_count + 1, dim))
    relations /= np.linalg.norm(relations, axis=1, keepdims=True)
    lists = [[] for _ in range(n)]
    for t, c in zip(targets, target_class):
        lists[t] = [int(c)]
    return PlantedTask(graph, features, relations.astype(np.float32),
                       LabelMatrix.from_lists(lists, class_count), targets)


def _entity(qid: str, label: str | None, desc: str | None, claims: dict | None) -> dict:
    doc: dict = {"type": "item", "id": qid}
    if label is not None:
        doc["labels"] = {"en": {"language": "en", "value": label}}
    if desc is not None:
        doc["descriptions"] = {"en": {"language": "en", "value": desc}}
    if claims is not None:
        doc["claims"] = claims
    return doc


def entity_claim(pid: str, qid: str) -> dict:
    return {"mainsnak": {"snaktype": "value", "property": pid, "datatype": "wikibase-item",
                         "datavalue": {"type": "wikibase-entityid",
                                       "value": {"entity-type": "item", "id": qid}}}}


def string_claim(pid: str, value: str, datatype: str = "string") -> dict:
    return {"mainsnak": {"snaktype": "value", "property": pid, "datatype": datatype,
                         "datavalue": {"type": "string", "value": value}}}


PROPERTIES = {
    "P31": "instance of", "P361": "part of", "P463": "member of",
    "P50": "author", "P170": "creator", "P1082": "population", "P214": "VIAF ID",
}


def synthetic_dump(n_complete: int = 83, n_incomplete: int = 17, n_kinds: int = 6,
                   seed: int = 0) -> list[str]:
    """Dump lines (array-wrapped, trailing commas) with a known number of complete items.

    Complete items carry an instance-of claim to one of ``n_kinds`` kind
    items (which are themselves complete and counted in ``n_complete``),
    entity-valued relations to other items, a literal and an external id.
    Incomplete items each miss one of label, description or claims.
    """
    if n_complete <= n_kinds:
        raise ValueError("n_complete must exceed n_kinds")
    rng = np.random.default_rng(seed)
    docs = []
    for pid, label in PROPERTIES.items():
        docs.append({"type": "property", "id": pid,
                     "labels": {"en": {"language": "en", "value": label}}})
    kinds = [f"Q{900 + i}" for i in range(n_kinds)]
    for i, q in enumerate(kinds):
        docs.append(_entity(q, f"kind {i}", f"abstract category number {i}",
                            {"P1082": [string_claim("P1082", str(i))]}))
    items = [f"Q{1000 + i}" for i in range(n_complete - n_kinds)]
    for i, q in enumerate(items):
        kind_ids = rng.choice(n_kinds, size=1 + (rng.random() < 0.3), replace=False)
        claims = {"P31": [entity_claim("P31", kinds[k]) for k in kind_ids]}
        for pid in ("P361", "P463", "P50"):
            if rng.random() < 0.6:
                claims[pid] = [entity_claim(pid, items[rng.integers(len(items))])]
        claims["P214"] = [string_claim("P214", f"{rng.integers(10**8)}", "external-id")]
        docs.append(_entity(q, f"item {i}", f"synthetic thing of sort {kind_ids[0]}", claims))
    for i in range(n_incomplete):
        q = f"Q{5000 + i}"
        missing = i % 3
        docs.append(_entity(q, None if missing == 0 else f"broken {i}",
                            None if missing == 1 else "incomplete thing",
                            None if missing == 2 else {"P31": [entity_claim("P31", kinds[0])]}))
    order = rng.permutation(len(docs))
    lines = ["["]
    lines += [json.dumps(docs[i]) + "," for i in order]
    lines[-1] = lines[-1].rstrip(",")
    lines.append("]")
    return lines
