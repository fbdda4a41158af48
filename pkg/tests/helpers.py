"""Shared generators and brute-force oracles for the test-suite."""
import numpy as np

from hgprop.graph import build_graph


def random_edges(n, num_types, rng, edge_factor=3.0, isolated_frac=0.2, multi_type_prob=0.3):
    """Random typed edge rows; about ``isolated_frac`` of nodes get no in-edges."""
    isolated = set(rng.choice(n, size=int(round(isolated_frac * n)), replace=False).tolist())
    targets = [v for v in range(n) if v not in isolated]
    rows = []
    for _ in range(int(edge_factor * n)):
        if not targets:
            break
        v = int(rng.choice(targets))
        u = int(rng.integers(n))
        k = 2 if rng.random() < multi_type_prob and num_types > 1 else 1
        rows.append((u, v, sorted(rng.choice(num_types, size=k, replace=False).tolist())))
    return rows


def random_graph(n, num_types, rng, **kw):
    return build_graph(random_edges(n, num_types, rng, **kw), n, num_types)


def scan_in_neighbors(rows, v):
    """Edge-list scan oracle: {u: set(types)} for destination v."""
    out = {}
    for u, w, types in rows:
        if w == v:
            out.setdefault(u, set()).update(types)
    return out


def _doc(qid, label, desc, claims=None, kind="item"):
    doc = {"type": kind, "id": qid, "labels": {"en": {"language": "en", "value": label}}}
    if desc is not None:
        doc["descriptions"] = {"en": {"language": "en", "value": desc}}
    if claims is not None:
        doc["claims"] = claims
    return doc


def belgium_dump():
    """Small dump around the Belgium item: (lines, expected entity-valued claims of Q31)."""
    from hgprop.synthetic import entity_claim, string_claim
    docs = [
        _doc("P31", "instance of", None, kind="property"),
        _doc("P361", "part of", None, kind="property"),
        _doc("P214", "VIAF ID", None, kind="property"),
        _doc("P1082", "population", None, kind="property"),
        _doc("Q31", "Belgium", "country in Western Europe", {
            "P31": [entity_claim("P31", "Q6256")],
            "P361": [entity_claim("P361", "Q27496")],
            "P214": [string_claim("P214", "150948651", "external-id")],
            "P1082": [string_claim("P1082", "11584008", "quantity")],
        }),
        _doc("Q27496", "Western Europe", "region of Europe", {"P31": [entity_claim("P31", "Q82794")]}),
        _doc("Q6256", "country", "distinct territorial body or political entity",
             {"P361": [entity_claim("P361", "Q27496")]}),
    ]
    import json
    lines = ["["] + [json.dumps(d) + "," for d in docs]
    lines[-1] = lines[-1].rstrip(",")
    return lines + ["]"], [("Q31", "P31", "Q6256"), ("Q31", "P361", "Q27496")]


def write_graph_dir(path, graph, features, relations, labels):
    """Lay out the files downstream stages read from a graph directory."""
    import json
    from hgprop import ukgf
    from hgprop.graph import write_edges_tsv
    from hgprop.labels import write_labels_tsv
    path.mkdir(parents=True, exist_ok=True)
    write_edges_tsv(path / "edges.tsv", graph)
    ukgf.write_matrix(path / "features.ukgf", features)
    ukgf.write_matrix(path / "relations.ukgf", relations)
    write_labels_tsv(path / "labels.tsv", labels)
    (path / "annotation.json").write_text(json.dumps({"class_count": labels.class_count}))
    return path


def separable_task(n=200, d=6, seed=0):
    """Two classes, features one-hot of class plus small noise, no edges."""
    from hgprop.labels import LabelMatrix
    rng = np.random.default_rng(seed)
    cls = rng.integers(2, size=n)
    x = np.zeros((n, d), dtype=np.float32)
    x[np.arange(n), cls] = 1.0
    x += 0.1 * rng.standard_normal((n, d)).astype(np.float32)
    rel = np.ones((1, d), dtype=np.float32)
    return build_graph([], n, 1), x, rel, LabelMatrix.from_lists([[int(c)] for c in cls], 2)
