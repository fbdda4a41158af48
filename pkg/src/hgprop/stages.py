"""File-based pipeline stages behind the command line.

Each stage reads its inputs from a directory, writes its outputs atomically
and records a ``.<stage>.stage.json`` signature (input checksums, parameters,
output checksums). A rerun with an unchanged signature is skipped unless
forced. Output directories are guarded by a lock file.
"""
from __future__ import annotations

import contextlib
import json
import logging
import os
import shutil
from dataclasses import asdict
from pathlib import Path
from typing import Iterator

import numpy as np
from filelock import FileLock, Timeout

from . import kg, ukgf
from .apm import ApmConfig, PropagationStack, propagate, propagate_chunked
from .graph import read_edges_tsv, write_edges_tsv
from .labels import read_labels_tsv, write_labels_tsv
from .metrics import EvalReport
from .models import (ModelSpec, Split, TrainConfig, evaluate_nodes, load_checkpoint,
                     save_checkpoint, train)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


@contextlib.contextmanager
def locked(out_dir: Path) -> Iterator[None]:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise StageError(f"{out_dir} is locked by another process") from None
    try:
        yield
    finally:
        lock.release()


def _stage_file(out_dir: Path, name: str) -> Path:
    return out_dir / f".{name}.stage.json"


def _signature(inputs: dict[str, Path], params: dict) -> dict:
    return {"inputs": {k: ukgf.file_sha256(p) for k, p in sorted(inputs.items())},
            "params": json.loads(json.dumps(params, default=str))}


def _is_current(out_dir: Path, name: str, signature: dict) -> bool:
    path = _stage_file(out_dir, name)
    if not path.exists():
        return False
    recorded = json.loads(path.read_text())
    if {k: recorded.get(k) for k in ("inputs", "params")} != signature:
        return False
    return all((out_dir / f).exists() and ukgf.file_sha256(out_dir / f) == sha
               for f, sha in recorded.get("outputs", {}).items())


def _record(out_dir: Path, name: str, signature: dict, outputs: list[str]) -> None:
    payload = dict(signature, outputs={f: ukgf.file_sha256(out_dir / f) for f in sorted(outputs)})
    _stage_file(out_dir, name).write_text(json.dumps(payload, indent=2, sort_keys=True))


def verify_outputs(directory: Path, name: str) -> None:
    """Raise if files recorded by stage ``name`` in ``directory`` changed since."""
    path = _stage_file(directory, name)
    if not path.exists():
        return
    for f, sha in json.loads(path.read_text()).get("outputs", {}).items():
        target = directory / f
        if not target.exists():
            raise StageError(f"{target} is missing")
        if ukgf.file_sha256(target) != sha:
            raise StageError(f"checksum mismatch for {target}")


@contextlib.contextmanager
def _staging(out_dir: Path) -> Iterator[Path]:
    """Write into a scratch directory and move files into ``out_dir`` on success only."""
    scratch = out_dir / ".staging"
    shutil.rmtree(scratch, ignore_errors=True)
    scratch.mkdir(parents=True)
    try:
        yield scratch
        for f in sorted(scratch.iterdir()):
            os.replace(f, out_dir / f.name)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise StageError(f"{path} not found")
    return json.loads(path.read_text())


def _skipped(name: str, out_dir: Path) -> dict:
    log.info("%s: %s is up to date", name, out_dir)
    return {"stage": name, "status": "up to date"}


# --- build ---------------------------------------------------------------------

BUILD_OUTPUTS = ["entities.jsonl", "nodes.tsv", "texts.tsv", "edges.tsv", "relations.tsv",
                 "id_labels.tsv", "stats.json"]


def run_build(dump: Path, out_dir: Path, screen: Path | None = None, force: bool = False) -> dict:
    if not dump.is_file():
        raise StageError(f"cannot read dump {dump}")
    screen_set = kg.read_screen_set(screen) if screen else kg.DEFAULT_SCREEN
    inputs = {"dump": dump} | ({"screen": screen} if screen else {})
    sig = _signature(inputs, {"screen": sorted(screen_set)})
    with locked(out_dir):
        if not force and _is_current(out_dir, "build", sig):
            return _skipped("build", out_dir)
        with _staging(out_dir) as tmp:
            with open(dump, encoding="utf-8") as fh:
                names = kg.scan_labels(fh)
            stats = kg.ParseStats()
            node_ids: dict[str, int] = {}
            with open(dump, encoding="utf-8") as fh, \
                    open(tmp / "entities.jsonl", "w", encoding="utf-8") as ent, \
                    open(tmp / "nodes.tsv", "w", encoding="utf-8") as nodes:
                for rec in kg.parse_dump(fh, screen_set, stats):
                    if rec.id in node_ids:
                        continue
                    node_ids[rec.id] = len(node_ids)
                    ent.write(rec.to_json() + "\n")
                    nodes.write(f"{node_ids[rec.id]}\t{rec.id}\n")

            type_ids: dict[str, int] = {}
            pairs: set[tuple[int, int]] = set()
            referenced: set[str] = set()
            edge_rows = literal_claims = dangling = 0
            with open(tmp / "entities.jsonl", encoding="utf-8") as ent, \
                    open(tmp / "texts.tsv", "w", encoding="utf-8") as texts, \
                    open(tmp / "edges.tsv", "w", encoding="utf-8") as edges:
                for line in ent:
                    rec = kg.EntityRecord.from_json(line)
                    v = node_ids[rec.id]
                    text = kg.reorganize_text(rec, names).replace("\t", " ").replace("\n", " ")
                    texts.write(f"{v}\t{text}\n")
                    for c in rec.claims:
                        if not c.is_entity:
                            literal_claims += 1
                            continue
                        referenced.add(c.target)
                        if c.target not in node_ids:
                            dangling += 1
                            continue
                        ty = type_ids.setdefault(c.property, len(type_ids))
                        edges.write(f"{v}\t{node_ids[c.target]}\t{ty}\n")
                        pairs.add((v, node_ids[c.target]))
                        edge_rows += 1
            with open(tmp / "relations.tsv", "w", encoding="utf-8") as fh:
                for pid, ty in type_ids.items():
                    fh.write(f"{ty}\t{pid}\t{names.get(pid, pid)}\n")
            with open(tmp / "id_labels.tsv", "w", encoding="utf-8") as fh:
                for q in sorted(referenced):
                    if q in names:
                        fh.write(f"{q}\t{names[q]}\n")
            result = {
                "nodes": len(node_ids), "edges": len(pairs), "edge_rows": edge_rows,
                "types": len(type_ids), "dropped_incomplete": stats.incomplete,
                "dropped_malformed": stats.malformed, "screened_claims": stats.screened_claims,
                "literal_claims": literal_claims, "dangling_claims": dangling,
                "properties_seen": stats.properties,
            }
            _write_json(tmp / "stats.json", result)
        _record(out_dir, "build", sig, BUILD_OUTPUTS)
    return {"stage": "build", "status": "done", **result}


def _read_tsv(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split("\t") for line in fh if line.strip()]


# --- embed ---------------------------------------------------------------------

def run_embed(graph_dir: Path, dim: int, seed: int = 0, force: bool = False) -> dict:
    verify_outputs(graph_dir, "build")
    texts, relations = graph_dir / "texts.tsv", graph_dir / "relations.tsv"
    sig = _signature({"texts": texts, "relations": relations}, {"dim": dim, "seed": seed})
    with locked(graph_dir):
        if not force and _is_current(graph_dir, "embed", sig):
            return _skipped("embed", graph_dir)
        rows = _read_tsv(texts)
        feats = kg.embed_texts((r[1] if len(r) > 1 else "" for r in rows), dim, seed)
        rels = kg.embed_texts((r[2] for r in _read_tsv(relations)), dim, seed)
        if rels.shape[0] == 0:
            rels = np.zeros((1, dim), dtype=np.float32)
        ukgf.write_matrix(graph_dir / "features.ukgf", feats)
        ukgf.write_matrix(graph_dir / "relations.ukgf", rels)
        _record(graph_dir, "embed", sig, ["features.ukgf", "relations.ukgf"])
    return {"stage": "embed", "status": "done", "rows": int(feats.shape[0]), "dim": dim,
            "relations": int(rels.shape[0])}


# --- annotate ------------------------------------------------------------------

def run_annotate(graph_dir: Path, class_count: int, seed: int = 0, max_iters: int = 100,
                 instance_of: str = kg.INSTANCE_OF, dim: int = 128, embed_seed: int = 0,
                 force: bool = False) -> dict:
    verify_outputs(graph_dir, "build")
    inputs = {"entities": graph_dir / "entities.jsonl", "texts": graph_dir / "texts.tsv",
              "id_labels": graph_dir / "id_labels.tsv"}
    params = {"class_count": class_count, "seed": seed, "max_iters": max_iters,
              "instance_of": instance_of, "dim": dim, "embed_seed": embed_seed}
    sig = _signature(inputs, params)
    with locked(graph_dir):
        if not force and _is_current(graph_dir, "annotate", sig):
            return _skipped("annotate", graph_dir)
        with open(inputs["entities"], encoding="utf-8") as fh:
            records = [kg.EntityRecord.from_json(line) for line in fh]
        parents, per_entity = kg.harvest_labels(records, instance_of)
        node_text = {rec.id: row[1] for rec, row in zip(records, _read_tsv(inputs["texts"]))}
        names = {q: label for q, label in _read_tsv(inputs["id_labels"])}
        parent_texts = [node_text.get(p) or names.get(p, p) for p in parents]
        q = min(class_count, len(parents))
        if q == 0:
            raise StageError("no instance-of parents found; nothing to annotate")
        emb = kg.embed_texts(parent_texts, dim, embed_seed)
        amap = kg.cluster_labels(parents, emb, q, seed, max_iters)
        labels = kg.annotate(per_entity, amap)
        kg.write_annotation_map(graph_dir / "annotation_map.tsv", amap)
        write_labels_tsv(graph_dir / "labels.tsv", labels)
        result = {"class_count": q, "parents": len(parents),
                  "labeled_nodes": int(labels.labeled_nodes().size)}
        _write_json(graph_dir / "annotation.json", result)
        _record(graph_dir, "annotate", sig, ["annotation_map.tsv", "labels.tsv", "annotation.json"])
    return {"stage": "annotate", "status": "done", **result}


def load_labels(graph_dir: Path, node_count: int):
    meta = _read_json(graph_dir / "annotation.json")
    return read_labels_tsv(graph_dir / "labels.tsv", node_count, meta["class_count"])


def _load_graph(graph_dir: Path):
    n, _ = ukgf.read_header(graph_dir / "features.ukgf")
    m, _ = ukgf.read_header(graph_dir / "relations.ukgf")
    return read_edges_tsv(graph_dir / "edges.tsv", n, m)


# --- sample --------------------------------------------------------------------

def run_sample(graph_dir: Path, out_dir: Path, size: int, high_degree_fraction: float = 0.5,
               restart_prob: float = 0.15, seed: int = 0, force: bool = False) -> dict:
    for stage in ("build", "embed", "annotate"):
        verify_outputs(graph_dir, stage)
    names = ["edges.tsv", "features.ukgf", "relations.ukgf", "labels.tsv", "annotation.json"]
    sig = _signature({f: graph_dir / f for f in names},
                     {"size": size, "high_degree_fraction": high_degree_fraction,
                      "restart_prob": restart_prob, "seed": seed})
    with locked(out_dir):
        if not force and _is_current(out_dir, "sample", sig):
            return _skipped("sample", out_dir)
        g = _load_graph(graph_dir)
        if size > g.node_count:
            raise StageError(f"sample size {size} exceeds {g.node_count} nodes")
        sample = kg.snowball_sample(g, size, high_degree_fraction, restart_prob=restart_prob, seed=seed)
        labels = load_labels(graph_dir, g.node_count)
        with _staging(out_dir) as tmp:
            write_edges_tsv(tmp / "edges.tsv", sample.graph)
            ukgf.write_matrix(tmp / "features.ukgf", ukgf.read_matrix(graph_dir / "features.ukgf")[sample.nodes])
            shutil.copyfile(graph_dir / "relations.ukgf", tmp / "relations.ukgf")
            sub_labels = type(labels).from_lists(labels.subset(sample.nodes), labels.class_count)
            write_labels_tsv(tmp / "labels.tsv", sub_labels)
            with open(tmp / "remap.tsv", "w", encoding="utf-8") as fh:
                for new, old in enumerate(sample.nodes):
                    fh.write(f"{new}\t{old}\n")
            _write_json(tmp / "annotation.json", {"class_count": labels.class_count,
                                                 "labeled_nodes": int(sub_labels.labeled_nodes().size)})
            result = {"nodes": int(sample.nodes.size), "edges": sample.graph.edge_count,
                      "filled": sample.filled}
            _write_json(tmp / "stats.json", result)
        _record(out_dir, "sample", sig, names + ["remap.tsv", "stats.json"])
    return {"stage": "sample", "status": "done", **result}


# --- propagate -----------------------------------------------------------------

def run_propagate(graph_dir: Path, out_dir: Path, cfg: ApmConfig, block_size: int = 0,
                  workers: int | None = None, force: bool = False) -> dict:
    for stage in ("build", "embed", "sample"):
        verify_outputs(graph_dir, stage)
    inputs = {f: graph_dir / f for f in ("edges.tsv", "features.ukgf", "relations.ukgf")}
    for p in inputs.values():
        if not p.exists():
            raise StageError(f"{p} not found")
    n, d = ukgf.read_header(inputs["features.ukgf"])
    _, rel_dim = ukgf.read_header(inputs["relations.ukgf"])
    if rel_dim != d:
        raise StageError(f"relation dim {rel_dim} != feature dim {d}")
    sig = _signature(inputs, asdict(cfg))
    hop_names = [f"hop_{k}.ukgf" for k in range(cfg.num_hops + 1)]
    with locked(out_dir):
        if not force and _is_current(out_dir, "propagate", sig):
            return _skipped("propagate", out_dir)
        g = _load_graph(graph_dir)
        x = ukgf.read_matrix(inputs["features.ukgf"])
        rel = ukgf.read_matrix(inputs["relations.ukgf"])
        if block_size > 0:
            stack = propagate_chunked(g, rel, x, cfg, block_size, out_dir, workers=workers)
            del stack
        else:
            propagate(g, rel, x, cfg, workers=workers).save(out_dir)
        manifest = {"n": n, "d": d, "num_hops": cfg.num_hops, "config": asdict(cfg),
                    "inputs": sig["inputs"],
                    "hops": {h: ukgf.file_sha256(out_dir / h) for h in hop_names}}
        _write_json(out_dir / "manifest.json", manifest)
        _record(out_dir, "propagate", sig, hop_names + ["manifest.json"])
    return {"stage": "propagate", "status": "done", "hops": manifest["hops"]}


def load_stack(stack_dir: Path) -> PropagationStack:
    verify_outputs(stack_dir, "propagate")
    manifest = _read_json(stack_dir / "manifest.json")
    return PropagationStack.load(stack_dir, manifest["num_hops"])


# --- train / eval --------------------------------------------------------------

def run_train(stack_dir: Path, label_dir: Path, out_dir: Path, kind: str, hidden: int = 256,
              dropout: float = 0.0, train_cfg: TrainConfig = TrainConfig(),
              split_path: Path | None = None, force: bool = False) -> dict:
    inputs = {"manifest": stack_dir / "manifest.json", "labels": label_dir / "labels.tsv",
              "annotation": label_dir / "annotation.json"}
    if split_path is not None:
        inputs["split"] = split_path
    params = {"kind": kind, "hidden": hidden, "dropout": dropout, "train": asdict(train_cfg)}
    sig = _signature(inputs, params)
    with locked(out_dir):
        if not force and _is_current(out_dir, "train", sig):
            result = _skipped("train", out_dir)
            result["report"] = _read_json(out_dir / "report.json")
            return result
        stack = load_stack(stack_dir)
        n, d = stack.shape
        labels = load_labels(label_dir, n)
        if split_path is not None:
            split_obj = Split.from_json(split_path.read_text())
        else:
            split_obj = Split(*kg.split(labels.labeled_nodes(), (0.8, 0.1, 0.1), train_cfg.seed))
        spec = ModelSpec(kind, d, hidden, labels.class_count, stack.num_hops, dropout, train_cfg.seed)
        with _staging(out_dir) as tmp, open(tmp / "loss_log.jsonl", "w") as loss_log:
            state, _ = train(spec, train_cfg, stack, labels, split_obj,
                             on_epoch=lambda e: loss_log.write(json.dumps(e, sort_keys=True) + "\n"))
            # report on the float32 weights the checkpoint actually stores
            state.params = {k: v.astype(np.float32).astype(np.float64) for k, v in state.params.items()}
            report = evaluate_nodes(spec, state, stack, labels, split_obj.test, train_cfg.threshold)
            (tmp / "split.json").write_text(split_obj.to_json())
            _write_json(tmp / "report.json", report.as_dict())
        save_checkpoint(out_dir / "checkpoint", spec, state, report.as_dict())
        _record(out_dir, "train", sig, ["loss_log.jsonl", "split.json", "report.json",
                                         "checkpoint/manifest.json"])
    return {"stage": "train", "status": "done", "report": report.as_dict()}


def run_eval(stack_dir: Path, label_dir: Path, checkpoint: Path, split_path: Path,
             part: str = "test", threshold: float = 0.5) -> EvalReport:
    stack = load_stack(stack_dir)
    spec, state, _ = load_checkpoint(checkpoint)
    labels = load_labels(label_dir, stack.shape[0])
    nodes = getattr(Split.from_json(split_path.read_text()), part)
    return evaluate_nodes(spec, state, stack, labels, nodes, threshold)


# --- whole pipeline ------------------------------------------------------------

def run_pipeline(cfg, workers: int | None = None, force: bool = False) -> dict:
    """build -> embed -> annotate -> [sample] -> propagate -> train (+ test report)."""
    if cfg.dump is None:
        raise StageError("pipeline needs a dump path")
    work = Path(cfg.work_dir)
    graph_dir = work / "graph"
    steps = [
        run_build(Path(cfg.dump), graph_dir, cfg.screen, force),
        run_embed(graph_dir, cfg.dim, cfg.embed_seed, force),
        run_annotate(graph_dir, cfg.class_count, cfg.seed, cfg.kmeans_iters, cfg.instance_of,
                     cfg.dim, cfg.embed_seed, force),
    ]
    data_dir = graph_dir
    if cfg.sample_size > 0:
        data_dir = work / "sample"
        steps.append(run_sample(graph_dir, data_dir, cfg.sample_size, cfg.high_degree_fraction,
                                cfg.restart_prob, cfg.seed, force))
    apm_cfg = ApmConfig(cfg.num_hops, cfg.isolated_policy, cfg.type_combine, cfg.add_reverse)
    steps.append(run_propagate(data_dir, work / "stack", apm_cfg, cfg.block_size, workers, force))
    train_cfg = TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size or None, cfg.seed, cfg.threshold)
    steps.append(run_train(work / "stack", data_dir, work / f"model_{cfg.model}", cfg.model,
                           cfg.hidden, cfg.dropout, train_cfg, force=force))
    return {"stats": _read_json(graph_dir / "stats.json"),
            "hops": _read_json(work / "stack" / "manifest.json")["hops"],
            "report": _read_json(work / f"model_{cfg.model}" / "report.json"),
            "steps": [s["stage"] + ":" + s["status"] for s in steps]}
