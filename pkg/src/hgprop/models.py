"""Decoupled post-classifiers trained on a precomputed propagation stack.

Every model projects the hops it consumes with a per-hop affine map
``H_k = C_k @ theta_k + bias_k``, fuses them into a hidden vector ``z`` and
emits ``sigmoid(z @ W + b)``. The kinds differ only in the fusion:

* ``r_mlp``   -- ``relu(H_0)``; raw features only.
* ``r_sgc``   -- ``relu(H_K)``; last hop only.
* ``r_sign``  -- ``relu([H_0 | ... | H_K])``.
* ``r_sagn``  -- per-node softmax attention over hops, scored by
  ``leaky_relu(H_k . a_hop + H_0 . a_self)``.
* ``r_gamlp`` -- recursive gates: ``R_k = R_{k-1} + sigmoid(H_k . a_hop +
  R_{k-1} . a_run) * H_k`` with ``R_{-1} = 0``; ``z = relu(R_K)``.

Gradients are written out by hand; parameters live in float64.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ukgf
from .apm import PropagationStack
from .labels import LabelMatrix
from .metrics import EvalReport, evaluate

log = logging.getLogger(__name__)

MODEL_KINDS = ("r_mlp", "r_sgc", "r_sign", "r_sagn", "r_gamlp")
LEAKY_SLOPE = 0.2
BCE_EPS = 1e-7


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_loss: float | None):
        super().__init__(f"non-finite loss at epoch {epoch}; last finite loss {last_finite_loss}")
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_dim: int
    class_count: int
    num_hops: int
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if min(self.input_dim, self.hidden_dim, self.class_count) < 1 or self.num_hops < 0:
            raise ModelError("dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must be in [0, 1)")

    @property
    def hops_used(self) -> list[int]:
        if self.kind == "r_mlp":
            return [0]
        if self.kind == "r_sgc":
            return [self.num_hops]
        return list(range(self.num_hops + 1))

    @property
    def fused_dim(self) -> int:
        return self.hidden_dim * len(self.hops_used) if self.kind == "r_sign" else self.hidden_dim


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.01
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate < 0 or (self.batch_size is not None and self.batch_size < 1):
            raise ModelError("epochs/batch_size must be positive and learning_rate >= 0")


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0


def init_state(spec: ModelSpec) -> ModelState:
    rng = np.random.default_rng(spec.seed)
    h = spec.hidden_dim

    def uniform(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params: dict[str, np.ndarray] = {}
    for k in spec.hops_used:
        params[f"theta_{k}"] = uniform(spec.input_dim, (spec.input_dim, h))
        params[f"bias_{k}"] = np.zeros(h)
    if spec.kind == "r_sagn":
        params["a_hop"] = uniform(h, h)
        params["a_self"] = uniform(h, h)
    elif spec.kind == "r_gamlp":
        params["a_hop"] = uniform(h, h)
        params["a_run"] = uniform(h, h)
    params["w_out"] = uniform(spec.fused_dim, (spec.fused_dim, spec.class_count))
    params["b_out"] = np.zeros(spec.class_count)
    return ModelState(params=params,
                      adam_m={k: np.zeros_like(v) for k, v in params.items()},
                      adam_v={k: np.zeros_like(v) for k, v in params.items()})


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gather(spec: ModelSpec, stack: PropagationStack, nodes: np.ndarray) -> dict[int, np.ndarray]:
    if len(stack) != spec.num_hops + 1:
        raise ModelError(f"stack has {len(stack)} hops, model expects {spec.num_hops + 1}")
    if stack.shape[1] != spec.input_dim:
        raise ModelError(f"stack dim {stack.shape[1]} != input_dim {spec.input_dim}")
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= stack.shape[0]):
        raise ModelError("node id out of range")
    return {k: np.asarray(stack[k][nodes], dtype=np.float64) for k in spec.hops_used}


def _forward(spec: ModelSpec, p: dict[str, np.ndarray], feats: dict[int, np.ndarray],
             drop_mask: np.ndarray | None = None):
    hops = spec.hops_used
    proj = {k: feats[k] @ p[f"theta_{k}"] + p[f"bias_{k}"] for k in hops}
    cache: dict = {"feats": feats, "proj": proj}
    if spec.kind in ("r_mlp", "r_sgc"):
        pre = proj[hops[0]]
    elif spec.kind == "r_sign":
        pre = np.concatenate([proj[k] for k in hops], axis=1)
    elif spec.kind == "r_sagn":
        base = proj[0] @ p["a_self"]
        raw = np.stack([proj[k] @ p["a_hop"] + base for k in hops], axis=1)  # (B, K+1)
        scores = np.where(raw > 0, raw, LEAKY_SLOPE * raw)
        scores = scores - scores.max(axis=1, keepdims=True)
        alpha = np.exp(scores)
        alpha /= alpha.sum(axis=1, keepdims=True)
        pre = sum(alpha[:, i:i + 1] * proj[k] for i, k in enumerate(hops))
        cache.update(raw=raw, alpha=alpha)
    else:  # r_gamlp
        running = [np.zeros_like(proj[0])]
        gates = []
        for k in hops:
            gate = _sigmoid(proj[k] @ p["a_hop"] + running[-1] @ p["a_run"])
            gates.append(gate)
            running.append(running[-1] + gate[:, None] * proj[k])
        pre = running[-1]
        cache.update(running=running, gates=gates)
    z = np.maximum(pre, 0.0)
    if drop_mask is not None:
        z = z * drop_mask
    logits = z @ p["w_out"] + p["b_out"]
    cache.update(pre=pre, z=z, drop_mask=drop_mask)
    return _sigmoid(logits), cache


def _backward(spec: ModelSpec, p: dict[str, np.ndarray], cache: dict,
              dlogits: np.ndarray) -> dict[str, np.ndarray]:
    hops = spec.hops_used
    feats, proj = cache["feats"], cache["proj"]
    grads = {"w_out": cache["z"].T @ dlogits, "b_out": dlogits.sum(axis=0)}
    dz = dlogits @ p["w_out"].T
    if cache["drop_mask"] is not None:
        dz = dz * cache["drop_mask"]
    dpre = dz * (cache["pre"] > 0)
    dproj = {k: np.zeros_like(proj[k]) for k in hops}

    if spec.kind in ("r_mlp", "r_sgc"):
        dproj[hops[0]] = dpre
    elif spec.kind == "r_sign":
        h = spec.hidden_dim
        for i, k in enumerate(hops):
            dproj[k] = dpre[:, i * h:(i + 1) * h]
    elif spec.kind == "r_sagn":
        alpha, raw = cache["alpha"], cache["raw"]
        dalpha = np.stack([(dpre * proj[k]).sum(axis=1) for k in hops], axis=1)
        dscore = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        draw = dscore * np.where(raw > 0, 1.0, LEAKY_SLOPE)
        grads["a_hop"] = sum(proj[k].T @ draw[:, i] for i, k in enumerate(hops))
        grads["a_self"] = proj[0].T @ draw.sum(axis=1)
        for i, k in enumerate(hops):
            dproj[k] += alpha[:, i:i + 1] * dpre + np.outer(draw[:, i], p["a_hop"])
        dproj[0] += np.outer(draw.sum(axis=1), p["a_self"])
    else:  # r_gamlp
        running, gates = cache["running"], cache["gates"]
        grads["a_hop"] = np.zeros_like(p["a_hop"])
        grads["a_run"] = np.zeros_like(p["a_run"])
        drun = dpre
        for i in reversed(range(len(hops))):
            k = hops[i]
            gate = gates[i]
            dproj[k] += gate[:, None] * drun
            dgate = (drun * proj[k]).sum(axis=1)
            ds = dgate * gate * (1.0 - gate)
            dproj[k] += np.outer(ds, p["a_hop"])
            grads["a_hop"] += proj[k].T @ ds
            grads["a_run"] += running[i].T @ ds
            drun = drun + np.outer(ds, p["a_run"])

    for k in hops:
        grads[f"theta_{k}"] = feats[k].T @ dproj[k]
        grads[f"bias_{k}"] = dproj[k].sum(axis=0)
    return grads


def forward(spec: ModelSpec, state: ModelState, stack: PropagationStack,
            nodes: Sequence[int]) -> np.ndarray:
    """Eval-mode class probabilities for ``nodes`` (no dropout)."""
    probs, _ = _forward(spec, state.params, _gather(spec, stack, np.asarray(nodes)))
    if not np.isfinite(probs).all():
        raise ModelError("NaN in forward pass")
    return probs


def hop_attention(spec: ModelSpec, state: ModelState, stack: PropagationStack,
                  nodes: Sequence[int]) -> np.ndarray:
    """Per-node hop coefficients of an ``r_sagn`` model, shape (batch, K+1)."""
    if spec.kind != "r_sagn":
        raise ModelError("hop attention exists only for r_sagn")
    _, cache = _forward(spec, state.params, _gather(spec, stack, np.asarray(nodes)))
    return cache["alpha"]


def bce_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Multi-label BCE summed over classes, averaged over nodes.

    Returns the loss and its gradient with respect to ``pred``.
    """
    n = pred.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(pred)
    # each log argument is clamped at eps, so an exact prediction costs 0
    pos = np.maximum(pred, BCE_EPS)
    neg = np.maximum(1.0 - pred, BCE_EPS)
    loss = -(target * np.log(pos) + (1.0 - target) * np.log(neg)).sum() / n
    grad = (np.where(pred > BCE_EPS, -target / pos, 0.0)
            + np.where(1.0 - pred > BCE_EPS, (1.0 - target) / neg, 0.0)) / n
    return float(loss) + 0.0, grad  # no negative zero


def loss_and_grads(spec: ModelSpec, params: dict[str, np.ndarray], feats: dict[int, np.ndarray],
                   target: np.ndarray, drop_mask: np.ndarray | None = None):
    probs, cache = _forward(spec, params, feats, drop_mask)
    loss, dprobs = bce_loss(probs, target)
    grads = _backward(spec, params, cache, dprobs * probs * (1.0 - probs))
    return loss, grads


def adam_step(state: ModelState, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        state.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def predict_labels(probs: np.ndarray, threshold: float = 0.5) -> list[list[int]]:
    if not 0.0 < threshold < 1.0:
        raise ModelError("threshold must lie in (0, 1)")
    return [np.flatnonzero(row >= threshold).tolist() for row in probs]


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k).tolist() for k in ("train", "val", "test")})

    @classmethod
    def from_json(cls, text: str) -> "Split":
        raw = json.loads(text)
        return cls(*(np.asarray(raw[k], dtype=np.int64) for k in ("train", "val", "test")))


def evaluate_nodes(spec: ModelSpec, state: ModelState, stack: PropagationStack, labels: LabelMatrix,
                   nodes: np.ndarray, threshold: float = 0.5) -> EvalReport:
    probs = forward(spec, state, stack, nodes)
    return evaluate(predict_labels(probs, threshold), labels.subset(nodes))


def train(spec: ModelSpec, cfg: TrainConfig, stack: PropagationStack, labels: LabelMatrix,
          split: Split, on_epoch: Callable[[dict], None] | None = None
          ) -> tuple[ModelState, list[dict]]:
    """Adam on the train split; returns the state with the best validation micro-F1.

    Ties on F1 go to the epoch with the lower validation loss.
    """
    if labels.class_count != spec.class_count:
        raise ModelError("label class count does not match the model")
    state = init_state(spec)
    rng = np.random.default_rng(cfg.seed)
    train_nodes = np.asarray(split.train, dtype=np.int64)
    feats_all = _gather(spec, stack, train_nodes)
    target_all = labels.dense(train_nodes)
    batch = cfg.batch_size or max(1, train_nodes.size)

    best_key, best_state = (-math.inf, -math.inf), copy.deepcopy(state)
    history: list[dict] = []
    last_finite: float | None = None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_nodes.size)
        total = 0.0
        for start in range(0, order.size, batch):
            idx = order[start:start + batch]
            feats = {k: v[idx] for k, v in feats_all.items()}
            mask = None
            if spec.dropout_rate > 0:
                keep = 1.0 - spec.dropout_rate
                mask = (rng.random((idx.size, spec.fused_dim)) < keep) / keep
            loss, grads = loss_and_grads(spec, state.params, feats, target_all[idx], mask)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, last_finite)
            total += loss * idx.size
            adam_step(state, grads, cfg.learning_rate)
        train_loss = total / max(1, train_nodes.size)
        last_finite = train_loss
        state.epoch = epoch
        entry = {"epoch": epoch, "train_loss": train_loss}
        if len(split.val):
            report = evaluate_nodes(spec, state, stack, labels, split.val, cfg.threshold)
            entry.update({f"val_{k}": v for k, v in report.as_dict().items() if k != "node_count"})
            val_nodes = np.asarray(split.val, dtype=np.int64)
            val_loss, _ = bce_loss(forward(spec, state, stack, val_nodes), labels.dense(val_nodes))
            entry["val_loss"] = val_loss
            key = (report.f1, -val_loss)
        else:
            key = (-train_loss, 0.0)
        if key > best_key:
            best_key, best_state = key, copy.deepcopy(state)
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
    log.info("trained %s for %d epochs, best val score %.4f", spec.kind, cfg.epochs, best_key[0])
    return best_state, history


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(directory: str | os.PathLike, spec: ModelSpec, state: ModelState,
                    metrics: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for prefix, tensors in (("param", state.params), ("adam_m", state.adam_m), ("adam_v", state.adam_v)):
        for name, value in tensors.items():
            ukgf.write_matrix(directory / f"{prefix}.{name}.ukgf", np.atleast_2d(value))
    shapes = {name: list(v.shape) for name, v in state.params.items()}
    manifest = {"spec": asdict(spec), "epoch": state.epoch, "step": state.step,
                "shapes": shapes, "metrics": metrics or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory: str | os.PathLike) -> tuple[ModelSpec, ModelState, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = ModelSpec(**manifest["spec"])
    tensors: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for prefix in tensors:
        for name, shape in manifest["shapes"].items():
            raw = ukgf.read_matrix(directory / f"{prefix}.{name}.ukgf").astype(np.float64)
            tensors[prefix][name] = raw.reshape(shape)
    state = ModelState(tensors["param"], tensors["adam_m"], tensors["adam_v"],
                       step=manifest["step"], epoch=manifest["epoch"])
    return spec, state, manifest["metrics"]
