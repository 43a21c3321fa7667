"""Learnable inverse dynamics network f(q, dq, ddq_desired) -> feedforward torque.

Also hosts the generic MLP init/forward helpers shared with the learned-loss
networks, and the value-level SGD/Adam optimizers used outside the meta loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad


class OptimizerError(Exception):
    pass


def init_mlp(sizes, rng) -> list:
    """Layer list [(W, b), ...]; entries uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((W, b))
    return layers


def layers_to_nodes(layers, requires_grad: bool = True) -> list:
    """Flatten [(W,b),...] to leaf nodes [W0, b0, W1, b1, ...]."""
    nodes = []
    for W, b in layers:
        nodes.append(ad.leaf(W, requires_grad))
        nodes.append(ad.leaf(b, requires_grad))
    return nodes


def nodes_to_layers(nodes) -> list:
    return [(nodes[i].array, nodes[i + 1].array) for i in range(0, len(nodes), 2)]


def mlp_forward(leaves, x: ad.Node, out_activation=None) -> ad.Node:
    """Forward pass through leaf list [W0,b0,...]; relu hidden, linear output
    unless out_activation (e.g. ad.softplus) is given."""
    h = x
    n_layers = len(leaves) // 2
    for i in range(n_layers):
        W, b = leaves[2 * i], leaves[2 * i + 1]
        h = ad.add(ad.matmul(h, W), ad.repeat_rows(b, h.shape[0]))
        if i < n_layers - 1:
            h = ad.relu(h)
    if out_activation is not None:
        h = out_activation(h)
    return h


@dataclass
class ModelParams:
    """Weights of the inverse dynamics MLP, input 3J -> hidden -> J."""

    joint_count: int
    hidden: tuple
    layers: list  # [(W, b), ...] float64 arrays

    def copy(self) -> "ModelParams":
        return ModelParams(self.joint_count, tuple(self.hidden),
                           [(W.copy(), b.copy()) for W, b in self.layers])


def init_model(J: int, hidden_sizes, seed: int) -> ModelParams:
    if not hidden_sizes:
        raise ValueError("hidden_sizes must be nonempty")
    rng = np.random.default_rng(seed)
    sizes = [3 * J, *hidden_sizes, J]
    return ModelParams(J, tuple(hidden_sizes), init_mlp(sizes, rng))


def _stack_inputs(q, dq, ddq_d, J: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    dq = np.asarray(dq, dtype=np.float64)
    ddq_d = np.asarray(ddq_d, dtype=np.float64)
    if q.ndim == 1:
        q, dq, ddq_d = q[None, :], dq[None, :], ddq_d[None, :]
    if q.shape != dq.shape or q.shape != ddq_d.shape or q.shape[1] != J:
        raise ValueError(
            f"predict: expected three B x {J} inputs, got {q.shape}, {dq.shape}, {ddq_d.shape}")
    return np.concatenate([q, dq, ddq_d], axis=1)


def predict(theta: ModelParams, q, dq, ddq_d) -> ad.Node:
    """Differentiable forward pass; returns a B x J node (B=1 for vector input)."""
    x = _stack_inputs(q, dq, ddq_d, theta.joint_count)
    leaves = layers_to_nodes(theta.layers, requires_grad=True)
    return mlp_forward(leaves, ad.constant(x))


def predict_value(theta: ModelParams, q, dq, ddq_d) -> np.ndarray:
    """Plain numpy forward pass for evaluation paths that never differentiate."""
    h = _stack_inputs(q, dq, ddq_d, theta.joint_count)
    n = len(theta.layers)
    for i, (W, b) in enumerate(theta.layers):
        h = h @ W + b
        if i < n - 1:
            h = np.maximum(h, 0.0)
    return h


@dataclass
class OptState:
    kind: str  # "sgd" | "adam"
    alpha: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)  # adam first moments, [(mW, mb), ...]
    v: list = field(default_factory=list)


def sgd_state(alpha: float) -> OptState:
    return OptState("sgd", alpha)


def adam_state(alpha: float) -> OptState:
    return OptState("adam", alpha)


def optimizer_step(theta: ModelParams, grads, opt: OptState):
    """One update; returns (theta', opt') leaving the inputs untouched."""
    layers = theta.layers
    if len(grads) != len(layers):
        raise OptimizerError(f"expected {len(layers)} gradient pairs, got {len(grads)}")
    for i, (gW, gb) in enumerate(grads):
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise OptimizerError(f"non-finite gradient in layer {i}")
        if gW.shape != layers[i][0].shape or gb.shape != layers[i][1].shape:
            raise OptimizerError(f"gradient shape mismatch in layer {i}")

    if opt.kind == "sgd":
        new_layers = [(W - opt.alpha * gW, b - opt.alpha * gb)
                      for (W, b), (gW, gb) in zip(layers, grads)]
        return replace(theta, layers=new_layers), opt

    if opt.kind != "adam":
        raise OptimizerError(f"unknown optimizer kind {opt.kind!r}")

    m = opt.m if opt.m else [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    v = opt.v if opt.v else [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    t = opt.t + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    new_layers, new_m, new_v = [], [], []
    for (W, b), (gW, gb), (mW, mb), (vW, vb) in zip(layers, grads, m, v):
        mW = opt.beta1 * mW + (1.0 - opt.beta1) * gW
        mb = opt.beta1 * mb + (1.0 - opt.beta1) * gb
        vW = opt.beta2 * vW + (1.0 - opt.beta2) * gW * gW
        vb = opt.beta2 * vb + (1.0 - opt.beta2) * gb * gb
        W2 = W - opt.alpha * (mW / bc1) / (np.sqrt(vW / bc2) + opt.eps)
        b2 = b - opt.alpha * (mb / bc1) / (np.sqrt(vb / bc2) + opt.eps)
        new_layers.append((W2, b2))
        new_m.append((mW, mb))
        new_v.append((vW, vb))
    return replace(theta, layers=new_layers), replace(opt, t=t, m=new_m, v=new_v)


def model_grads(theta: ModelParams, loss_node: ad.Node, leaves) -> list:
    """Collect [(gW, gb), ...] for leaves produced by layers_to_nodes."""
    gs = ad.backward(loss_node, leaves)
    return [(gs[i].array, gs[i + 1].array) for i in range(0, len(gs), 2)]


def save_model(theta: ModelParams, path) -> None:
    import json

    doc = {
        "kind": "idyn_mlp",
        "joint_count": theta.joint_count,
        "hidden": list(theta.hidden),
        "layers": [{"w": W.tolist(), "b": b.tolist()} for W, b in theta.layers],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> ModelParams:
    import json

    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "idyn_mlp":
        raise ValueError(f"{path}: not an inverse dynamics model checkpoint")
    layers = [(np.asarray(l["w"], dtype=np.float64), np.asarray(l["b"], dtype=np.float64))
              for l in doc["layers"]]
    return ModelParams(int(doc["joint_count"]), tuple(doc["hidden"]), layers)
