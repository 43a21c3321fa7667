"""Loss functions over torque predictions: fixed MSE plus three learnable forms.

structured:       sum_j phi_j (pred_j - target_j)^2, phi = softplus(psi) > 0
state_dependent:  weights phi_j(q, dq) from a small network, softplus output
mlp:              unstructured network of (pred, target) -> nonnegative scalar

All losses take and return graph nodes so they stay differentiable w.r.t. both
the prediction path (into model weights) and their own parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import init_mlp, layers_to_nodes, mlp_forward

VARIANTS = ("mse", "structured", "state_dependent", "mlp")

STATE_NET_HIDDEN = (32,)
MLP_LOSS_HIDDEN = (40, 40, 40)


class UnsupportedVariant(Exception):
    pass


def _as_const(x) -> ad.Node:
    return x if isinstance(x, ad.Node) else ad.constant(np.asarray(x, dtype=np.float64))


def _check_batch(name, *nodes):
    shape = nodes[0].shape
    if len(shape) != 2:
        raise ad.ShapeError(f"{name}: expected B x J input, got shape {shape}")
    for n in nodes[1:]:
        if n.shape != shape:
            raise ad.ShapeError(f"{name}: incompatible shapes {shape} and {n.shape}")


def mse_loss(pred, target) -> ad.Node:
    """Mean over all B*J entries of the squared error."""
    pred, target = _as_const(pred), _as_const(target)
    _check_batch("mse_loss", pred, target)
    return ad.square(ad.sub(pred, target)).mean()


def structured_loss(phi, pred, target) -> ad.Node:
    """Batch mean of sum_j phi_j * (pred_j - target_j)^2; phi is a J-vector node."""
    pred, target = _as_const(pred), _as_const(target)
    phi = _as_const(phi)
    _check_batch("structured_loss", pred, target)
    B, J = pred.shape
    if phi.shape != (J,):
        raise ad.ShapeError(f"structured_loss: phi shape {phi.shape} does not match J={J}")
    weighted = ad.mul(ad.square(ad.sub(pred, target)), ad.repeat_rows(phi, B))
    return weighted.sum(axis=1).mean()


def state_dependent_loss(phi_net, q, dq, pred, target) -> ad.Node:
    """Like structured_loss but with per-sample weights phi(q_b, dq_b) > 0."""
    pred, target = _as_const(pred), _as_const(target)
    q, dq = _as_const(q), _as_const(dq)
    _check_batch("state_dependent_loss", pred, target, q, dq)
    x = ad.concat([q, dq], axis=1)
    w = mlp_forward(phi_net, x, out_activation=ad.softplus)
    if w.shape != pred.shape:
        raise ad.ShapeError(
            f"state_dependent_loss: weight net output {w.shape} does not match {pred.shape}")
    weighted = ad.mul(ad.square(ad.sub(pred, target)), w)
    return weighted.sum(axis=1).mean()


def mlp_loss(loss_net, pred, target) -> ad.Node:
    """Batch mean of a learned nonnegative function of (pred, target)."""
    pred, target = _as_const(pred), _as_const(target)
    _check_batch("mlp_loss", pred, target)
    x = ad.concat([pred, target], axis=1)
    out = mlp_forward(loss_net, x, out_activation=ad.softplus)
    if out.shape[1] != 1:
        raise ad.ShapeError(f"mlp_loss: loss net output shape {out.shape}, expected B x 1")
    return out.mean()


@dataclass
class LossParams:
    variant: str
    joint_count: int
    psi: np.ndarray | None = None   # structured raw weights
    layers: list | None = None      # network variants

    def copy(self) -> "LossParams":
        return LossParams(
            self.variant,
            self.joint_count,
            None if self.psi is None else self.psi.copy(),
            None if self.layers is None else [(W.copy(), b.copy()) for W, b in self.layers],
        )


def init_loss_params(variant: str, J: int, seed: int) -> LossParams:
    if variant not in VARIANTS:
        raise UnsupportedVariant(f"unknown loss variant {variant!r}")
    rng = np.random.default_rng(seed)
    if variant == "mse":
        return LossParams("mse", J)
    if variant == "structured":
        return LossParams("structured", J, psi=rng.normal(0.0, 0.1, size=J))
    if variant == "state_dependent":
        sizes = [2 * J, *STATE_NET_HIDDEN, J]
    else:
        sizes = [2 * J, *MLP_LOSS_HIDDEN, 1]
    return LossParams(variant, J, layers=init_mlp(sizes, rng))


def make_loss_leaves(lp: LossParams, requires_grad: bool = True) -> list:
    """Graph leaves for the loss parameters, [] for the mse variant."""
    if lp.variant == "mse":
        return []
    if lp.variant == "structured":
        return [ad.leaf(lp.psi, requires_grad)]
    return layers_to_nodes(lp.layers, requires_grad)


def evaluate_loss(variant: str, leaves, q, dq, pred, target) -> ad.Node:
    """Dispatch to the right loss given leaves from make_loss_leaves."""
    if variant == "mse":
        return mse_loss(pred, target)
    if variant == "structured":
        return structured_loss(ad.softplus(leaves[0]), pred, target)
    if variant == "state_dependent":
        return state_dependent_loss(leaves, q, dq, pred, target)
    if variant == "mlp":
        return mlp_loss(leaves, pred, target)
    raise UnsupportedVariant(f"unknown loss variant {variant!r}")


def loss_param_arrays(lp: LossParams) -> list:
    if lp.variant == "mse":
        return []
    if lp.variant == "structured":
        return [lp.psi]
    out = []
    for W, b in lp.layers:
        out.extend([W, b])
    return out


def with_loss_arrays(lp: LossParams, arrays) -> LossParams:
    if lp.variant == "mse":
        return lp.copy()
    if lp.variant == "structured":
        (psi,) = arrays
        return LossParams("structured", lp.joint_count, psi=np.asarray(psi, dtype=np.float64))
    layers = [(np.asarray(arrays[i], dtype=np.float64), np.asarray(arrays[i + 1], dtype=np.float64))
              for i in range(0, len(arrays), 2)]
    return LossParams(lp.variant, lp.joint_count, layers=layers)


def effective_phi(lp: LossParams, q=None, dq=None) -> np.ndarray:
    """Value-level weights: (J,) for structured, B x J for state_dependent."""
    if lp.variant == "structured":
        psi = lp.psi
        return np.maximum(psi, 0.0) + np.log1p(np.exp(-np.abs(psi)))
    if lp.variant == "state_dependent":
        q = np.asarray(q, dtype=np.float64)
        dq = np.asarray(dq, dtype=np.float64)
        if q.ndim == 1:
            q, dq = q[None, :], dq[None, :]
        leaves = layers_to_nodes(lp.layers, requires_grad=False)
        x = ad.constant(np.concatenate([q, dq], axis=1))
        return mlp_forward(leaves, x, out_activation=ad.softplus).array
    raise UnsupportedVariant(f"effective_phi undefined for variant {lp.variant!r}")


def export_phi(lp: LossParams, states=None) -> list:
    """Rows for the weight-export CSVs (per-joint, or per-state scatter data)."""
    if lp.variant == "structured":
        phi = effective_phi(lp)
        return [{"joint": j, "phi": float(phi[j])} for j in range(lp.joint_count)]
    if lp.variant == "state_dependent":
        if not states:
            raise ValueError("state_dependent export needs probe states (q, dq)")
        rows = []
        for q, dq in states:
            q = np.asarray(q, dtype=np.float64)
            dq = np.asarray(dq, dtype=np.float64)
            phi = effective_phi(lp, q, dq)[0]
            row = {}
            for j in range(lp.joint_count):
                row[f"q_{j}"] = float(q[j])
            for j in range(lp.joint_count):
                row[f"dq_{j}"] = float(dq[j])
            for j in range(lp.joint_count):
                row[f"phi_{j}"] = float(phi[j])
            rows.append(row)
        return rows
    raise UnsupportedVariant(f"export_phi supports structured/state_dependent, got {lp.variant!r}")


def save_loss(lp: LossParams, path) -> None:
    doc = {"kind": "learned_loss", "variant": lp.variant, "joint_count": lp.joint_count}
    if lp.psi is not None:
        doc["psi"] = lp.psi.tolist()
    if lp.layers is not None:
        doc["layers"] = [{"w": W.tolist(), "b": b.tolist()} for W, b in lp.layers]
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_loss(path) -> LossParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "learned_loss":
        raise ValueError(f"{path}: not a loss checkpoint")
    psi = np.asarray(doc["psi"], dtype=np.float64) if "psi" in doc else None
    layers = None
    if "layers" in doc:
        layers = [(np.asarray(l["w"], dtype=np.float64), np.asarray(l["b"], dtype=np.float64))
                  for l in doc["layers"]]
    return LossParams(doc["variant"], int(doc["joint_count"]), psi=psi, layers=layers)
