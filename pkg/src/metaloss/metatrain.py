"""Bilevel meta-training of learned loss parameters.

Inner loop: one SGD step of the inverse dynamics weights theta under the
learned loss on the first half of a contiguous batch, built as a
differentiable graph.  Outer loop: gradient descent on the loss parameters
phi of the MSE the updated model achieves on the second half.  The outer
gradient flows through the inner update, so it needs second derivatives of
the learned loss; backward passes build graphs, which makes it exact.

Within a batch, theta_new is always one inner step from the batch's random
init (theta itself is never advanced across iterations), and phi updates
immediately after every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data, losses, model

OUTER_LOSS_LIMIT = 1e6  # abort threshold for a diverging meta run


class MetaDivergence(Exception):
    """Meta-training produced a non-finite or runaway quantity."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.history = None  # partial per-batch outer losses, filled by meta_train


@dataclass
class MetaConfig:
    variant: str
    epochs: int = 300
    batches_per_epoch: int = 100
    batch_size: int = 256        # K; split into halves A (inner) and B (outer)
    alpha: float = 0.001         # inner SGD rate on theta
    eta: float = 0.01            # outer rate on phi
    iters_max: int = 10
    hidden: tuple = (64, 64)     # inverse dynamics architecture
    seed: int = 0
    resample_halves: bool = False  # redraw the A/B split every inner iteration
    eval_steps: int = 100
    eval_seeds: int = 5

    def __post_init__(self):
        if self.variant not in losses.VARIANTS:
            raise losses.UnsupportedVariant(f"unknown loss variant {self.variant!r}")
        for name in ("epochs", "batches_per_epoch", "iters_max",
                     "eval_steps", "eval_seeds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even and >= 2")
        if self.alpha <= 0 or self.eta <= 0:
            raise ValueError("alpha and eta must be positive")
        if not self.hidden:
            raise ValueError("hidden must be nonempty")
        self.hidden = tuple(self.hidden)


@dataclass(frozen=True)
class BatchHalf:
    q: np.ndarray
    dq: np.ndarray
    ddq_next: np.ndarray
    tau: np.ndarray

    def __len__(self):
        return self.q.shape[0]


def split_halves(batch, rng=None):
    """Split a contiguous batch into halves (A, B).

    Default is the first half / second half; with an rng the membership is
    redrawn at random instead (ablation path).
    """
    K = len(batch.q)
    if K < 2 or K % 2 != 0:
        raise ValueError(f"batch size must be even and >= 2, got {K}")
    half = K // 2
    if rng is None:
        ia, ib = slice(0, half), slice(half, K)
    else:
        perm = rng.permutation(K)
        ia, ib = np.sort(perm[:half]), np.sort(perm[half:])
    make = lambda idx: BatchHalf(batch.q[idx], batch.dq[idx],
                                 batch.ddq_next[idx], batch.tau[idx])
    return make(ia), make(ib)


def _forward(theta_nodes, half):
    x = np.concatenate([half.q, half.dq, half.ddq_next], axis=1)
    return model.mlp_forward(theta_nodes, ad.constant(x))


def inner_update(theta, lp, half: BatchHalf, alpha, loss_leaves=None):
    """One SGD step of theta on the learned loss over a batch half.

    theta may be ModelParams or an already-built list of parameter nodes
    (for chaining updates).  Returns (theta_new_nodes, loss_leaves); the
    update is part of the graph, so theta_new stays differentiable with
    respect to the loss-parameter leaves.
    """
    if len(half) == 0:
        raise ValueError("batch half is empty")
    if loss_leaves is None:
        loss_leaves = losses.make_loss_leaves(lp, requires_grad=True)
    if isinstance(theta, model.ModelParams):
        theta_nodes = model.layers_to_nodes(theta.layers, requires_grad=True)
    else:
        theta_nodes = list(theta)
    pred = _forward(theta_nodes, half)
    inner = losses.evaluate_loss(lp.variant, loss_leaves, half.q, half.dq,
                                 pred, half.tau)
    if not np.isfinite(inner.item()):
        raise MetaDivergence(f"non-finite inner loss {inner.item()}")
    grads = ad.backward(inner, theta_nodes, create_graph=True)
    theta_new = [ad.sub(p, ad.scalar_mul(g, alpha))
                 for p, g in zip(theta_nodes, grads)]
    return theta_new, loss_leaves


@dataclass
class MetaStepDiagnostics:
    outer_losses: list = field(default_factory=list)
    phis: list | None = None   # loss params before each update (capture=True)
    grads: list | None = None  # per-iteration gradient arrays (capture=True)


def meta_step(lp, theta_init, batch, alpha, eta, iters_max, rng=None,
              resample_halves=False, capture=False):
    """Run iters_max inner/outer iterations on one contiguous batch.

    Each iteration takes one differentiable inner step from theta_init with
    the current loss parameters, then updates the loss parameters with the
    exact gradient of the updated model's MSE on the held-out half.
    Returns (updated LossParams, MetaStepDiagnostics); theta_init and the
    batch are never mutated.
    """
    if lp.variant == "mse":
        raise losses.UnsupportedVariant("mse loss has no parameters to meta-train")
    if iters_max < 1:
        raise ValueError("iters_max must be >= 1")
    half_a, half_b = split_halves(batch)
    cur = lp
    diag = MetaStepDiagnostics()
    if capture:
        diag.phis, diag.grads = [], []
    for i in range(iters_max):
        if resample_halves:
            if rng is None:
                raise ValueError("resample_halves requires an rng")
            half_a, half_b = split_halves(batch, rng)
        theta_new, loss_leaves = inner_update(theta_init, cur, half_a, alpha)
        outer = losses.mse_loss(_forward(theta_new, half_b), half_b.tau)
        val = outer.item()
        if not np.isfinite(val) or val > OUTER_LOSS_LIMIT:
            raise MetaDivergence(f"outer loss {val:g} at iteration {i}")
        diag.outer_losses.append(val)
        grads = [g.array for g in ad.backward(outer, loss_leaves)]
        if any(not np.all(np.isfinite(g)) for g in grads):
            raise MetaDivergence(f"non-finite meta-gradient at iteration {i}")
        if capture:
            diag.phis.append(cur.copy())
            diag.grads.append([g.copy() for g in grads])
        arrays = [a - eta * g for a, g in zip(losses.loss_param_arrays(cur), grads)]
        cur = losses.with_loss_arrays(cur, arrays)
    return cur, diag


def unrolled_outer_loss(lp, theta, half_a, half_b, alpha, steps=1) -> float:
    """Held-out MSE after chaining `steps` inner updates under fixed phi."""
    loss_leaves = losses.make_loss_leaves(lp, requires_grad=True)
    nodes = model.layers_to_nodes(theta.layers, requires_grad=True)
    for _ in range(steps):
        nodes, _ = inner_update(nodes, lp, half_a, alpha, loss_leaves=loss_leaves)
    return losses.mse_loss(_forward(nodes, half_b), half_b.tau).item()


def unrolled_meta_gradient(lp, theta, half_a, half_b, alpha, steps=1):
    """Exact gradient of the held-out MSE in the loss parameters through a
    chain of `steps` inner updates sharing one set of parameter leaves.

    Returns (outer_loss, gradient arrays in make_loss_leaves order).
    """
    loss_leaves = losses.make_loss_leaves(lp, requires_grad=True)
    nodes = model.layers_to_nodes(theta.layers, requires_grad=True)
    for _ in range(steps):
        nodes, _ = inner_update(nodes, lp, half_a, alpha, loss_leaves=loss_leaves)
    outer = losses.mse_loss(_forward(nodes, half_b), half_b.tau)
    grads = ad.backward(outer, loss_leaves)
    return outer.item(), [g.array for g in grads]


@dataclass
class MetaResult:
    loss_params: losses.LossParams
    outer_losses: np.ndarray  # (batches run, iters_max)


def meta_train(cfg: MetaConfig, ds: data.DynDataset, eval_hook=None) -> MetaResult:
    """Full meta-training schedule over a dataset.

    For every batch: re-initialize theta, sample a contiguous batch, run
    meta_step.  eval_hook(epoch, loss_params), if given, runs after each
    epoch.  Deterministic for a fixed (cfg, ds).  On divergence the raised
    error carries the epoch/batch indices and the partial loss history.
    """
    if cfg.variant == "mse":
        raise losses.UnsupportedVariant("mse loss has no parameters to meta-train")
    J = ds.joint_count
    rng = np.random.default_rng(cfg.seed)
    lp = losses.init_loss_params(cfg.variant, J, cfg.seed)
    rows = []
    for epoch in range(cfg.epochs):
        for b in range(cfg.batches_per_epoch):
            theta = model.init_model(J, cfg.hidden, rng)
            batch = data.sample_contiguous_batch(ds, cfg.batch_size, rng)
            try:
                lp, diag = meta_step(lp, theta, batch, cfg.alpha, cfg.eta,
                                     cfg.iters_max, rng=rng,
                                     resample_halves=cfg.resample_halves)
            except MetaDivergence as err:
                err.epoch = epoch
                err.batch = b
                err.history = np.array(rows)
                raise
            rows.append(diag.outer_losses)
        if eval_hook is not None:
            eval_hook(epoch, lp)
    return MetaResult(lp, np.array(rows))


def dataset_mse(theta: model.ModelParams, ds: data.DynDataset) -> float:
    """Torque MSE of the model over every record in the dataset."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    total = 0.0
    for run in ds.runs:
        pred = model.predict_value(theta, run.q, run.dq, run.ddq_next)
        total += np.sum((pred - run.tau) ** 2)
    return total / (len(ds) * ds.joint_count)


@dataclass
class EvalResult:
    curves: np.ndarray      # (seeds, steps) batch MSE before each update
    final_mses: np.ndarray  # (seeds,) full-dataset MSE after the last step

    @property
    def mean_curve(self):
        return self.curves.mean(axis=0)

    @property
    def std_curve(self):
        return self.curves.std(axis=0)


def eval_learned_loss(lp, ds, steps=100, seeds=5, alpha=0.001,
                      batch_size=256, hidden=(64, 64), base_seed=0) -> EvalResult:
    """Train fresh inverse dynamics models under a frozen loss.

    For each seed: a new model takes `steps` SGD steps minimizing the given
    loss on sampled contiguous batches, logging the plain batch MSE before
    every update.  Returns the per-seed curves and the full-dataset MSE
    after the final step.  Seeds share the rng layout, so different loss
    variants see identical initializations and batch sequences.
    """
    J = ds.joint_count
    curves = np.empty((seeds, steps))
    finals = np.empty(seeds)
    loss_leaves = losses.make_loss_leaves(lp, requires_grad=False)
    for s in range(seeds):
        rng = np.random.default_rng(base_seed + s)
        theta = model.init_model(J, hidden, rng)
        opt = model.sgd_state(alpha)
        for k in range(steps):
            batch = data.sample_contiguous_batch(ds, batch_size, rng)
            pred = model.predict_value(theta, batch.q, batch.dq, batch.ddq_next)
            curves[s, k] = np.mean((pred - batch.tau) ** 2)
            theta_nodes = model.layers_to_nodes(theta.layers, requires_grad=True)
            half = BatchHalf(batch.q, batch.dq, batch.ddq_next, batch.tau)
            loss = losses.evaluate_loss(lp.variant, loss_leaves, batch.q,
                                        batch.dq, _forward(theta_nodes, half),
                                        batch.tau)
            grads = model.model_grads(theta, loss, theta_nodes)
            theta, opt = model.optimizer_step(theta, grads, opt)
        finals[s] = dataset_mse(theta, ds)
    return EvalResult(curves, finals)
