"""Online streaming adaptation and the segmented payload-change task.

A stream of records is consumed sequentially in windows of 5: the model's
plain MSE on the window is logged first, then the model takes one optimizer
step on its assigned loss over that window.  The segmented task emulates a
pick and place motion: five minimum-jerk phases where a point-mass payload
hangs from the arm's tip during the middle three, while the robot's gravity
compensation still assumes the nominal model.  Evaluation is open loop: the
stream is simulated (or loaded) once and the adapting model only predicts,
its outputs never feed back into the executed torques.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import arm, data, losses, metatrain, model

SEGMENT_NAMES = ("reach", "lift", "move_over", "lower", "retract")
PAYLOAD_SEGMENTS = ("lift", "move_over", "lower")
DEFAULT_PAYLOAD = 0.857  # kg
DEFAULT_BATCH = 5


class AdaptationDiverged(Exception):
    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


@dataclass
class Segment:
    """One motion phase: a reference trajectory and the payload carried."""

    name: str
    traj: arm.RefTrajectory
    payload: float = 0.0

    def __post_init__(self):
        if self.name not in SEGMENT_NAMES:
            raise ValueError(f"unknown segment name {self.name!r}")
        if self.payload < 0:
            raise ValueError("payload must be >= 0")


@dataclass(frozen=True)
class Stream:
    """Logged records of one executed segment."""

    q: np.ndarray
    dq: np.ndarray
    ddq_next: np.ndarray
    tau: np.ndarray

    def __len__(self):
        return self.q.shape[0]


def standardize_stream(stream: Stream, mu, sd) -> Stream:
    """Z-score the model inputs of a stream with dataset stats; tau stays raw."""
    J = stream.q.shape[1]
    return Stream((stream.q - mu[:J]) / sd[:J],
                  (stream.dq - mu[J:2 * J]) / sd[J:2 * J],
                  (stream.ddq_next - mu[2 * J:]) / sd[2 * J:],
                  stream.tau)


@dataclass
class SegmentReport:
    name: str
    mses: np.ndarray  # one entry per window, logged before each update

    @property
    def mean(self):
        return float(self.mses.mean())

    @property
    def std(self):
        return float(self.mses.std())


@dataclass
class AdaptReport:
    segments: list            # SegmentReport per streamed segment
    theta: model.ModelParams  # parameters after the final update
    opt: model.OptState       # optimizer state after the final update
    batch: int

    def segment(self, name: str) -> SegmentReport:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    @property
    def all_mses(self):
        return np.concatenate([s.mses for s in self.segments])


def online_adapt(theta, lp, opt, stream, batch: int = DEFAULT_BATCH,
                 name: str = "stream", update: bool = True) -> AdaptReport:
    """Stream records through the model in consecutive windows.

    For each window of `batch` records: log the current model's MSE on the
    window, then (unless update=False) take one optimizer step on the given
    loss over the window.  A trailing remainder shorter than `batch` is
    dropped.  The input theta is never mutated; the report carries the
    adapted copy.
    """
    n = len(stream.q)
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if n < batch:
        raise ValueError(f"stream of {n} records is shorter than one batch of {batch}")
    loss_leaves = losses.make_loss_leaves(lp, requires_grad=False)
    theta = theta.copy()
    mses = np.empty(n // batch)
    for k in range(n // batch):
        sl = slice(k * batch, (k + 1) * batch)
        q, dq, ddq, tau = (stream.q[sl], stream.dq[sl],
                           stream.ddq_next[sl], stream.tau[sl])
        pred = model.predict_value(theta, q, dq, ddq)
        mse = np.mean((pred - tau) ** 2)
        if not np.isfinite(mse):
            raise AdaptationDiverged(f"non-finite prediction error at step {k}", k)
        mses[k] = mse
        if not update:
            continue
        nodes = model.layers_to_nodes(theta.layers, requires_grad=True)
        x = ad.constant(np.concatenate([q, dq, ddq], axis=1))
        out = model.mlp_forward(nodes, x)
        loss = losses.evaluate_loss(lp.variant, loss_leaves, q, dq, out, tau)
        try:
            grads = model.model_grads(theta, loss, nodes)
            theta, opt = model.optimizer_step(theta, grads, opt)
        except model.OptimizerError as err:
            raise AdaptationDiverged(f"update failed at step {k}: {err}", k) from err
    return AdaptReport([SegmentReport(name, mses)], theta, opt, batch)


def simulate_segments(arm_model: arm.ArmModel, gains, segments,
                      noise_sigma: float = 0.0, rng=None) -> list:
    """Execute each segment once under PD control and log its records.

    The payload declared by a segment is attached to the arm for that
    segment only; gravity compensation, if enabled on the model, keeps
    using the nominal payload-free terms.
    """
    _check_continuity(segments)
    if noise_sigma > 0 and rng is None:
        raise ValueError("noise_sigma > 0 requires an rng")
    streams = []
    for seg in segments:
        perturbed = arm.with_payload(arm_model, seg.payload)
        try:
            q, dq, ddq_next, tau = data.track_trajectory(perturbed, gains, seg.traj)
        except arm.SimulationDiverged as err:
            raise arm.SimulationDiverged(
                f"segment {seg.name!r}: {err}", err.step_index) from err
        if noise_sigma > 0:
            tau = tau + rng.normal(0.0, noise_sigma, tau.shape)
        streams.append(Stream(q, dq, ddq_next, tau))
    return streams


def _check_continuity(segments):
    if not segments:
        raise ValueError("no segments given")
    for prev, seg in zip(segments, segments[1:]):
        gap = np.max(np.abs(seg.traj.q_d[0] - prev.traj.q_d[-1]))
        if gap > 1e-9:
            raise ValueError(
                f"segment {seg.name!r} starts {gap:g} rad away from the end "
                f"of {prev.name!r}")


def run_segmented_task(theta, lp, opt, segments, arm_model, gains,
                       batch: int = DEFAULT_BATCH, streams=None) -> AdaptReport:
    """Adapt through every segment in order, warm-starting across segments.

    The parameters leaving one segment enter the next unchanged.  Streams
    may be passed in (from simulate_segments) so several models can be
    evaluated on identical data; otherwise they are simulated here.
    """
    if streams is None:
        streams = simulate_segments(arm_model, gains, segments)
    if len(streams) != len(segments):
        raise ValueError(f"{len(segments)} segments but {len(streams)} streams")
    reports = []
    for seg, stream in zip(segments, streams):
        rep = online_adapt(theta, lp, opt, stream, batch, name=seg.name)
        theta, opt = rep.theta, rep.opt
        reports.append(rep.segments[0])
    return AdaptReport(reports, theta, opt, batch)


def frozen_segmented_report(theta, segments, streams,
                            batch: int = DEFAULT_BATCH) -> AdaptReport:
    """Per-window MSE of a fixed model over the same windows, no updates."""
    lp = losses.LossParams("mse", theta.joint_count)
    opt = model.sgd_state(0.0)
    reports = []
    for seg, stream in zip(segments, streams):
        rep = online_adapt(theta, lp, opt, stream, batch, name=seg.name,
                           update=False)
        reports.append(rep.segments[0])
    return AdaptReport(reports, theta, opt, batch)


def pretrain_frozen_baseline(ds, steps: int = 2000, batch_size: int = 256,
                             hidden=(64, 64), lr: float = 0.001,
                             seed: int = 0) -> model.ModelParams:
    """Train a model on the whole dataset with plain MSE and Adam.

    The result serves as the never-updated baseline during segmented
    evaluation.
    """
    rng = np.random.default_rng(seed)
    theta = model.init_model(ds.joint_count, hidden, rng)
    opt = model.adam_state(lr)
    lp = losses.LossParams("mse", ds.joint_count)
    leaves = losses.make_loss_leaves(lp, requires_grad=False)
    for _ in range(steps):
        b = data.sample_contiguous_batch(ds, batch_size, rng)
        nodes = model.layers_to_nodes(theta.layers, requires_grad=True)
        x = ad.constant(np.concatenate([b.q, b.dq, b.ddq_next], axis=1))
        loss = losses.evaluate_loss("mse", leaves, b.q, b.dq,
                                    model.mlp_forward(nodes, x), b.tau)
        theta, opt = model.optimizer_step(
            theta, model.model_grads(theta, loss, nodes), opt)
    return theta


def pick_place_segments(waypoints, durations, dt: float,
                        payload: float = DEFAULT_PAYLOAD) -> list:
    """Build the five-phase task from six joint-space waypoints.

    Each phase is a minimum-jerk move between consecutive waypoints, so the
    arm is at rest at every boundary; the payload rides along on lift,
    move_over and lower.
    """
    waypoints = [np.asarray(w, dtype=np.float64) for w in waypoints]
    if len(waypoints) != 6:
        raise ValueError(f"need 6 waypoints, got {len(waypoints)}")
    if len(durations) != 5:
        raise ValueError(f"need 5 durations, got {len(durations)}")
    segments = []
    for name, a, b, T in zip(SEGMENT_NAMES, waypoints, waypoints[1:], durations):
        traj = arm.min_jerk_trajectory(a, b, T, dt)
        mass = payload if name in PAYLOAD_SEGMENTS else 0.0
        segments.append(Segment(name, traj, mass))
    return segments


@dataclass(frozen=True)
class LossSpec:
    """One row of the evaluation grid: a loss, its label, and an optimizer."""

    label: str
    loss_params: losses.LossParams
    lr: float
    optimizer: str = "sgd"  # "sgd" | "adam"

    def make_opt(self):
        if self.optimizer == "sgd":
            return model.sgd_state(self.lr)
        if self.optimizer == "adam":
            return model.adam_state(self.lr)
        raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class GridCell:
    spec: LossSpec
    seed: int
    trial: int
    report: AdaptReport


def evaluate_losses_on_task(specs, segments, arm_model, gains, seeds, trials,
                            hidden=(64, 64), batch: int = DEFAULT_BATCH,
                            noise_sigma: float = 0.0,
                            frozen_theta: model.ModelParams | None = None,
                            transform=None):
    """Run every (loss, seed, trial) cell of the adaptation grid.

    A seed fixes the fresh model initialization shared by all losses; a
    trial fixes the sensing-noise realization of the simulated streams
    shared by all losses and seeds.  An optional transform (for example
    input standardization) is applied to each stream before adaptation.
    Returns a list of GridCell plus, when frozen_theta is given, one cell
    per trial labelled 'pretrained' with seed -1.
    """
    J = arm_model.joint_count
    cells = []
    for trial in range(trials):
        rng = np.random.default_rng(1000 + trial) if noise_sigma > 0 else None
        streams = simulate_segments(arm_model, gains, segments,
                                    noise_sigma, rng)
        if transform is not None:
            streams = [transform(s) for s in streams]
        for seed in range(seeds):
            theta0 = model.init_model(J, hidden, seed)
            for spec in specs:
                report = run_segmented_task(theta0, spec.loss_params,
                                            spec.make_opt(), segments,
                                            arm_model, gains, batch,
                                            streams=streams)
                cells.append(GridCell(spec, seed, trial, report))
        if frozen_theta is not None:
            report = frozen_segmented_report(frozen_theta, segments, streams,
                                             batch)
            spec = LossSpec("pretrained", losses.LossParams("mse", J), 0.0)
            cells.append(GridCell(spec, -1, trial, report))
    return cells


def adapt_over_streams(specs, named_streams, seeds, hidden=(64, 64),
                       batch: int = DEFAULT_BATCH,
                       frozen_theta: model.ModelParams | None = None,
                       trial: int = 0):
    """Grid evaluation over independent streams (each adapted from scratch).

    Unlike the segmented task there is no warm starting: every stream is
    adapted starting from the seed's fresh initialization.  Each stream
    plays the role of one segment in the returned reports.
    """
    if not named_streams:
        raise ValueError("no streams given")
    J = named_streams[0][1].q.shape[1]
    cells = []
    for seed in range(seeds):
        theta0 = model.init_model(J, hidden, seed)
        for spec in specs:
            reports = []
            last = None
            for name, stream in named_streams:
                last = online_adapt(theta0, spec.loss_params, spec.make_opt(),
                                    stream, batch, name)
                reports.append(last.segments[0])
            cells.append(GridCell(spec, seed, trial,
                                  AdaptReport(reports, last.theta, last.opt,
                                              batch)))
    if frozen_theta is not None:
        reports = []
        for name, stream in named_streams:
            rep = online_adapt(frozen_theta, losses.LossParams("mse", J),
                               model.sgd_state(0.0), stream, batch, name,
                               update=False)
            reports.append(rep.segments[0])
        spec = LossSpec("pretrained", losses.LossParams("mse", J), 0.0)
        cells.append(GridCell(spec, -1, trial,
                              AdaptReport(reports, frozen_theta,
                                          model.sgd_state(0.0), batch)))
    return cells
