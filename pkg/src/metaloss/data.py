"""Inverse-dynamics datasets: collection from simulated tracking runs,
frequency-based train/test splits, contiguous batching, and CSV storage.

A record pairs the state (q_t, dq_t) and applied torque tau_t with the
acceleration observed one step later, ddq_next = (dq_{t+1} - dq_t) / dt.
Accelerations come from finite-differencing the logged velocities, never
from the simulator's internals, so the pipeline matches what a hardware
logger could produce.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import arm


class DataFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


@dataclass(frozen=True)
class DynRecord:
    """One training sample: state and torque at t, acceleration at t+1."""

    q: np.ndarray
    dq: np.ndarray
    ddq_next: np.ndarray
    tau: np.ndarray


@dataclass
class Run:
    """Time-ordered records from a single tracking run at one frequency.

    Stored as (T, J) arrays rather than per-record objects; arrays are
    frozen after construction so runs can be shared freely.
    """

    frequency: float
    q: np.ndarray
    dq: np.ndarray
    ddq_next: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.frequency = float(self.frequency)
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        shape = np.asarray(self.q).shape
        if len(shape) != 2:
            raise ValueError(f"run arrays must be 2-D, got shape {shape}")
        for name in ("q", "dq", "ddq_next", "tau"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
            arr.setflags(write=False)
            setattr(self, name, arr)

    def __len__(self):
        return self.q.shape[0]

    @property
    def joint_count(self):
        return self.q.shape[1]

    def record(self, i: int) -> DynRecord:
        return DynRecord(self.q[i], self.dq[i], self.ddq_next[i], self.tau[i])

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))


@dataclass
class DynDataset:
    """A set of runs sharing one timestep and joint count."""

    runs: list = field(default_factory=list)
    dt: float = 0.0
    joint_count: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.joint_count < 1:
            raise ValueError("joint_count must be >= 1")
        for run in self.runs:
            if run.joint_count != self.joint_count:
                raise ValueError(
                    f"run has {run.joint_count} joints, dataset has {self.joint_count}")

    def __len__(self):
        return sum(len(run) for run in self.runs)


@dataclass(frozen=True)
class Batch:
    """K contiguous records copied out of one run."""

    q: np.ndarray
    dq: np.ndarray
    ddq_next: np.ndarray
    tau: np.ndarray
    run_index: int
    start: int

    def __len__(self):
        return self.q.shape[0]


def track_trajectory(model, gains, traj):
    """Track a reference trajectory with PD control and log the result.

    The arm starts exactly on the reference and the feedforward term is
    zero.  Returns (q, dq, ddq_next, tau) arrays of T - 1 rows: a
    trajectory of T samples yields T - 1 records because the last state has
    no successor to finite-difference against.
    """
    T = len(traj)
    if T < 2:
        raise ValueError("trajectory must have at least 2 samples")
    J = model.joint_count
    if traj.q_d.shape[1] != J:
        raise ValueError(
            f"trajectory has {traj.q_d.shape[1]} joints, model has {J}")
    u_ff = np.zeros(J)
    state = arm.ArmState(traj.q_d[0].copy(), traj.dq_d[0].copy())
    q = np.empty((T - 1, J))
    dq = np.empty((T - 1, J))
    ddq_next = np.empty((T - 1, J))
    tau = np.empty((T - 1, J))
    for t in range(T - 1):
        command = arm.pd_ff_control(traj.q_d[t], traj.dq_d[t], u_ff, state, gains)
        new_state = arm.step(model, state, command, traj.dt, index=t)
        q[t] = state.q
        dq[t] = state.dq
        ddq_next[t] = (new_state.dq - state.dq) / traj.dt
        tau[t] = command
        state = new_state
    return q, dq, ddq_next, tau


def collect_run(model, gains, traj, frequency, noise_sigma=0.0, rng=None) -> Run:
    """Track one trajectory and package the log as a labelled Run.

    The torque applied to the simulator is the clean PD command;
    noise_sigma adds zero-mean Gaussian sensing noise to the *recorded*
    torque only.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if noise_sigma > 0 and rng is None:
        raise ValueError("noise_sigma > 0 requires an rng")
    try:
        q, dq, ddq_next, tau = track_trajectory(model, gains, traj)
    except arm.SimulationDiverged as err:
        raise arm.SimulationDiverged(
            f"run at frequency {frequency:g} Hz: {err}", err.step_index) from err
    if noise_sigma > 0:
        tau = tau + rng.normal(0.0, noise_sigma, tau.shape)
    return Run(frequency, q, dq, ddq_next, tau)


def collect_sine_dataset(model, gains, frequencies, amplitude, dt, duration,
                         q_rest=None, noise_sigma=0.0, rng=None) -> DynDataset:
    """Collect one sine-tracking run per frequency around the rest posture."""
    if len(frequencies) == 0:
        raise ValueError("frequencies must be non-empty")
    J = model.joint_count
    if q_rest is None:
        q_rest = np.zeros(J)
    A = np.asarray(amplitude, dtype=np.float64)
    if A.ndim == 0:
        A = np.full(J, float(A))
    runs = []
    for f in frequencies:
        traj = arm.sine_trajectory(A, f, dt, duration, q_rest)
        runs.append(collect_run(model, gains, traj, f, noise_sigma, rng))
    return DynDataset(runs, dt, J)


def split_by_frequency(ds: DynDataset, train_freqs, test_freqs):
    """Partition runs into (train, test) datasets by exact frequency match.

    Every run's frequency must appear in exactly one of the two lists.
    """
    train_set = set(float(f) for f in train_freqs)
    test_set = set(float(f) for f in test_freqs)
    overlap = train_set & test_set
    if overlap:
        raise ValueError(f"frequencies in both splits: {sorted(overlap)}")
    train_runs, test_runs = [], []
    for run in ds.runs:
        if run.frequency in train_set:
            train_runs.append(run)
        elif run.frequency in test_set:
            test_runs.append(run)
        else:
            raise ValueError(
                f"run frequency {run.frequency:g} Hz assigned to neither split")
    return (DynDataset(train_runs, ds.dt, ds.joint_count),
            DynDataset(test_runs, ds.dt, ds.joint_count))


def sample_contiguous_batch(ds: DynDataset, K: int, rng) -> Batch:
    """Draw K consecutive records from a uniformly chosen run and start.

    The run is chosen uniformly among runs long enough to hold K records,
    then the start index uniformly among valid positions; batches never
    cross run boundaries.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    eligible = [i for i, run in enumerate(ds.runs) if len(run) >= K]
    if not eligible:
        longest = max((len(run) for run in ds.runs), default=0)
        raise ValueError(f"no run has {K} records (longest has {longest})")
    run_index = eligible[int(rng.integers(len(eligible)))]
    run = ds.runs[run_index]
    start = int(rng.integers(len(run) - K + 1))
    stop = start + K
    return Batch(run.q[start:stop].copy(), run.dq[start:stop].copy(),
                 run.ddq_next[start:stop].copy(), run.tau[start:stop].copy(),
                 run_index, start)


def datasets_equal(a: DynDataset, b: DynDataset) -> bool:
    """Bitwise equality of two datasets."""
    if a.dt != b.dt or a.joint_count != b.joint_count or len(a.runs) != len(b.runs):
        return False
    for ra, rb in zip(a.runs, b.runs):
        if ra.frequency != rb.frequency:
            return False
        for name in ("q", "dq", "ddq_next", "tau"):
            if not np.array_equal(getattr(ra, name), getattr(rb, name)):
                return False
    return True


def _header(J: int) -> list:
    cols = ["t", "freq"]
    for prefix in ("q", "dq", "ddqn", "tau"):
        cols.extend(f"{prefix}_{j}" for j in range(J))
    return cols


def write_csv(ds: DynDataset, path):
    """Write a dataset as CSV, one row per record.

    The t column holds the time k * dt within each run, so the timestep can
    be recovered on read and a t reset marks a run boundary.  Floats use 17
    significant digits, which round-trips 64-bit values exactly.
    """
    J = ds.joint_count
    with open(path, "w") as f:
        f.write(",".join(_header(J)) + "\n")
        for run in ds.runs:
            for k in range(len(run)):
                vals = [k * ds.dt, run.frequency]
                vals.extend(run.q[k])
                vals.extend(run.dq[k])
                vals.extend(run.ddq_next[k])
                vals.extend(run.tau[k])
                f.write(",".join("%.17g" % v for v in vals) + "\n")


def read_csv(path) -> DynDataset:
    """Read a dataset written by write_csv.

    Raises DataFormatError with the offending line number on malformed input.
    """
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].strip():
        raise DataFormatError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    n_cols = len(header)
    if n_cols < 6 or (n_cols - 2) % 4 != 0:
        raise DataFormatError(
            f"{path}:1: header has {n_cols} columns, expected t,freq plus "
            "four groups of per-joint columns")
    J = (n_cols - 2) // 4
    expected = _header(J)
    if header != expected:
        for got, want in zip(header, expected):
            if got != want:
                raise DataFormatError(
                    f"{path}:1: expected column '{want}', got '{got}'")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != n_cols:
            raise DataFormatError(
                f"{path}:{lineno}: expected {n_cols} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as err:
            raise DataFormatError(f"{path}:{lineno}: {err}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    # Split into runs where the frequency changes or the clock resets.
    run_rows, runs, dt = [], [], None

    def close_run():
        nonlocal dt
        block = np.array(run_rows)
        t = block[:, 0]
        if len(t) >= 2:
            step = t[1] - t[0]
            if dt is None:
                if step <= 0:
                    raise DataFormatError(f"{path}: non-increasing time column")
                dt = step
            elif step != dt:
                raise DataFormatError(
                    f"{path}: inconsistent timestep {step:g} vs {dt:g}")
        cols = [block[:, 2 + g * J:2 + (g + 1) * J] for g in range(4)]
        runs.append(Run(block[0, 1], *cols))

    for row in rows:
        if run_rows and (row[1] != run_rows[-1][1] or row[0] <= run_rows[-1][0]):
            close_run()
            run_rows = []
        run_rows.append(row)
    close_run()
    if dt is None:
        raise DataFormatError(f"{path}: no run long enough to recover the timestep")
    return DynDataset(runs, dt, J)


def input_stats(ds: DynDataset):
    """Per-dimension mean and std of the model inputs, laid out [q, dq, ddq_next]."""
    x = np.concatenate([np.hstack([r.q, r.dq, r.ddq_next]) for r in ds.runs], axis=0)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, np.where(sd < 1e-12, 1.0, sd)


def standardize_dataset(ds: DynDataset, mu, sd) -> DynDataset:
    """Z-score q, dq and ddq_next with the given stats; torques stay raw."""
    J = ds.joint_count
    runs = []
    for r in ds.runs:
        runs.append(Run(r.frequency,
                        (r.q - mu[:J]) / sd[:J],
                        (r.dq - mu[J:2 * J]) / sd[J:2 * J],
                        (r.ddq_next - mu[2 * J:]) / sd[2 * J:],
                        r.tau))
    return DynDataset(runs, ds.dt, J)
