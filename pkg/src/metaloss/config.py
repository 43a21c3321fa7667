"""Experiment configuration shared by every command-line entry point.

One JSON file pins the simulated arm, the data collection schedule, the
meta-training hyperparameters and the online adaptation grid, so that each
command is fully reproducible from (config, seed).
"""

import dataclasses
from dataclasses import dataclass, field
import json

import numpy as np

from . import adapt, arm, metatrain


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ArmSection:
    joint_count: int = 3
    masses: list = field(default_factory=lambda: [2.0, 1.5, 1.0])
    lengths: list = field(default_factory=lambda: [0.30, 0.25, 0.20])
    com_offsets: list = field(default_factory=lambda: [0.15, 0.125, 0.10])
    inertias: list = field(default_factory=lambda: [0.025, 0.018, 0.012])
    viscous: list = field(default_factory=lambda: [0.10, 0.06, 0.03])
    coulomb: list = field(default_factory=lambda: [0.06, 0.04, 0.02])
    gravity: float = 9.81
    gravity_compensated: bool = True
    kp: list = field(default_factory=lambda: [160.0, 60.0, 10.0])
    kd: list = field(default_factory=lambda: [12.0, 3.2, 0.40])

    def model(self) -> arm.ArmModel:
        return arm.ArmModel(self.joint_count, self.masses, self.lengths,
                            self.com_offsets, self.inertias,
                            gravity=self.gravity,
                            viscous=np.asarray(self.viscous, dtype=np.float64),
                            coulomb=np.asarray(self.coulomb, dtype=np.float64),
                            gravity_compensated=self.gravity_compensated)

    def gains(self) -> arm.Gains:
        return arm.Gains(np.asarray(self.kp, dtype=np.float64),
                         np.asarray(self.kd, dtype=np.float64))


@dataclass
class CollectSection:
    control_hz: float = 240.0
    duration: float = 10.0
    amplitude: float = 0.6
    q_rest: list = field(default_factory=lambda: [0.5, -0.8, 0.6])
    train_freqs: list = field(
        default_factory=lambda: [0.01, 0.03, 0.05, 0.06, 0.07, 0.08])
    test_freqs: list = field(default_factory=lambda: [0.02, 0.04, 0.09])
    noise_sigma: float = 0.0

    @property
    def dt(self) -> float:
        return 1.0 / self.control_hz

    def all_freqs(self) -> list:
        return sorted(self.train_freqs + self.test_freqs)


@dataclass
class MetaSection:
    epochs: int = 300
    batches_per_epoch: int = 100
    batch_size: int = 256
    alpha: float = 0.001
    eta: float = 0.01
    iters_max: int = 10
    hidden: list = field(default_factory=lambda: [64, 64])
    eval_steps: int = 100
    eval_seeds: int = 5
    resample_halves: bool = False

    def meta_config(self, variant: str, seed: int) -> metatrain.MetaConfig:
        return metatrain.MetaConfig(
            variant, epochs=self.epochs,
            batches_per_epoch=self.batches_per_epoch,
            batch_size=self.batch_size, alpha=self.alpha, eta=self.eta,
            iters_max=self.iters_max, hidden=tuple(self.hidden), seed=seed,
            resample_halves=self.resample_halves,
            eval_steps=self.eval_steps, eval_seeds=self.eval_seeds)


@dataclass
class AdaptSection:
    waypoints: list = field(default_factory=lambda: [
        [0.5, -0.8, 0.6], [-0.3, -0.4, 0.8], [-0.3, 0.2, 0.4],
        [0.7, 0.3, -0.2], [0.7, -0.2, 0.2], [0.5, -0.8, 0.6]])
    durations: list = field(default_factory=lambda: [2.5] * 5)
    payload: float = 0.857
    batch: int = 5
    learned_lr: float = 0.001
    mse_lrs: list = field(default_factory=lambda: [0.001, 0.01])
    adam_lr: float = 0.001
    seeds: int = 5
    trials: int = 1
    noise_sigma: float = 0.0
    pretrain_steps: int = 2000

    def segments(self, dt: float) -> list:
        points = [np.asarray(w, dtype=np.float64) for w in self.waypoints]
        return adapt.pick_place_segments(points, self.durations, dt,
                                         self.payload)


@dataclass
class ExperimentConfig:
    arm: ArmSection = field(default_factory=ArmSection)
    collect: CollectSection = field(default_factory=CollectSection)
    meta: MetaSection = field(default_factory=MetaSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    normalize_inputs: bool = False

    def validate(self) -> "ExperimentConfig":
        J = self.arm.joint_count
        for name in ("masses", "lengths", "com_offsets", "inertias",
                     "viscous", "coulomb", "kp", "kd"):
            if len(getattr(self.arm, name)) != J:
                raise ConfigError(f"arm.{name} must list {J} values")
        if self.collect.control_hz <= 0 or self.collect.duration <= 0:
            raise ConfigError("control_hz and duration must be positive")
        if len(self.collect.q_rest) != J:
            raise ConfigError(f"collect.q_rest must list {J} values")
        train = set(self.collect.train_freqs)
        test = set(self.collect.test_freqs)
        if not train or not test:
            raise ConfigError("train and test frequency lists must be nonempty")
        if train & test:
            raise ConfigError(
                f"frequencies {sorted(train & test)} appear in both splits")
        if any(f <= 0 for f in train | test):
            raise ConfigError("frequencies must be positive")
        if len(self.adapt.durations) != len(self.adapt.waypoints) - 1:
            raise ConfigError("need one duration per waypoint pair")
        for w in self.adapt.waypoints:
            if len(w) != J:
                raise ConfigError(f"each waypoint must list {J} joint angles")
        if self.adapt.seeds < 1 or self.adapt.trials < 1:
            raise ConfigError("adapt.seeds and adapt.trials must be >= 1")
        try:
            self.arm.model()
            self.meta.meta_config("structured", 0)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _section(cls, doc: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown key {sorted(extra)[0]!r} in section {name!r}")
    return cls(**doc)


def config_from_dict(doc: dict) -> ExperimentConfig:
    known = {"arm", "collect", "meta", "adapt", "normalize_inputs"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown top-level key {sorted(extra)[0]!r}")
    cfg = ExperimentConfig(
        arm=_section(ArmSection, doc.get("arm", {}), "arm"),
        collect=_section(CollectSection, doc.get("collect", {}), "collect"),
        meta=_section(MetaSection, doc.get("meta", {}), "meta"),
        adapt=_section(AdaptSection, doc.get("adapt", {}), "adapt"),
        normalize_inputs=bool(doc.get("normalize_inputs", False)))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from err
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(doc)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_config() -> ExperimentConfig:
    return ExperimentConfig().validate()


def hardware_style_config() -> ExperimentConfig:
    """Collection schedule shaped like the hardware sessions: slower, longer runs."""
    cfg = ExperimentConfig()
    cfg.collect.control_hz = 250.0
    cfg.collect.duration = 30.0
    cfg.collect.train_freqs = [0.02, 0.03, 0.04, 0.06, 0.08]
    cfg.collect.test_freqs = [0.05, 0.07]
    return cfg.validate()
