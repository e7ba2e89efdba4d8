"""Experiment configuration: one seed drives the whole pipeline, and the
config hash is stamped into every output file."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    # corpus
    n_artists: int = 500
    dim: int = 16
    n_genres: int = 5
    # population sizes
    n_train_users: int = 20000
    n_heldout_users: int = 4096
    n_simulate_users: int = 10000
    n_launch_users: int = 30000
    # policies
    behavior_policies: list = field(default_factory=lambda: ["baseline"])
    test_policies: list = field(default_factory=lambda: [{"type": "pctr"}])
    n_insert: int = 2
    control_policy: str = "baseline"
    # sweeps and ordering studies
    sweep_lambdas: list = field(default_factory=lambda: [
        0.001, 0.01, 0.05, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0])
    sweep_control_lambda: float = 0.1
    sweep_users: int = 2000
    ordering_lambdas: list = field(default_factory=lambda: [0.001, 0.05, 0.2])
    ordering_reps: int = 10
    ordering_sim_users: int = 10000
    # model hyper-parameter overrides (merged into the dataclass defaults)
    stategen: dict = field(default_factory=dict)
    sessiongen: dict = field(default_factory=dict)
    pctr_filter: dict = field(default_factory=dict)
    # the trade-off family scores with a history-only pCTR variant
    sweep_pctr_filter: dict = field(
        default_factory=lambda: {"drop_features": ["log_geo_popularity"]})
    world: dict = field(default_factory=dict)
    # metrics / service
    n_bootstrap: int = 2000
    n_demo_accounts: int = 50
    read_mode: str = "merge"
    n_workers: int = 1

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.n_artists < self.n_genres:
            raise ConfigError("need at least one artist per genre")
        if not self.behavior_policies:
            raise ConfigError("need at least one behavior policy")
        if self.read_mode not in ("merge", "replace"):
            raise ConfigError(f"unknown read mode {self.read_mode!r}")

    @property
    def config_hash(self) -> str:
        body = asdict(self)
        # where results land and how many workers produce them cannot
        # change the results, so they stay out of the hash
        body.pop("out_dir", None)
        body.pop("n_workers", None)
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        """Provenance fields embedded in every output file."""
        return {"config_hash": self.config_hash, "onboardsim_version": __version__}

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"config": asdict(self), **self.stamp()}, fh,
                      sort_keys=True, indent=1)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            payload = json.load(fh)
        body = payload.get("config", payload)
        try:
            return cls(**body)
        except TypeError as exc:
            raise ConfigError(f"bad config file {path}: {exc}") from None
