"""Run configuration: desk-scale defaults, the paper-scale preset, YAML I/O."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml


@dataclass
class Config:
    # data
    image_size: int = 64
    channels: int = 3
    n_points: int = 8192
    n_viewpoints: int = 100
    view_distance: float = 2.5
    focal: float = 100.0
    n_train_objects: int = 200
    n_test_objects: int = 20
    shape_family: str = "random"
    # model
    c_coarse: int = 64
    c_fine: int = 32
    n_io_layers: int = 3
    prune_schedule: list = field(default_factory=lambda: [0.5, 0.5, None])
    tau: float = 0.1
    theta: float = 0.1
    gamma: float = 2.0
    alpha: float = 100.0
    zoom_classes: int = 100
    fine_window: int = 5
    cross_aggregates_values: bool = True
    # training
    epochs: int = 20
    batch_size: int = 4
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 2
    samples_per_object: int = 2
    m_template: int = 256
    refine_top_k: int = 128
    staged_matching_epochs: int = 0  # epochs with matching losses only
    seed: int = 0
    # augmentation
    color_jitter: float = 0.1
    noise_std: float = 0.02
    zoom_jitter: float = 0.1
    frame_rotation: bool = True
    # evaluation
    test_template_views: int = 48
    test_keypoints: int = 1024
    queries_per_object: int = 30
    pnp_inlier_px: float = 3.0
    pnp_iters: int = 256

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if self.m_template < 1:
            raise ValueError("m_template must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if len(self.prune_schedule) > self.n_io_layers:
            raise ValueError("prune schedule longer than layer stack")

    def fingerprint(self) -> str:
        blob = repr(sorted(asdict(self).items())).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_config(**overrides) -> Config:
    return replace(Config(), **overrides) if overrides else Config()


def paper_config() -> Config:
    """Paper-scale preset; kept for reference, not run in CI."""
    return Config(
        image_size=256,
        n_points=65536,
        n_viewpoints=250,
        n_train_objects=1500,
        epochs=50,
        batch_size=8,
        base_lr=1e-4,
        warmup_epochs=5,
        samples_per_object=10,
        m_template=2048,
        refine_top_k=512,
        test_keypoints=16384,
    )


PRESETS = {"desk": desk_config, "paper": paper_config}


def save_config(cfg: Config, path: Path):
    with open(path, "w") as f:
        yaml.safe_dump(asdict(cfg), f, sort_keys=True)


def load_config(path: Path) -> Config:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError("config file must be a mapping of keys to values")
    known = {f_.name for f_ in Config.__dataclass_fields__.values()}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return Config(**data)
