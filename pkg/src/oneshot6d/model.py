"""Parameter assembly for the full matcher and the checkpoint file format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import ad, features, matching, refine3d
from .config import Config
from .iolayer import IOLayerParams, init_io_layer_params

CKPT_MAGIC = b"OS6DCKPT"


class PoseModel:
    """Holds the named parameter dict and the per-layer views over it."""

    def __init__(self, cfg: Config, rng: np.random.Generator | None = None, params=None):
        self.cfg = cfg
        if params is not None:
            self.params = params
        else:
            if rng is None:
                rng = np.random.default_rng(cfg.seed)
            self.params = features.init_feature_params(
                rng, cfg.channels, cfg.c_coarse, cfg.c_fine
            )
            for layer in range(cfg.n_io_layers):
                init_io_layer_params(rng, self.params, f"io{layer}", cfg.c_coarse)
            init_io_layer_params(rng, self.params, "iof", cfg.c_fine)
            refine3d.init_refine_head_params(rng, self.params, cfg.zoom_classes)
        self.io_layers = [
            IOLayerParams(self.params, f"io{layer}", cfg.c_coarse, cfg.cross_aggregates_values)
            for layer in range(cfg.n_io_layers)
        ]
        self.fine_io = IOLayerParams(self.params, "iof", cfg.c_fine, True)

    def extract(self, image: np.ndarray) -> features.FeaturePyramid:
        return features.extract(self.params, image)

    def encode_query(self, pyr: features.FeaturePyramid) -> ad.Tensor:
        return features.encode_2d(pyr.coarse_flat, pyr.coarse_shape)

    def encode_template(self, points: np.ndarray, coarse_feats: ad.Tensor) -> ad.Tensor:
        return ad.add(coarse_feats, features.encode_3d(self.params, points))

    def confidence_fn(self, img: ad.Tensor, obj: ad.Tensor) -> ad.Tensor:
        return matching.dual_softmax(matching.score_matrix(img, obj, self.cfg.tau))

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


# ---- checkpoint format --------------------------------------------------


def _write_record(f, name: str, arr: np.ndarray):
    nb = name.encode()
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<q", d))
    f.write(arr.tobytes())


def _read_record(f):
    raw = f.read(2)
    if not raw:
        return None
    (nlen,) = struct.unpack("<H", raw)
    name = f.read(nlen).decode()
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<q", f.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(f.read(count * 8)).reshape(shape).copy()
    return name, arr


def save_checkpoint(path: Path, model: PoseModel, extra: dict | None = None, epoch: int = 0):
    """Flat (name, shape, float64 values) records; magic + version header.

    ``extra`` carries optimizer state and rng state as additional records.
    """
    path = Path(path)
    records = {f"param.{k}": v.data for k, v in model.params.items()}
    if extra:
        records.update(extra)
    fp = model.cfg.fingerprint().encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IIq", 1, len(records), epoch))
        f.write(struct.pack("<H", len(fp)))
        f.write(fp)
        for name in sorted(records):
            _write_record(f, name, records[name])


def load_checkpoint(path: Path, cfg: Config, strict_fingerprint: bool = False):
    """Returns (PoseModel, extra record dict, epoch)."""
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        version, count, epoch = struct.unpack("<IIq", f.read(16))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        (fplen,) = struct.unpack("<H", f.read(2))
        fp = f.read(fplen).decode()
        records = {}
        for _ in range(count):
            rec = _read_record(f)
            if rec is None:
                raise ValueError("truncated checkpoint")
            records[rec[0]] = rec[1]
    if strict_fingerprint and fp != cfg.fingerprint():
        raise ValueError("checkpoint config fingerprint mismatch")
    params = {
        k[len("param.") :]: ad.Tensor(v, requires_grad=True)
        for k, v in records.items()
        if k.startswith("param.")
    }
    extra = {k: v for k, v in records.items() if not k.startswith("param.")}
    model = PoseModel(cfg, params=params)
    return model, extra, epoch
