"""Image-object attention layer with once-computed per-modality projections,
linear attention, and inter-layer keypoint pruning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import EmptyCloud, ShapeMismatch


@dataclass
class IOLayerParams:
    """View over the shared parameter dict for one layer (prefix ``io{l}``)."""

    params: dict
    prefix: str
    width: int
    cross_aggregates_values: bool = True  # False: literal K-aggregation variant

    def __getitem__(self, key: str) -> ad.Tensor:
        return self.params[f"{self.prefix}.{key}"]


def init_io_layer_params(rng, params: dict, prefix: str, width: int, ffn_mult: int = 2):
    for mod in ("img", "obj"):
        for proj in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.{mod}.{proj}"] = ad.parameter((width, width), rng)
        params[f"{prefix}.{mod}.ffn1.w"] = ad.parameter((width, ffn_mult * width), rng)
        params[f"{prefix}.{mod}.ffn1.b"] = ad.parameter(np.zeros(ffn_mult * width))
        params[f"{prefix}.{mod}.ffn2.w"] = ad.parameter((ffn_mult * width, width), rng)
        params[f"{prefix}.{mod}.ffn2.b"] = ad.parameter(np.zeros(width))
        for norm in ("n1", "n2"):
            params[f"{prefix}.{mod}.{norm}.g"] = ad.parameter(np.ones(width))
            params[f"{prefix}.{mod}.{norm}.b"] = ad.parameter(np.zeros(width))
    return IOLayerParams(params=params, prefix=prefix, width=width)


def io_layer_param_count(width: int, ffn_mult: int = 2) -> int:
    per_mod = 4 * width * width  # q, k, v, out
    per_mod += width * ffn_mult * width + ffn_mult * width + ffn_mult * width * width + width
    per_mod += 4 * width  # two layernorms
    return 2 * per_mod


def duplicate_weights_param_count(width: int, ffn_mult: int = 2) -> int:
    """Baseline: separate full projection sets for self and for cross
    attention per modality (the 'double the parameters' alternative)."""
    shared = io_layer_param_count(width, ffn_mult)
    extra_projections = 2 * 3 * width * width  # second (Q,K,V) set per modality
    return shared + extra_projections


def linear_attention(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, eps: float = 1e-9) -> ad.Tensor:
    """Kernelized attention with feature map elu(x)+1; O(L·C²)."""
    phi_q = ad.add(ad.elu(q), 1.0)
    phi_k = ad.add(ad.elu(k), 1.0)
    kv = ad.matmul(ad.transpose(phi_k), v)  # (C, Cv)
    num = ad.matmul(phi_q, kv)  # (L, Cv)
    ksum = ad.tsum(phi_k, axis=0, keepdims=True)  # (1, C)
    den = ad.matmul(phi_q, ad.transpose(ksum))  # (L, 1)
    return ad.mul(num, ad.power(ad.add(den, eps), -1.0))


def _ffn(x: ad.Tensor, p: IOLayerParams, mod: str) -> ad.Tensor:
    h = ad.layernorm(x, p[f"{mod}.n2.g"], p[f"{mod}.n2.b"])
    h = ad.relu(ad.linear(h, p[f"{mod}.ffn1.w"], p[f"{mod}.ffn1.b"]))
    return ad.linear(h, p[f"{mod}.ffn2.w"], p[f"{mod}.ffn2.b"])


def io_layer_forward(
    img: ad.Tensor, obj: ad.Tensor, p: IOLayerParams, instrument: list | None = None
):
    """One bidirectional block. Each modality is projected exactly once; the
    same (Q,K,V) serve its self attention and both cross directions."""
    if img.shape[1] != p.width or obj.shape[1] != p.width:
        raise ShapeMismatch(
            f"feature width {img.shape[1]}/{obj.shape[1]} vs layer width {p.width}"
        )
    hi = ad.layernorm(img, p["img.n1.g"], p["img.n1.b"])
    ho = ad.layernorm(obj, p["obj.n1.g"], p["obj.n1.b"])
    qi, ki, vi = (ad.matmul(hi, p[f"img.{n}"]) for n in ("wq", "wk", "wv"))
    qo, ko, vo = (ad.matmul(ho, p[f"obj.{n}"]) for n in ("wq", "wk", "wv"))
    if instrument is not None:
        instrument.append({"qi": qi, "ki": ki, "vi": vi, "qo": qo, "ko": ko, "vo": vo})

    self_i = linear_attention(qi, ki, vi)
    self_o = linear_attention(qo, ko, vo)
    if p.cross_aggregates_values:
        cross_i = linear_attention(qi, ko, vo)
        cross_o = linear_attention(qo, ki, vi)
    else:  # literal formula: aggregate keys instead of values
        cross_i = linear_attention(qi, ko, ko)
        cross_o = linear_attention(qo, ki, ki)

    img = ad.add(img, ad.matmul(ad.add(self_i, cross_i), p["img.wo"]))
    obj = ad.add(obj, ad.matmul(ad.add(self_o, cross_o), p["obj.wo"]))
    img = ad.add(img, _ffn(img, p, "img"))
    obj = ad.add(obj, _ffn(obj, p, "obj"))
    return img, obj


def grouped_linear_attention(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, eps: float = 1e-9):
    """linear_attention over independent groups: (B,L,C) tensors, no
    cross-group mixing."""
    phi_q = ad.add(ad.elu(q), 1.0)
    phi_k = ad.add(ad.elu(k), 1.0)
    kv = ad.bmm(ad.transpose(phi_k, (0, 2, 1)), v)  # (B, C, Cv)
    num = ad.bmm(phi_q, kv)
    ksum = ad.tsum(phi_k, axis=1, keepdims=True)  # (B, 1, C)
    den = ad.bmm(phi_q, ad.transpose(ksum, (0, 2, 1)))  # (B, L, 1)
    return ad.mul(num, ad.power(ad.add(den, eps), -1.0))


def _proj3(x: ad.Tensor, w: ad.Tensor) -> ad.Tensor:
    b, l, c = x.shape
    return ad.reshape(ad.matmul(ad.reshape(x, (b * l, c)), w), (b, l, -1))


def io_layer_forward_grouped(img: ad.Tensor, obj: ad.Tensor, p: IOLayerParams):
    """Per-group variant of io_layer_forward for (B, L, C) crop tokens
    against (B, L_o, C) object tokens; used by the 3D-refinement stage."""
    hi = ad.layernorm(img, p["img.n1.g"], p["img.n1.b"])
    ho = ad.layernorm(obj, p["obj.n1.g"], p["obj.n1.b"])
    qi, ki, vi = (_proj3(hi, p[f"img.{n}"]) for n in ("wq", "wk", "wv"))
    qo, ko, vo = (_proj3(ho, p[f"obj.{n}"]) for n in ("wq", "wk", "wv"))
    self_i = grouped_linear_attention(qi, ki, vi)
    self_o = grouped_linear_attention(qo, ko, vo)
    cross_i = grouped_linear_attention(qi, ko, vo)
    cross_o = grouped_linear_attention(qo, ki, vi)
    img = ad.add(img, _proj3(ad.add(self_i, cross_i), p["img.wo"]))
    obj = ad.add(obj, _proj3(ad.add(self_o, cross_o), p["obj.wo"]))

    def ffn3(x, mod):
        b, l, c = x.shape
        flat = ad.reshape(x, (b * l, c))
        return ad.reshape(_ffn(flat, p, mod), (b, l, c))

    img = ad.add(img, ffn3(img, "img"))
    obj = ad.add(obj, ffn3(obj, "obj"))
    return img, obj


@dataclass
class IOState:
    image_feats: ad.Tensor  # (L_i, C)
    object_feats: ad.Tensor  # (L_o, C)
    object_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __post_init__(self):
        if self.object_indices.size == 0:
            self.object_indices = np.arange(self.object_feats.shape[0], dtype=np.int64)


def prune_survivors(confidences: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Positions (ascending) of the top-⌈kf·L⌉ keypoints by summed confidence;
    ties broken by lower index."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must be in (0, 1]")
    n = confidences.shape[1]
    keep = int(np.ceil(keep_fraction * n))
    if keep == 0:
        raise EmptyCloud("pruning would remove every keypoint")
    scores = confidences.sum(axis=0)
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:keep])


def prune(state: IOState, confidences: np.ndarray, keep_fraction: float) -> IOState:
    if confidences.shape[1] != state.object_feats.shape[0]:
        raise ShapeMismatch(
            f"confidence columns {confidences.shape[1]} vs tokens {state.object_feats.shape[0]}"
        )
    if keep_fraction == 1.0:
        return state
    survivors = prune_survivors(confidences, keep_fraction)
    return IOState(
        image_feats=state.image_feats,
        object_feats=ad.gather_rows(state.object_feats, survivors),
        object_indices=state.object_indices[survivors],
    )


def stack_forward(state: IOState, layers, prune_schedule, confidence_fn):
    """Alternate io_layer_forward and pruning.

    prune_schedule: per-layer keep fraction (or None/1.0 to skip).
    confidence_fn(img, obj) -> Tensor confidence matrix; called after every
    layer so matches can supervise intermediate matrices and drive pruning.
    Returns (final state, [(confidences, object_indices) per layer]).
    """
    if len(prune_schedule) > len(layers):
        raise ValueError("prune schedule longer than layer stack")
    records = []
    for li, layer in enumerate(layers):
        img, obj = io_layer_forward(state.image_feats, state.object_feats, layer)
        state = IOState(image_feats=img, object_feats=obj, object_indices=state.object_indices)
        conf = confidence_fn(state.image_feats, state.object_feats)
        records.append((conf, state.object_indices.copy()))
        keep = prune_schedule[li] if li < len(prune_schedule) else None
        if keep is not None and keep < 1.0:
            state = prune(state, conf.data, keep)
    return state, records
