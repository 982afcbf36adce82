"""Point-convolution backbones for bi-temporal change features.

Two variants share the same building blocks: a multi-scale encoder of
kernel-point convolutions over a grid-subsampled position pyramid, nearest-
point feature differencing between epochs, and a light decoder (nearest
upsampling + skip concat + pointwise linear) ending in an embedding that a
prototype layer turns into per-point logits.

`siamese` encodes both clouds with shared weights and feeds the per-scale
feature differences to the decoder; `encoder_fusion` re-injects the
difference into the second cloud's encoder at every scale and decodes the
fused stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..core import PointCloud, grid_subsample
from . import autodiff as ad
from .autodiff import Tensor
from .kernel import KernelDisposition, influence, make_kernel

VARIANTS = ("siamese", "encoder_fusion")


class DegenerateInputError(ValueError):
    """A cloud became empty (or had no counterpart) at some pyramid scale."""


@dataclass
class BackboneConfig:
    variant: str = "encoder_fusion"
    n_scales: int = 3
    channels: tuple = (32, 64, 128)
    k_neighbors: int = 16
    use_handcrafted: bool = True
    n_prototypes: int = 50
    prototype_temperature: float = 0.1
    normalize_embed: bool = True  # False: raw-dot prototype logits
    embed_dim: int = 32
    dl0: float = 1.0
    kernel_radius_factor: float = 2.5
    kernel_sigma_ratio: float = 1.0
    leaky_slope: float = 0.1
    n_handcrafted: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.n_scales < 2:
            raise ValueError("n_scales must be >= 2")
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != self.n_scales:
            raise ValueError("need one channel width per scale")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError("channels must be strictly increasing with depth")

    @property
    def in_channels(self) -> int:
        # One constant channel plus the optional handcrafted columns.
        return 1 + (self.n_handcrafted if self.use_handcrafted else 0)

    def kernel_at(self, scale: int) -> KernelDisposition:
        r = self.kernel_radius_factor * self.dl0 * (2 ** scale)
        return make_kernel(r, r * self.kernel_sigma_ratio)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_scales": self.n_scales,
            "channels": list(self.channels),
            "k_neighbors": self.k_neighbors,
            "use_handcrafted": self.use_handcrafted,
            "n_prototypes": self.n_prototypes,
            "prototype_temperature": self.prototype_temperature,
            "normalize_embed": self.normalize_embed,
            "embed_dim": self.embed_dim,
            "dl0": self.dl0,
            "kernel_radius_factor": self.kernel_radius_factor,
            "kernel_sigma_ratio": self.kernel_sigma_ratio,
            "leaky_slope": self.leaky_slope,
            "n_handcrafted": self.n_handcrafted,
        }

    @staticmethod
    def from_dict(doc: dict) -> "BackboneConfig":
        doc = dict(doc)
        doc["channels"] = tuple(doc["channels"])
        return BackboneConfig(**doc)


class NetParams:
    """Named map of trainable tensors plus a frozen-name set."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, data, frozen: bool = False):
        t = Tensor(data, requires_grad=not frozen)
        self.tensors[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def trainable(self):
        for name, t in self.tensors.items():
            if name not in self.frozen:
                yield name, t

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def set_frozen(self, name: str, frozen: bool):
        t = self.tensors[name]
        t.requires_grad = not frozen
        if frozen:
            self.frozen.add(name)
        else:
            self.frozen.discard(name)

    def cast(self, dtype) -> "NetParams":
        """Copy with every tensor in the given dtype (float64 for gradcheck)."""
        out = NetParams()
        for name, t in self.tensors.items():
            out.add(name, t.data.astype(dtype), frozen=name in self.frozen)
        return out

    def check_finite(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"non-finite values in parameter {name!r}")


def init_params(config: BackboneConfig, seed: int = 0) -> NetParams:
    rng = np.random.default_rng(seed)
    params = NetParams()
    p = config.kernel_at(0).n_points

    def conv(name, c_in, c_out):
        std = np.sqrt(2.0 / (p * c_in))
        params.add(name + ".W", rng.normal(0.0, std, (p, c_in, c_out)).astype(np.float32))
        params.add(name + ".b", np.zeros(c_out, dtype=np.float32))

    def linear(name, c_in, c_out):
        std = np.sqrt(2.0 / c_in)
        params.add(name + ".W", rng.normal(0.0, std, (c_in, c_out)).astype(np.float32))
        params.add(name + ".b", np.zeros(c_out, dtype=np.float32))

    ch = config.channels
    cin = config.in_channels
    if config.variant == "siamese":
        conv("enc.s0", cin, ch[0])
        for s in range(1, config.n_scales):
            conv(f"enc.s{s}", ch[s - 1], ch[s])
    else:
        conv("enc1.s0", cin, ch[0])
        conv("enc2.s0", 2 * cin, ch[0])
        for s in range(1, config.n_scales):
            conv(f"enc1.s{s}", ch[s - 1], ch[s])
            conv(f"enc2.s{s}", 2 * ch[s - 1], ch[s])
        linear("dec.top", 2 * ch[-1], ch[-1])
    for s in range(config.n_scales - 2, -1, -1):
        linear(f"dec.s{s}", ch[s + 1] + ch[s], ch[s])
    linear("dec.out", ch[0], config.embed_dim)
    # Start the embedding head near zero: the cosine-logit path only sees
    # directions, while the contrastive term (quadratic in the embedding
    # norm) starts balanced against the classification loss instead of
    # dominating it through a long norm-deflation phase.
    params["dec.out.W"].data *= 0.02

    proto = rng.normal(0.0, 1.0, (config.n_prototypes, config.embed_dim)).astype(np.float32)
    proto /= np.maximum(np.linalg.norm(proto, axis=1, keepdims=True), 1e-8)
    params.add("proto", proto, frozen=True)
    return params


def point_conv(features_in: Tensor, positions: np.ndarray,
               support_positions: np.ndarray, neighbor_ids: np.ndarray,
               weights: Tensor, bias, kernel: KernelDisposition) -> Tensor:
    """Spec-level convolution entry: computes influence weights and applies
    the fused kernel-point convolution."""
    offsets = positions[neighbor_ids] - support_positions[:, None, :]
    h = influence(kernel, offsets).astype(features_in.data.dtype)
    return ad.point_conv_op(features_in, weights, bias, h, neighbor_ids)


@dataclass
class Pyramid:
    """Per-scale positions of one cloud plus cached neighbor structures."""

    positions: list  # positions[s]: (N_s, 3)
    trees: list

    @staticmethod
    def build(xyz: np.ndarray, config: BackboneConfig) -> "Pyramid":
        if len(xyz) == 0:
            raise DegenerateInputError("empty cloud")
        positions = [np.asarray(xyz, dtype=np.float64)]
        for s in range(1, config.n_scales):
            dl = config.dl0 * (2 ** s)
            sub = grid_subsample(PointCloud(positions[-1]), dl).xyz
            if len(sub) == 0:
                raise DegenerateInputError(f"cloud empty at scale {s}")
            positions.append(sub)
        trees = [cKDTree(p) for p in positions]
        return Pyramid(positions, trees)

    def neighbors(self, scale_src: int, support: np.ndarray, k: int) -> np.ndarray:
        kq = min(k, len(self.positions[scale_src]))
        _, idx = self.trees[scale_src].query(support, k=kq)
        if kq == 1:
            idx = idx[:, None]
        return np.asarray(idx, dtype=np.int64)


def encode(pyr: Pyramid, feats: Tensor, params: NetParams, prefix: str,
           config: BackboneConfig):
    """Multi-scale features: stage 0 convolves in place, deeper stages stride
    onto the next (coarser) pyramid level."""
    if feats.data.shape[0] != len(pyr.positions[0]):
        raise ValueError("input feature count must match scale-0 positions")
    outs = []
    x = feats
    for s in range(config.n_scales):
        src = max(s - 1, 0)
        support = pyr.positions[s]
        nbr = pyr.neighbors(src, support, config.k_neighbors)
        y = point_conv(x, pyr.positions[src], support, nbr,
                       params[f"{prefix}.s{s}.W"], params[f"{prefix}.s{s}.b"],
                       config.kernel_at(s))
        x = ad.leaky_relu(y, config.leaky_slope)
        outs.append(x)
    return outs


def nearest_match(pos_from: np.ndarray, pos_to: np.ndarray) -> np.ndarray:
    """For each row of pos_from, the index of its nearest row in pos_to."""
    if len(pos_to) == 0:
        raise DegenerateInputError("cannot match against an empty cloud")
    _, idx = cKDTree(pos_to).query(pos_from)
    return np.asarray(idx, dtype=np.int64)


def difference_match(feats_1: Tensor, pos_1: np.ndarray, feats_2: Tensor,
                     pos_2: np.ndarray):
    """feats_2 minus the nearest-point feats_1 row, gradients to both sides.

    The matching itself is discrete and treated as a constant.
    """
    m = nearest_match(pos_2, pos_1)
    return ad.sub(feats_2, ad.gather_rows(feats_1, m)), m


def _linear(x: Tensor, params: NetParams, name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[name + ".W"]), params[name + ".b"])


def _decode(diffs_or_skips, deepest: Tensor, pyr2: Pyramid, params: NetParams,
            config: BackboneConfig) -> Tensor:
    """Nearest-neighbor upsampling + skip concat + pointwise linear chain."""
    g = deepest
    for s in range(config.n_scales - 2, -1, -1):
        up = nearest_match(pyr2.positions[s], pyr2.positions[s + 1])
        g = ad.gather_rows(g, up)
        g = ad.concat_cols(g, diffs_or_skips[s])
        g = ad.leaky_relu(_linear(g, params, f"dec.s{s}"), config.leaky_slope)
    return _linear(g, params, "dec.out")


@dataclass
class ForwardOut:
    logits: Tensor  # (n_pc2, K)
    embed: Tensor  # (n_pc2, D) L2-normalized rows
    change_feature: Tensor  # (n_pc2, D) pre-normalization decoder output
    diffs: list = field(default_factory=list)


def forward(pos1: np.ndarray, feats1: np.ndarray, pos2: np.ndarray,
            feats2: np.ndarray, config: BackboneConfig,
            params: NetParams) -> ForwardOut:
    """Per-point logits over the prototypes for every pc2 point.

    feats1/feats2 are raw input channels (constant column + optional
    handcrafted); they are wrapped as non-trainable leaves.
    """
    if feats1.shape[1] != config.in_channels or feats2.shape[1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels")
    pyr1 = Pyramid.build(pos1, config)
    pyr2 = Pyramid.build(pos2, config)
    dtype = params["dec.out.W"].data.dtype
    x1 = Tensor(feats1.astype(dtype))
    x2 = Tensor(feats2.astype(dtype))

    if config.variant == "siamese":
        e1 = encode(pyr1, x1, params, "enc", config)
        e2 = encode(pyr2, x2, params, "enc", config)
        diffs = []
        for s in range(config.n_scales):
            d, _ = difference_match(e1[s], pyr1.positions[s], e2[s], pyr2.positions[s])
            diffs.append(d)
        raw = _decode(diffs, diffs[-1], pyr2, params, config)
    else:
        e1 = encode(pyr1, x1, params, "enc1", config)
        # Fused stream: own features concatenated with the nearest-point
        # difference before every convolution stage.
        m0 = nearest_match(pyr2.positions[0], pyr1.positions[0])
        cur = ad.concat_cols(x2, ad.sub(x2, ad.gather_rows(x1, m0)))
        skips = []
        diffs = []
        x = cur
        for s in range(config.n_scales):
            src = max(s - 1, 0)
            support = pyr2.positions[s]
            nbr = pyr2.neighbors(src, support, config.k_neighbors)
            y = point_conv(x, pyr2.positions[src], support, nbr,
                           params[f"enc2.s{s}.W"], params[f"enc2.s{s}.b"],
                           config.kernel_at(s))
            f2 = ad.leaky_relu(y, config.leaky_slope)
            skips.append(f2)
            d, _ = difference_match(e1[s], pyr1.positions[s], f2, pyr2.positions[s])
            diffs.append(d)
            if s < config.n_scales - 1:
                x = ad.concat_cols(f2, d)
        top = ad.concat_cols(skips[-1], diffs[-1])
        top = ad.leaky_relu(_linear(top, params, "dec.top"), config.leaky_slope)
        raw = _decode(skips, top, pyr2, params, config)

    if config.normalize_embed:
        # eps floor keeps the normalization adjoint bounded when the
        # contrastive term has pulled feature norms toward zero.
        embed = ad.l2_normalize_rows(raw, eps=1e-4)
    else:
        # Raw-dot prototype logits: scale-sensitive, so the classification
        # term resists the contrastive pull on points that must stay apart.
        embed = raw
    logits = ad.scale(ad.matmul(embed, params["proto"], transpose_b=True),
                      1.0 / config.prototype_temperature)
    return ForwardOut(logits=logits, embed=embed, change_feature=raw, diffs=diffs)


def set_prototypes(params: NetParams, centroids: np.ndarray,
                   normalize: bool = True) -> None:
    """Load cluster centroids into the (frozen) prototype layer.

    Rows are L2-normalized for the cosine-logit head; raw-dot heads take the
    centroids as they are.
    """
    proto = params["proto"]
    c = np.asarray(centroids, dtype=np.float32)
    if c.shape != proto.data.shape:
        raise ValueError(
            f"centroid matrix {c.shape} does not match prototype layer {proto.data.shape}"
        )
    if normalize:
        norms = np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-8)
        c = c / norms
    proto.data = c.astype(np.float32)
    proto.grad = None
    params.set_frozen("proto", True)
