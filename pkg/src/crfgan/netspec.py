"""Declarative layer stacks for G1, G2, E, D and the CRF head.

A :class:`NetGraph` is the single source of truth for a network: the torch
module is built from it, and parameter counts / activation sizes are computed
from it in closed form.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GraphError, ParameterError
from .subvolume import GridGeometry

SCORE_EPS = 1e-6
INIT_STD = 0.02
LEAK = 0.2

LAYER_KINDS = (
    "conv3d",
    "transposed-conv3d",
    "norm",
    "nonlinearity",
    "resize",
    "linear",
    "pool",
    "reshape",
    "pairwise",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    c_in: int = 0
    c_out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    variant: str = ""
    factor: int = 1
    target: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")

    @property
    def n_params(self) -> int:
        k = self.kind
        if k in ("conv3d", "transposed-conv3d"):
            return self.c_in * self.c_out * self.kernel**3 + self.c_out
        if k == "linear":
            return self.c_in * self.c_out + self.c_out
        if k == "norm" and self.variant == "instance":
            return 2 * self.c_in  # affine scale + shift
        if k == "pairwise":
            return 2  # coupling weight and log-bandwidth
        return 0

    def out_shape(self, shape: tuple) -> tuple:
        """Per-sample output shape (no batch axis)."""
        k = self.kind
        if k in ("conv3d", "transposed-conv3d"):
            if len(shape) != 4 or shape[0] != self.c_in:
                raise GraphError(f"{k} expects ({self.c_in}, D, H, W), got {shape}")
            if k == "conv3d":
                sp = [(n + 2 * self.padding - self.kernel) // self.stride + 1 for n in shape[1:]]
            else:
                sp = [(n - 1) * self.stride - 2 * self.padding + self.kernel for n in shape[1:]]
            if min(sp) < 1:
                raise GraphError(f"{k} collapses spatial shape {shape}")
            return (self.c_out, *sp)
        if k == "linear":
            if shape != (self.c_in,) and shape[-1:] != (self.c_in,):
                raise GraphError(f"linear expects trailing dim {self.c_in}, got {shape}")
            return shape[:-1] + (self.c_out,)
        if k == "resize":
            return (shape[0], *(n * self.factor for n in shape[1:]))
        if k == "pool":
            if self.variant == "global":
                return (shape[0],)
            if any(n % self.factor for n in shape[1:]):
                raise GraphError(f"pool factor {self.factor} does not divide {shape}")
            return (shape[0], *(n // self.factor for n in shape[1:]))
        if k == "reshape":
            if math.prod(shape) != math.prod(self.target):
                raise GraphError(f"cannot reshape {shape} to {self.target}")
            return tuple(self.target)
        if k == "pairwise":
            return shape[:1]  # one marginal per patch
        return tuple(shape)

    def to_module(self) -> nn.Module:
        k = self.kind
        if k == "conv3d":
            return nn.Conv3d(self.c_in, self.c_out, self.kernel, self.stride, self.padding)
        if k == "transposed-conv3d":
            return nn.ConvTranspose3d(self.c_in, self.c_out, self.kernel, self.stride, self.padding)
        if k == "linear":
            return nn.Linear(self.c_in, self.c_out)
        if k == "norm":
            if self.variant == "instance":
                return nn.InstanceNorm3d(self.c_in, affine=True)
            if self.variant == "pixel":
                return PixelNorm()
        if k == "nonlinearity":
            return {
                "leaky_relu": lambda: nn.LeakyReLU(LEAK),
                "relu": nn.ReLU,
                "tanh": nn.Tanh,
                "sigmoid": nn.Sigmoid,
            }[self.variant]()
        if k == "resize":
            return nn.Upsample(scale_factor=self.factor, mode="nearest")
        if k == "pool":
            if self.variant == "global":
                return GlobalAvgPool()
            return nn.AvgPool3d(self.factor)
        if k == "reshape":
            return Reshape(self.target)
        raise GraphError(f"layer kind {k!r} has no standalone module")


class PixelNorm(nn.Module):
    """Per-voxel normalization across channels; spatially local, unlike instance norm."""

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3, 4))


class Reshape(nn.Module):
    def __init__(self, target):
        super().__init__()
        self.target = tuple(target)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.target)


@dataclass(frozen=True)
class NetGraph:
    name: str
    layers: tuple[LayerSpec, ...]
    in_shape: tuple  # nominal per-sample input shape

    def trace(self, in_shape: tuple | None = None) -> list[tuple]:
        """Output shape of every layer for a given input."""
        shape = tuple(in_shape if in_shape is not None else self.in_shape)
        shapes = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        return shapes

    def out_shape(self, in_shape: tuple | None = None) -> tuple:
        shapes = self.trace(in_shape)
        return shapes[-1] if shapes else tuple(in_shape or self.in_shape)

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"name": self.name, "layers": [asdict(l) for l in self.layers]}, sort_keys=True
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def count_params(g: NetGraph) -> int:
    return sum(layer.n_params for layer in g.layers)


def receptive_radius(g: NetGraph) -> int:
    """Depth reach, in output voxels, of the convolutions in an upsampling stack.

    Each stride-1 conv with kernel k contributes (k - 1) / 2 input units, and
    one unit at that layer spans (total upsampling / upsampling so far)
    output voxels.
    """
    total = math.prod(l.factor for l in g.layers if l.kind == "resize")
    so_far = 1
    rho = 0
    for layer in g.layers:
        if layer.kind == "resize":
            so_far *= layer.factor
        elif layer.kind == "conv3d":
            if layer.stride != 1:
                raise GraphError("receptive_radius expects stride-1 convolutions")
            rho += (layer.kernel - 1) // 2 * (total // so_far)
    return rho


@dataclass
class ModelConfig:
    resolution: int = 64
    scale: int = 4
    extent: int | None = None
    latent_dim: int = 128
    embed_channels: int = 64
    g1_base_channels: int = 256
    g2_channels: tuple[int, ...] = (32, 16)
    d_channels: tuple[int, ...] = (32, 64, 128, 256)
    crf_iterations: int = 5
    crf_max_patches: int = 512

    def __post_init__(self):
        self.g2_channels = tuple(self.g2_channels)
        self.d_channels = tuple(self.d_channels)
        if self.latent_dim < 1:
            raise ParameterError("latent_dim must be >= 1")
        if 2 ** len(self.g2_channels) != self.scale:
            raise ParameterError(
                f"scale {self.scale} needs log2(scale) G2 blocks, got {len(self.g2_channels)}"
            )
        d = self.geometry().embed_shape[0]
        if d < 8 or d & (d - 1):
            raise ParameterError(f"embedding size {d} must be a power of two >= 8")

    def geometry(self) -> GridGeometry:
        return GridGeometry.for_resolution(self.resolution, self.scale, self.extent)

    @property
    def embed_size(self) -> int:
        return self.resolution // self.scale


def g1_graph(cfg: ModelConfig) -> NetGraph:
    c0 = cfg.g1_base_channels
    layers = [
        LayerSpec("linear", cfg.latent_dim, c0 * 64),
        LayerSpec("nonlinearity", variant="leaky_relu"),
        LayerSpec("reshape", target=(c0, 4, 4, 4)),
    ]
    n_blocks = int(math.log2(cfg.embed_size // 4))
    c = c0
    for i in range(n_blocks):
        out = cfg.embed_channels if i == n_blocks - 1 else max(cfg.embed_channels, c0 >> (i + 1))
        layers += [
            LayerSpec("resize", variant="nearest", factor=2),
            LayerSpec("conv3d", c, out, 3, 1, 1),
            LayerSpec("norm", out, variant="instance"),
            LayerSpec("nonlinearity", variant="leaky_relu"),
        ]
        c = out
    return NetGraph("G1", tuple(layers), (cfg.latent_dim,))


def g2_graph(cfg: ModelConfig, extent: int | None = None) -> NetGraph:
    layers = []
    c = cfg.embed_channels
    for out in cfg.g2_channels:
        layers += [
            LayerSpec("resize", variant="nearest", factor=2),
            LayerSpec("conv3d", c, out, 3, 1, 1),
            LayerSpec("norm", out, variant="pixel"),
            LayerSpec("nonlinearity", variant="leaky_relu"),
        ]
        c = out
    layers += [LayerSpec("conv3d", c, 1, 3, 1, 1), LayerSpec("nonlinearity", variant="tanh")]
    e = extent if extent is not None else cfg.geometry().extent
    s = cfg.embed_size
    return NetGraph("G2", tuple(layers), (cfg.embed_channels, e, s, s))


def encoder_graph(cfg: ModelConfig, extent: int | None = None) -> NetGraph:
    """Mirror of G2: first conv undoes G2's output conv, each strided conv undoes one upsample."""
    chans = list(reversed(cfg.g2_channels))
    layers = [
        LayerSpec("conv3d", 1, chans[0], 3, 1, 1),
        LayerSpec("norm", chans[0], variant="instance"),
        LayerSpec("nonlinearity", variant="leaky_relu"),
    ]
    c = chans[0]
    for out in chans[1:] + [cfg.embed_channels]:
        layers += [
            LayerSpec("conv3d", c, out, 3, 2, 1),
            LayerSpec("norm", out, variant="instance"),
            LayerSpec("nonlinearity", variant="leaky_relu"),
        ]
        c = out
    e = extent if extent is not None else cfg.geometry().extent
    r = cfg.resolution
    return NetGraph("E", tuple(layers), (1, e * cfg.scale, r, r))


def discriminator_graph(cfg: ModelConfig, depth: int | None = None, size: int | None = None) -> NetGraph:
    layers = []
    c = 1
    for out in cfg.d_channels:
        layers += [LayerSpec("conv3d", c, out, 3, 2, 1), LayerSpec("nonlinearity", variant="leaky_relu")]
        c = out
    layers += [
        LayerSpec("pool", variant="global"),
        LayerSpec("linear", c, 1),
        LayerSpec("nonlinearity", variant="sigmoid"),
    ]
    size = size if size is not None else cfg.resolution
    depth = depth if depth is not None else cfg.geometry().extent * cfg.scale
    return NetGraph("D", tuple(layers), (1, depth, size, size))


def crf_pool_factor(embed_shape: tuple[int, int, int], max_patches: int) -> int:
    """Smallest power of two f with prod(n // f) <= max_patches."""
    f = 1
    while math.prod(max(1, n // f) for n in embed_shape) > max_patches:
        f *= 2
    return f


def crf_head_graph(cfg: ModelConfig) -> NetGraph:
    s = cfg.embed_size
    f = crf_pool_factor((s, s, s), cfg.crf_max_patches)
    n = (s // f) ** 3
    layers = []
    if f > 1:
        layers.append(LayerSpec("pool", variant="avg", factor=f))
    layers += [
        LayerSpec("reshape", target=(n, cfg.embed_channels)),  # patches as rows
        LayerSpec("linear", cfg.embed_channels, 2),
        LayerSpec("pairwise", factor=cfg.crf_iterations),
    ]
    return NetGraph("CRF-head", tuple(layers), (cfg.embed_channels, s, s, s))


def surrogate_branch_graphs(cfg: ModelConfig) -> list[NetGraph]:
    """Parameter-count stand-in for an extra low-resolution GAN.

    A low-res image head on the embedding plus a discriminator with D's layer
    stack operating on the embedding-resolution image.
    """
    c_mid = cfg.g2_channels[0]
    s = cfg.embed_size
    head = NetGraph(
        "lowres-G-head",
        (
            LayerSpec("conv3d", cfg.embed_channels, c_mid, 3, 1, 1),
            LayerSpec("nonlinearity", variant="leaky_relu"),
            LayerSpec("conv3d", c_mid, 1, 3, 1, 1),
            LayerSpec("nonlinearity", variant="tanh"),
        ),
        (cfg.embed_channels, s, s, s),
    )
    low_d = discriminator_graph(cfg, depth=s, size=s)
    low_d = NetGraph("lowres-D", low_d.layers, low_d.in_shape)
    return [head, low_d]


def model_graphs(cfg: ModelConfig) -> dict[str, NetGraph]:
    return {
        "G1": g1_graph(cfg),
        "G2": g2_graph(cfg),
        "E": encoder_graph(cfg),
        "D": discriminator_graph(cfg),
        "CRF-head": crf_head_graph(cfg),
    }


class GraphNet(nn.Module):
    """Sequential torch module realised from a NetGraph."""

    def __init__(self, graph: NetGraph):
        super().__init__()
        self.graph = graph
        self.body = nn.Sequential(*[layer.to_module() for layer in graph.layers])

    def forward(self, x):
        return self.body(x)


def init_params(module: nn.Module, generator: torch.Generator) -> None:
    """N(0, 0.02) weights, zero biases; norm layers start as identity."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm3d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def runtime_param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_net(graph: NetGraph, generator: torch.Generator | None = None) -> GraphNet:
    net = GraphNet(graph)
    if generator is not None:
        init_params(net, generator)
    return net


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise GraphError(f"{what} produced non-finite values")


def g1_forward(g1: GraphNet, z: torch.Tensor) -> torch.Tensor:
    """Latent batch (B, latent) -> embedding grid (B, C_e, d, h, w)."""
    latent = g1.graph.in_shape[0]
    if z.ndim != 2 or z.shape[1] != latent:
        raise GraphError(f"G1 expects latent of shape (B, {latent}), got {tuple(z.shape)}")
    return g1(z)


def g2_min_extent(g2: GraphNet) -> int:
    scale = math.prod(l.factor for l in g2.graph.layers if l.kind == "resize")
    return max(1, math.ceil(receptive_radius(g2.graph) / scale))


def g2_forward(g2: GraphNet, a_sub: torch.Tensor) -> torch.Tensor:
    """Embedding slab (B, C_e, e, h, w) -> voxel slab (B, 1, e*s, s*h, s*w) in [-1, 1].

    Fully convolutional: the same parameters serve training slabs and the
    whole embedding at inference.
    """
    c_e, _, h, w = g2.graph.in_shape
    if a_sub.ndim != 5 or a_sub.shape[1] != c_e or tuple(a_sub.shape[3:]) != (h, w):
        raise GraphError(f"G2 expects (B, {c_e}, e, {h}, {w}), got {tuple(a_sub.shape)}")
    if a_sub.shape[2] < g2_min_extent(g2):
        raise GraphError(f"slab extent {a_sub.shape[2]} below G2 minimum {g2_min_extent(g2)}")
    return g2(a_sub)


def encoder_forward(enc: GraphNet, x_sub: torch.Tensor) -> torch.Tensor:
    """Voxel slab (B, 1, e*s, H, W) -> embedding slab (B, C_e, e, h, w)."""
    _, depth, hh, ww = enc.graph.in_shape
    n_down = sum(1 for l in enc.graph.layers if l.kind == "conv3d" and l.stride > 1)
    s = 2**n_down
    if x_sub.ndim != 5 or x_sub.shape[1] != 1 or tuple(x_sub.shape[3:]) != (hh, ww):
        raise GraphError(f"E expects (B, 1, e*{s}, {hh}, {ww}), got {tuple(x_sub.shape)}")
    if x_sub.shape[2] % s:
        raise GraphError(f"slab depth {x_sub.shape[2]} not a multiple of {s}")
    return enc(x_sub)


def discriminator_forward(disc: GraphNet, x_sub: torch.Tensor) -> torch.Tensor:
    """Voxel slab batch -> per-sample realness score in [eps, 1 - eps]."""
    expected = disc.graph.in_shape
    if x_sub.ndim != 5 or tuple(x_sub.shape[1:]) != tuple(expected):
        raise GraphError(f"D expects (B, *{expected}), got {tuple(x_sub.shape)}")
    return disc(x_sub).reshape(-1).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
