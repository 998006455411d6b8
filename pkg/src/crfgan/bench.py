"""Parameter counts, analytic activation memory and measured training speed.

Activation memory model (bytes)::

    act   = elem_bytes * batch * 2 * sum_{net in pass} sum_{layer} numel(layer output)
    param = elem_bytes * n_params
    moment= 2 * param                      (two Adam moment buffers)

The factor 2 counts the forward output plus the copy retained for backward.
A pass runs G1 on the latent, G2/E/D on a slab of depth ``c`` (sub-volume
mode) or ``d`` (full-volume mode), and the CRF head on the embedding, whose
pairwise layer holds the N x N kernel and T sweep traces of N values.
"""
from __future__ import annotations

import csv
import math
import platform
import statistics
import time
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
import torch

from . import kernels
from .netspec import (
    ModelConfig,
    NetGraph,
    count_params,
    discriminator_graph,
    encoder_graph,
    g2_graph,
    model_graphs,
    surrogate_branch_graphs,
)

ELEM_BYTES = 4
RESOLUTIONS = (64, 128, 256)


@dataclass
class ParamReport:
    resolution: int
    per_module: dict[str, int]
    include_surrogate: bool

    @property
    def total(self) -> int:
        return sum(self.per_module.values())


def param_report(config, include_surrogate: bool = False) -> ParamReport:
    mc = _model_config(config)
    counts = {name: count_params(g) for name, g in model_graphs(mc).items()}
    if include_surrogate:
        for g in surrogate_branch_graphs(mc):
            counts[g.name] = count_params(g)
    return ParamReport(mc.resolution, counts, include_surrogate)


def param_table(config, resolutions: Sequence[int] = RESOLUTIONS) -> list[dict]:
    """One row per resolution: CRF-GAN total, total with the surrogate branch, relative reduction."""
    rows = []
    for r in resolutions:
        cfg = _at_resolution(config, r)
        base = param_report(cfg).total
        with_branch = param_report(cfg, include_surrogate=True).total
        rows.append({
            "resolution": r,
            "crf_gan": base,
            "with_lowres_branch": with_branch,
            "reduction_pct": 100.0 * (1.0 - base / with_branch),
        })
    return rows


def layer_elements(layer, in_shape, out_shape) -> int:
    if layer.kind == "pairwise":
        n = out_shape[0]
        return n * n + n * layer.factor
    return math.prod(out_shape)


def activation_elements(graph: NetGraph, in_shape=None) -> int:
    shape = tuple(in_shape if in_shape is not None else graph.in_shape)
    total = 0
    for layer in graph.layers:
        out = layer.out_shape(shape)
        total += layer_elements(layer, shape, out)
        shape = out
    return total


@dataclass
class MemoryEstimate:
    activation_bytes: int
    param_bytes: int
    moment_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.activation_bytes + self.param_bytes + self.moment_bytes

    @property
    def total_mb(self) -> float:
        return self.total_bytes / 2**20


def memory_for(passes: Iterable[NetGraph], param_graphs: Iterable[NetGraph], batch: int,
               elem_bytes: int = ELEM_BYTES) -> MemoryEstimate:
    act = sum(activation_elements(g) for g in passes)
    n_params = sum(count_params(g) for g in param_graphs)
    return MemoryEstimate(
        activation_bytes=elem_bytes * batch * 2 * act,
        param_bytes=elem_bytes * n_params,
        moment_bytes=2 * elem_bytes * n_params,
    )


def training_pass_graphs(mc: ModelConfig, mode: str) -> list[NetGraph]:
    if mode not in ("sub-volume", "full-volume"):
        raise ValueError(f"mode must be 'sub-volume' or 'full-volume', got {mode!r}")
    geom = mc.geometry()
    e = geom.extent if mode == "sub-volume" else geom.embed_shape[0]
    graphs = model_graphs(mc)
    return [
        graphs["G1"],
        g2_graph(mc, e),
        encoder_graph(mc, e),
        discriminator_graph(mc, depth=e * mc.scale),
        graphs["CRF-head"],
    ]


def estimate_activation_memory(config, mode: str = "sub-volume", batch_size: int | None = None) -> MemoryEstimate:
    mc = _model_config(config)
    batch = batch_size if batch_size is not None else getattr(config, "batch_size", 2)
    return memory_for(training_pass_graphs(mc, mode), model_graphs(mc).values(), batch)


def memory_table(config, resolutions=(128, 256), batches=(2, 4, 6)) -> list[dict]:
    rows = []
    for r in resolutions:
        cfg = _at_resolution(config, r)
        for b in batches:
            sub = estimate_activation_memory(cfg, "sub-volume", b)
            full = estimate_activation_memory(cfg, "full-volume", b)
            rows.append({
                "resolution": r,
                "batch": b,
                "sub_volume_mb": round(sub.total_mb, 1),
                "full_volume_mb": round(full.total_mb, 1),
                "activation_ratio": round(sub.activation_bytes / full.activation_bytes, 4),
            })
    return rows


@dataclass
class SpeedResult:
    iters_per_sec: float
    median_step_seconds: float
    steps: int
    environment: dict


def environment_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "crf_kernels": kernels.BACKEND,
    }


def measure_speed(config, steps: int = 10, warmup: int = 5) -> SpeedResult:
    """Median wall-clock iterations/sec of :func:`train_step` after ``warmup`` steps."""
    from .trainer import create_state, train_step
    from .volume import PhantomSpec, make_phantom

    if steps < 10:
        raise ValueError("need at least 10 timed steps")
    state = create_state(config)
    size = config.resolution
    batch = torch.from_numpy(np.stack([
        make_phantom(PhantomSpec(shape=(size,) * 3, seed=i)).voxels for i in range(config.batch_size)
    ]))[:, None]
    for _ in range(warmup):
        train_step(state, batch)
    times = []
    for _ in range(steps):
        t0 = time.perf_counter()
        train_step(state, batch)
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    return SpeedResult(1.0 / med, med, steps, environment_descriptor())


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    headers = list(rows[0])
    cells = [[_fmt(r[h]) for h in headers] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def _model_config(config) -> ModelConfig:
    return config if isinstance(config, ModelConfig) else config.model_config()


def _at_resolution(config, resolution: int):
    return replace(config, resolution=resolution)
