"""Alternating optimisation of (D, CRF) against (G1, G2), plus the encoder's reconstruction step."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .crf import CrfHead
from .errors import FingerprintError, GeometryError, NumericError, ParameterError
from .losses import LossBundle, crfgan_loss, reconstruct_loss
from .netspec import (
    GraphNet,
    ModelConfig,
    build_net,
    discriminator_forward,
    encoder_forward,
    g1_forward,
    g2_forward,
    model_graphs,
)
from .subvolume import (
    SubVolumeSelector,
    extract_embedding_subset,
    extract_voxel_subvolume,
    sample_offset,
    tiling_selectors,
)
from .volume import Volume3D

log = logging.getLogger(__name__)

CSV_HEADER = ["iter", "loss_d_crf", "loss_g", "loss_recon", "d_real", "d_fake", "crf_real", "crf_fake"]


@dataclass
class TrainConfig:
    resolution: int = 64
    scale: int = 4
    extent: int | None = None
    embed_channels: int = 64
    latent_dim: int = 128
    g1_base_channels: int = 256
    g2_channels: tuple = (32, 16)
    d_channels: tuple = (32, 64, 128, 256)
    crf_iterations: int = 5
    crf_max_patches: int = 512
    batch_size: int = 2
    lr_g: float = 1e-4
    lr_e: float = 1e-4
    lr_d: float = 4e-4
    betas: tuple = (0.0, 0.999)
    iterations: int = 1000
    checkpoint_every: int = 1000
    log_every: int = 50
    sample_every: int = 0
    seed: int = 0
    recon_updates_g2: bool = True
    adv_weight: float = 1.0
    recon_weight: float = 1.0
    deterministic: bool = True
    precision: str = "float32"

    def __post_init__(self):
        self.g2_channels = tuple(self.g2_channels)
        self.d_channels = tuple(self.d_channels)
        self.betas = tuple(self.betas)
        # zero rates are allowed: they freeze a player, which the tests rely on
        if min(self.lr_g, self.lr_e, self.lr_d) < 0:
            raise ParameterError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ParameterError(f"unknown precision {self.precision!r}")
        self.model_config()  # validates geometry

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            resolution=self.resolution,
            scale=self.scale,
            extent=self.extent,
            latent_dim=self.latent_dim,
            embed_channels=self.embed_channels,
            g1_base_channels=self.g1_base_channels,
            g2_channels=self.g2_channels,
            d_channels=self.d_channels,
            crf_iterations=self.crf_iterations,
            crf_max_patches=self.crf_max_patches,
        )

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        merged = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()), **overrides)


@dataclass
class TrainState:
    config: TrainConfig
    g1: GraphNet
    g2: GraphNet
    enc: GraphNet
    disc: GraphNet
    crf: CrfHead
    opt_d: torch.optim.Optimizer
    opt_g: torch.optim.Optimizer
    opt_e: torch.optim.Optimizer
    torch_rng: torch.Generator
    np_rng: np.random.Generator
    iteration: int = 0

    @property
    def geometry(self):
        return self.config.model_config().geometry()

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"G1": self.g1, "G2": self.g2, "E": self.enc, "D": self.disc, "CRF": self.crf}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"D": self.opt_d, "G": self.opt_g, "E": self.opt_e}

    def fingerprint(self) -> str:
        return graph_fingerprint(self.config)


def graph_fingerprint(config: TrainConfig) -> str:
    graphs = model_graphs(config.model_config())
    blob = "|".join(f"{k}:{g.fingerprint()}" for k, g in sorted(graphs.items()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def set_determinism(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)


def create_state(config: TrainConfig) -> TrainState:
    """Freshly initialised networks and optimizers; everything derives from ``config.seed``."""
    set_determinism(config.deterministic)
    mc = config.model_config()
    graphs = model_graphs(mc)
    init_gen = torch.Generator().manual_seed(config.seed)
    g1 = build_net(graphs["G1"], init_gen)
    g2 = build_net(graphs["G2"], init_gen)
    enc = build_net(graphs["E"], init_gen)
    disc = build_net(graphs["D"], init_gen)
    crf = CrfHead(mc.embed_channels, mc.crf_iterations, mc.crf_max_patches)
    crf.reset_parameters(init_gen)
    for m in (g1, g2, enc, disc, crf):
        m.to(config.dtype)
    betas = tuple(config.betas)
    opt_d = torch.optim.Adam(list(disc.parameters()) + list(crf.parameters()), lr=config.lr_d, betas=betas)
    opt_g = torch.optim.Adam(list(g1.parameters()) + list(g2.parameters()), lr=config.lr_g, betas=betas)
    e_params = list(enc.parameters()) + (list(g2.parameters()) if config.recon_updates_g2 else [])
    opt_e = torch.optim.Adam(e_params, lr=config.lr_e, betas=betas)
    return TrainState(
        config=config, g1=g1, g2=g2, enc=enc, disc=disc, crf=crf,
        opt_d=opt_d, opt_g=opt_g, opt_e=opt_e,
        torch_rng=torch.Generator().manual_seed(config.seed + 1),
        np_rng=np.random.default_rng(config.seed + 2),
    )


def encode_full(enc: GraphNet, x: torch.Tensor, geometry) -> torch.Tensor:
    """Whole-volume embedding from the half-encoder: encode disjoint slabs, concatenate on depth."""
    parts = [encoder_forward(enc, extract_voxel_subvolume(x, sel)) for sel in tiling_selectors(geometry)]
    return torch.cat(parts, dim=2)


def _trainable(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _sample_z(state: TrainState, n: int) -> torch.Tensor:
    return torch.randn(n, state.config.latent_dim, generator=state.torch_rng).to(state.config.dtype)


def _check(values: dict, state: TrainState) -> None:
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        raise NumericError(f"non-finite loss at iteration {state.iteration}: {values}")


def train_step(state: TrainState, batch: torch.Tensor) -> tuple[TrainState, LossBundle]:
    """One D+CRF update, one G1+G2 update, one E (+G2) reconstruction update.

    ``batch`` is (B, 1, D, H, W) real volumes. The state is updated in place
    and returned for convenience.
    """
    cfg = state.config
    geom = state.geometry
    batch = batch.to(cfg.dtype)
    if tuple(batch.shape[2:]) != geom.full_shape or batch.ndim != 5:
        raise GeometryError(f"batch shape {tuple(batch.shape)} does not match {geom.full_shape}")
    B = batch.shape[0]
    sel = sample_offset(geom, state.np_rng)
    x_r = extract_voxel_subvolume(batch, sel)

    # max player: D and CRF
    _trainable([state.disc, state.crf], True)
    with torch.no_grad():
        a_fake = g1_forward(state.g1, _sample_z(state, B))
        fake = g2_forward(state.g2, extract_embedding_subset(a_fake, sel))
        a_real = encode_full(state.enc, batch, geom)
    d_real = discriminator_forward(state.disc, x_r)
    d_fake = discriminator_forward(state.disc, fake)
    crf_real = state.crf(a_real)
    crf_fake = state.crf(a_fake)
    loss_max, _ = crfgan_loss(d_real, d_fake, crf_real, crf_fake)
    state.opt_d.zero_grad(set_to_none=True)
    (cfg.adv_weight * loss_max).backward()
    state.opt_d.step()
    state.crf.project_()

    # min player: G1, G2 on a fresh latent
    _trainable([state.disc, state.crf], False)
    a_fake = g1_forward(state.g1, _sample_z(state, B))
    fake = g2_forward(state.g2, extract_embedding_subset(a_fake, sel))
    _, loss_g = crfgan_loss(
        d_real.detach(), discriminator_forward(state.disc, fake), crf_real.detach(), state.crf(a_fake)
    )
    state.opt_g.zero_grad(set_to_none=True)
    (cfg.adv_weight * loss_g).backward()
    state.opt_g.step()
    _trainable([state.disc, state.crf], True)

    # half-encoder reconstruction of the real slab through G2
    _trainable([state.g1], False)
    x_hat = g2_forward(state.g2, encoder_forward(state.enc, x_r))
    loss_rec = reconstruct_loss(x_r, x_hat)
    state.opt_e.zero_grad(set_to_none=True)
    state.opt_g.zero_grad(set_to_none=True)
    (cfg.recon_weight * loss_rec).backward()
    state.opt_e.step()
    state.opt_e.zero_grad(set_to_none=True)
    state.opt_g.zero_grad(set_to_none=True)
    _trainable([state.g1], True)

    bundle = LossBundle(
        d_and_crf_loss=loss_max.item(),
        g_loss=loss_g.item(),
        recon_loss=loss_rec.item(),
        diagnostics={
            "d_real": d_real.mean().item(),
            "d_fake": d_fake.mean().item(),
            "crf_real": crf_real.mean().item(),
            "crf_fake": crf_fake.mean().item(),
        },
    )
    _check({"loss_d_crf": bundle.d_and_crf_loss, "loss_g": bundle.g_loss,
            "loss_recon": bundle.recon_loss, **bundle.diagnostics}, state)
    state.iteration += 1
    return state, bundle


# ---------------------------------------------------------------- checkpoints


def save_state(state: TrainState, path) -> Path:
    tensors = {}
    for mname, m in state.modules().items():
        for pname, t in m.state_dict().items():
            tensors[f"model/{mname}/{pname}"] = t
    opt_meta = {}
    for oname, opt in state.optimizers().items():
        sd = opt.state_dict()
        opt_meta[oname] = sd["param_groups"]
        for idx, st in sd["state"].items():
            for key, t in st.items():
                tensors[f"optim/{oname}/{idx}/{key}"] = t
    tensors["rng/torch"] = state.torch_rng.get_state()
    meta = {
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "optimizers": opt_meta,
        "np_rng": state.np_rng.bit_generator.state,
    }
    return ckpt.save_checkpoint(path, tensors, state.fingerprint(), meta)


def load_state(path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a state from a checkpoint; ``config`` (if given) must match its graphs."""
    tensors, manifest = ckpt.load_checkpoint(path)
    meta = manifest["state"]
    saved_cfg = TrainConfig.from_dict(meta["config"])
    cfg = config or saved_cfg
    if graph_fingerprint(cfg) != manifest["fingerprint"]:
        raise FingerprintError("checkpoint was written for a different network graph")
    state = create_state(cfg)
    for mname, m in state.modules().items():
        prefix = f"model/{mname}/"
        sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
        m.load_state_dict(sd)
    for oname, opt in state.optimizers().items():
        prefix = f"optim/{oname}/"
        per_param: dict[int, dict] = {}
        for k, v in tensors.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split("/", 1)
                per_param.setdefault(int(idx), {})[key] = torch.from_numpy(v)
        groups = meta["optimizers"][oname]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        opt.load_state_dict({"state": per_param, "param_groups": groups})
    state.torch_rng.set_state(torch.from_numpy(tensors["rng/torch"]))
    state.np_rng.bit_generator.state = meta["np_rng"]
    state.iteration = int(meta["iteration"])
    return state


# ---------------------------------------------------------------- loop


def as_batch_tensor(volumes: Sequence[Volume3D] | torch.Tensor | np.ndarray) -> torch.Tensor:
    """Volumes -> (M, 1, D, H, W) float32 tensor."""
    if isinstance(volumes, torch.Tensor):
        t = volumes
    elif isinstance(volumes, np.ndarray):
        t = torch.from_numpy(volumes)
    else:
        t = torch.from_numpy(np.stack([v.voxels for v in volumes]))
    if t.ndim == 4:
        t = t[:, None]
    return t.float()


@dataclass
class TrainResult:
    state: TrainState
    history: list[LossBundle] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train(
    config: TrainConfig,
    dataset,
    out_dir=None,
    resume=None,
    on_step: Callable[[TrainState, LossBundle], None] | None = None,
) -> TrainResult:
    """Run ``config.iterations`` steps (counted from the resumed iteration, if any).

    Writes ``metrics.csv`` (one row per step), periodic checkpoints
    ``ckpt_<iter>.bin`` and, when ``sample_every`` > 0, generated volumes under
    ``samples/``. A final checkpoint is always written.
    """
    data = as_batch_tensor(dataset)
    if len(data) == 0:
        raise ParameterError("empty dataset")
    state = load_state(resume, config) if resume else create_state(config)
    if tuple(data.shape[2:]) != state.geometry.full_shape:
        raise GeometryError(f"dataset volumes {tuple(data.shape[2:])} != config {state.geometry.full_shape}")
    result = TrainResult(state)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        new = not csv_path.exists() or not resume
        fh = open(csv_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(CSV_HEADER)
    try:
        end = state.iteration + config.iterations
        while state.iteration < end:
            idx = state.np_rng.choice(len(data), size=config.batch_size, replace=len(data) < config.batch_size)
            _, bundle = train_step(state, data[torch.from_numpy(np.sort(idx))])
            result.history.append(bundle)
            if writer is not None:
                writer.writerow(bundle.row(state.iteration))
            if on_step is not None:
                on_step(state, bundle)
            if config.log_every and state.iteration % config.log_every == 0:
                log.info("iter %d d+crf %.4f g %.4f rec %.4f", state.iteration,
                         bundle.d_and_crf_loss, bundle.g_loss, bundle.recon_loss)
            if out is not None and config.sample_every and state.iteration % config.sample_every == 0:
                _dump_sample(state, out)
            if out is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0 \
                    and state.iteration != end:
                result.checkpoints.append(save_state(state, out / f"ckpt_{state.iteration:07d}"))
        if out is not None:
            fh.flush()
            result.checkpoints.append(save_state(state, out / f"ckpt_{state.iteration:07d}"))
    finally:
        if fh is not None:
            fh.close()
    return result


def _dump_sample(state: TrainState, out: Path) -> None:
    from .inference import generate_full
    from .volume import save_volume

    z = torch.randn(state.config.latent_dim, generator=torch.Generator().manual_seed(state.config.seed))
    (out / "samples").mkdir(exist_ok=True)
    save_volume(generate_full(state, z), out / "samples" / f"iter_{state.iteration:07d}.raw")
