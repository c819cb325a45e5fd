"""Low-rank adapters over the denoiser's attention projections, and the
direct-irradiance regressor trained with them.

The adapter factors each projection update as dW = B @ A * (alpha / rank)
with A Gaussian-initialized and B zero, so a freshly attached adapter leaves
the backbone output bit-identical. The adapted denoiser output is consumed
directly as the predicted clean direct-irradiance latent.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .diffusion import Attention, DiffusionBackbone, IncompatibleBackbone
from .imgio import load_png, to_gray
from .render.core import linear_to_display
from .synth import DatasetManifest

PROJECTIONS = ("q", "k", "v", "out")


class DataError(RuntimeError):
    pass


class DivisibilityError(ValueError):
    pass


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, gen: torch.Generator):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        n, m = base.in_features, base.out_features
        self.lora_A = nn.Parameter(torch.randn(rank, n, generator=gen) / math.sqrt(n))
        self.lora_B = nn.Parameter(torch.zeros(m, rank))
        self.scaling = alpha / rank
        self.enabled = True

    def forward(self, x):
        y = self.base(x)
        if self.enabled:
            y = y + (x @ self.lora_A.t()) @ self.lora_B.t() * self.scaling
        return y

    def delta(self) -> torch.Tensor:
        return (self.lora_B @ self.lora_A) * self.scaling


class LoraAdapter:
    """All per-(layer, projection) factor pairs plus metadata."""

    def __init__(self, rank: int, alpha: float, backbone_fingerprint: str):
        self.rank = rank
        self.alpha = alpha
        self.backbone_fingerprint = backbone_fingerprint
        self.layers: dict[str, dict[str, LoRALinear]] = {}

    def parameters(self):
        for projs in self.layers.values():
            for mod in projs.values():
                yield mod.lora_A
                yield mod.lora_B

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def set_enabled(self, flag: bool):
        for projs in self.layers.values():
            for mod in projs.values():
                mod.enabled = flag

    class _Enabled:
        def __init__(self, adapter, flag):
            self.adapter, self.flag = adapter, flag

        def __enter__(self):
            self.adapter.set_enabled(self.flag)

        def __exit__(self, *a):
            self.adapter.set_enabled(not self.flag)

    def enabled(self, flag=True):
        return LoraAdapter._Enabled(self, flag)

    # -- persistence --------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None):
        meta = {
            "rank": self.rank,
            "alpha": self.alpha,
            "backbone_fingerprint": self.backbone_fingerprint,
            "layers": sorted(self.layers),
        }
        meta.update(extra_meta or {})
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
            for site, projs in self.layers.items():
                for proj, mod in projs.items():
                    for name, t in (("A", mod.lora_A), ("B", mod.lora_B)):
                        buf = io.BytesIO()
                        np.save(buf, t.detach().cpu().numpy())
                        zf.writestr(f"{site}/{proj}/{name}.npy", buf.getvalue())

    @staticmethod
    def load_into(path, backbone: DiffusionBackbone, strict_fingerprint=True) -> "LoraAdapter":
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            adapter = attach_lora(
                backbone,
                rank=meta["rank"],
                alpha=meta["alpha"],
                init_seed=0,
                include_cross=any(".cross_attn" in s for s in meta["layers"]),
            )
            if strict_fingerprint and meta["backbone_fingerprint"] != backbone.fingerprint:
                raise IncompatibleBackbone("checkpoint was trained on a different backbone")
            for site, projs in adapter.layers.items():
                for proj, mod in projs.items():
                    with torch.no_grad():
                        mod.lora_A.copy_(torch.from_numpy(np.load(io.BytesIO(zf.read(f"{site}/{proj}/A.npy")))))
                        mod.lora_B.copy_(torch.from_numpy(np.load(io.BytesIO(zf.read(f"{site}/{proj}/B.npy")))))
        return adapter


def attach_lora(
    backbone: DiffusionBackbone,
    rank: int = 8,
    alpha: float = 8.0,
    init_seed: int = 0,
    include_cross: bool = False,
) -> LoraAdapter:
    """Wrap q/k/v/out of every self-attention layer (optionally cross) with LoRA."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    mods = backbone.unet.attention_modules()
    if not mods:
        raise IncompatibleBackbone("backbone exposes no attention layers")
    for p in backbone.unet.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(init_seed)
    adapter = LoraAdapter(rank, alpha, backbone.fingerprint)
    for site, attn in mods.items():
        is_cross = site.endswith(".cross_attn")
        if is_cross and not include_cross:
            continue
        projs = {}
        for proj, attr in (("q", "to_q"), ("k", "to_k"), ("v", "to_v"), ("out", "to_out")):
            base = getattr(attn, attr)
            if isinstance(base, LoRALinear):
                base = base.base  # re-attach replaces any previous adapter
            wrapped = LoRALinear(base, rank, alpha, gen)
            setattr(attn, attr, wrapped)
            projs[proj] = wrapped
        adapter.layers[site] = projs
    return adapter


def detach_lora(backbone: DiffusionBackbone, adapter: LoraAdapter):
    mods = backbone.unet.attention_modules()
    for site in adapter.layers:
        attn = mods[site]
        for attr in ("to_q", "to_k", "to_v", "to_out"):
            mod = getattr(attn, attr)
            if isinstance(mod, LoRALinear):
                setattr(attn, attr, mod.base)


def head_change_norms(adapter: LoraAdapter, heads_per_layer: int) -> dict[str, np.ndarray]:
    """Per (layer, head) squared Frobenius norm of the materialized update,
    restricted to the head's output rows, summed over the four projections.

    Computed from the factors without materializing the full update:
    ||B_h A s||_F^2 = s^2 * tr((B_h^T B_h)(A A^T)).
    """
    out = {}
    for site, projs in adapter.layers.items():
        norms = None
        for mod in projs.values():
            m = mod.lora_B.shape[0]
            if m % heads_per_layer:
                raise DivisibilityError(f"{site}: width {m} not divisible by {heads_per_layer}")
            dh = m // heads_per_layer
            with torch.no_grad():
                gram_a = mod.lora_A @ mod.lora_A.t()  # (r, r)
                contrib = []
                for h in range(heads_per_layer):
                    bh = mod.lora_B[h * dh : (h + 1) * dh]
                    contrib.append(float(torch.trace((bh.t() @ bh) @ gram_a)) * mod.scaling**2)
            contrib = np.asarray(contrib)
            norms = contrib if norms is None else norms + contrib
        out[site] = norms
    return out


# -- regressor inference ----------------------------------------------------


def predict_direct_irradiance(
    backbone: DiffusionBackbone,
    x_t: torch.Tensor,
    t: int,
    adapter: LoraAdapter,
    text_embedding: torch.Tensor | None = None,
) -> torch.Tensor:
    """Predicted clean direct-irradiance latent at timestep t (differentiable in x_t)."""
    context = text_embedding if text_embedding is not None else backbone.embed("")
    adapter.set_enabled(True)
    return backbone.predict(x_t, t, context)


# -- training ---------------------------------------------------------------


@dataclass
class TrainingConfig:
    manifest_path: str
    rank: int = 8
    alpha: float = 8.0
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    noisy_labels: bool = False  # predict the noised target instead of the clean one
    include_cross: bool = False
    checkpoint_interval: int = 0
    checkpoint_dir: str | None = None
    max_pairs: int | None = None
    t_max: int | None = None  # restrict sampled noise levels to [0, t_max)
    grad_clip: float = 0.0  # 0 disables
    cosine_lr: bool = False

    def __post_init__(self):
        if self.rank < 1 or self.steps < 0:
            raise ValueError("rank must be >= 1 and steps >= 0")
        if self.t_max is not None and self.t_max < 1:
            raise ValueError("t_max must be >= 1")


@dataclass
class TrainingLog:
    losses: list[float] = field(default_factory=list)
    skipped: int = 0

    def smoothed(self, window=50) -> list[float]:
        out = []
        for i in range(len(self.losses)):
            lo = max(0, i - window + 1)
            out.append(float(np.mean(self.losses[lo : i + 1])))
        return out


def load_pair_latents(backbone: DiffusionBackbone, manifest: DatasetManifest, root, max_pairs=None):
    """Encode (beauty, display-state irradiance) pairs to latents; skips bad entries."""
    root = Path(root)
    zs, zg, skipped = [], [], 0
    entries = manifest.entries[:max_pairs] if max_pairs else manifest.entries
    for e in entries:
        try:
            beauty = load_png(root / e["beauty_path"])
            direct = np.load(str(root / e["direct_irradiance_path"])).astype(np.float64)
            if not (np.isfinite(beauty).all() and np.isfinite(direct).all()):
                raise DataError("non-finite pixels")
            gray = to_gray(linear_to_display(direct))
            zs.append(backbone.vae.encode_np(beauty))
            zg.append(backbone.vae.encode_np(gray))
        except (OSError, DataError):
            skipped += 1
    if not zs:
        raise DataError("no readable dataset entries")
    if skipped > 0.01 * len(entries):
        raise DataError(f"{skipped}/{len(entries)} entries unreadable")
    return torch.cat(zs), torch.cat(zg), skipped


def train_regressor(backbone: DiffusionBackbone, cfg: TrainingConfig):
    """Returns (LoraAdapter, TrainingLog). Deterministic for a fixed seed."""
    manifest = DatasetManifest.load(cfg.manifest_path)
    root = Path(cfg.manifest_path).parent
    z_src, z_tgt, skipped = load_pair_latents(backbone, manifest, root, cfg.max_pairs)
    adapter = attach_lora(backbone, cfg.rank, cfg.alpha, init_seed=cfg.seed, include_cross=cfg.include_cross)
    log = TrainingLog(skipped=skipped)
    if cfg.steps == 0:
        return adapter, log
    opt = torch.optim.Adam(adapter.parameters(), lr=cfg.lr)
    lr_sched = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
        if cfg.cosine_lr
        else None
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    context = backbone.embed("")
    n = z_src.shape[0]
    sched = backbone.schedule
    t_hi = min(cfg.t_max or sched.timesteps, sched.timesteps)
    for step in range(cfg.steps):
        if cfg.batch_size >= n:  # full batch: deterministic pair coverage
            idx = torch.arange(n)
        else:
            idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        t = torch.randint(0, t_hi, (idx.shape[0],), generator=gen)
        noise = torch.randn(z_src[idx].shape, generator=gen)
        x_t = sched.add_noise(z_src[idx], t, noise)
        target = z_tgt[idx]
        if cfg.noisy_labels:
            target = sched.add_noise(target, t, noise)
        pred = backbone.predict(x_t, t, context.expand(idx.shape[0], -1, -1))
        loss = torch.mean((pred - target) ** 2)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(adapter.parameters(), cfg.grad_clip)
        opt.step()
        if lr_sched is not None:
            lr_sched.step()
        log.losses.append(float(loss.detach()))
        if cfg.checkpoint_interval and cfg.checkpoint_dir and (step + 1) % cfg.checkpoint_interval == 0:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            adapter.save(Path(cfg.checkpoint_dir) / f"adapter_{step + 1:06d}.ckpt")
    return adapter, log
