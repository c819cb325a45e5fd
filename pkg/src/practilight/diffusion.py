"""Self-contained latent diffusion backbone.

A miniature U-Net denoiser with the same self-attention layout as the
reference model this toolkit targets (16 self-attention layers: 5 at the base
width, 5 at 2x, 6 at 4x), a fixed analytic autoencoder, and a hash-based toy
text encoder. The "reference" configuration reproduces the projection widths
320/640/1280 used for parameter accounting; the "tiny" configuration is small
enough to train and sample on a single CPU core in tests.

Activations relevant to light analysis (self-attention queries, per-head
outputs, attention maps, cross-attention outputs, conv residuals) are exposed
through an AttnController hook object threaded through the forward pass.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as Fn


class IncompatibleBackbone(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class BackboneConfig:
    name: str
    image_size: int
    latent_channels: int = 4
    base_width: int = 320  # self-attention width at the finest level
    heads: int = 8
    context_dim: int = 768
    conv_width: int = 64  # channel count of the conv trunk per level multiplier
    mlp_width: int = 128
    timesteps: int = 1000
    vocab_size: int = 8192
    max_tokens: int = 16
    init_seed: int = 0
    out_scale: float = 0.1  # weight of the learned residual vs the analytic denoiser

    @property
    def widths(self):
        return (self.base_width, 2 * self.base_width, 4 * self.base_width)

    def fingerprint(self) -> str:
        payload = repr(self).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


REFERENCE_CONFIG = BackboneConfig(name="reference", image_size=512, base_width=320, heads=8)
TINY_CONFIG = BackboneConfig(
    name="tiny",
    image_size=64,
    base_width=16,
    heads=4,
    context_dim=32,
    conv_width=16,
    mlp_width=32,
    vocab_size=512,
    max_tokens=8,
)

CONFIGS = {c.name: c for c in (REFERENCE_CONFIG, TINY_CONFIG)}


# -- controller protocol ----------------------------------------------------


class AttnController:
    """Hook object threaded through the denoiser forward pass.

    Subclass and override what you need; sites are stable string ids.
    """

    def on_query(self, site: str, q: torch.Tensor) -> torch.Tensor:
        return q

    def on_heads(self, site: str, heads: torch.Tensor) -> torch.Tensor:
        """heads: (B, n_heads, T, head_dim) per-head attention outputs."""
        return heads

    def on_attn_probs(self, site: str, probs: torch.Tensor) -> None:
        pass

    def on_activation(self, site: str, value: torch.Tensor) -> torch.Tensor:
        """Generic site hook (self/cross attention outputs, conv residuals)."""
        return value


# -- text encoder -----------------------------------------------------------


class ToyTextEncoder(nn.Module):
    """Deterministic hash-embedding text encoder; stands in for a CLIP stack."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.init_seed + 11)
        table = torch.randn(cfg.vocab_size, cfg.context_dim, generator=gen) * 0.5
        pos = torch.randn(cfg.max_tokens, cfg.context_dim, generator=gen) * 0.1
        self.register_buffer("table", table)
        self.register_buffer("pos", pos)

    def token_ids(self, prompt: str) -> list[int]:
        words = prompt.lower().split()[: self.cfg.max_tokens - 1]
        ids = [0]  # BOS / null token
        for w in words:
            h = int(hashlib.sha1(w.encode()).hexdigest()[:8], 16)
            ids.append(1 + h % (self.cfg.vocab_size - 1))
        return ids

    def forward(self, prompt: str) -> torch.Tensor:
        ids = self.token_ids(prompt)
        emb = self.table[torch.tensor(ids)] + self.pos[: len(ids)]
        return emb.unsqueeze(0)  # (1, T, context_dim)


# -- fixed analytic autoencoder --------------------------------------------


class FixedAutoencoder:
    """Deterministic 8x down/up autoencoder over [0,1] RGB images.

    Latent channels: pooled RGB (3) + pooled luminance gradient magnitude (1),
    affinely mapped to roughly unit scale. Differentiable in torch.
    """

    factor = 8

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        """img: (B,3,H,W) in [0,1] -> (B,4,H/8,W/8)."""
        rgb = Fn.avg_pool2d(img, self.factor)
        lum = 0.2126 * img[:, 0:1] + 0.7152 * img[:, 1:2] + 0.0722 * img[:, 2:3]
        gx = lum[:, :, :, 1:] - lum[:, :, :, :-1]
        gy = lum[:, :, 1:, :] - lum[:, :, :-1, :]
        grad = Fn.pad(gx.abs(), (0, 1, 0, 0)) + Fn.pad(gy.abs(), (0, 0, 0, 1))
        hf = Fn.avg_pool2d(grad, self.factor)
        return torch.cat([(rgb - 0.5) * 2.0, hf * 8.0 - 0.5], dim=1)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        rgb = z[:, :3] / 2.0 + 0.5
        # nearest keeps encode(decode(z)) exact on the RGB channels
        up = Fn.interpolate(rgb, scale_factor=self.factor, mode="nearest")
        return up.clamp(0.0, 1.0)

    def encode_np(self, img: np.ndarray) -> torch.Tensor:
        """HxWx3 (or HxW grayscale, replicated) float [0,1] -> (1,4,h,w)."""
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)
        return self.encode(t)

    def decode_np(self, z: torch.Tensor) -> np.ndarray:
        img = self.decode(z)[0].detach().cpu().numpy().transpose(1, 2, 0)
        return img.astype(np.float64)


# -- attention and blocks ---------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim, heads, context_dim=None, inner_dim=None):
        super().__init__()
        self.is_self = context_dim is None
        inner = inner_dim or dim
        if inner % heads:
            raise IncompatibleBackbone("attention width not divisible by head count")
        self.heads = heads
        self.head_dim = inner // heads
        kv_dim = dim if self.is_self else context_dim
        self.to_q = nn.Linear(dim, inner, bias=False)
        self.to_k = nn.Linear(kv_dim, inner, bias=False)
        self.to_v = nn.Linear(kv_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, dim, bias=False)

    def forward(self, x, context=None, controller: AttnController | None = None, site=""):
        b, t, _ = x.shape
        src = x if self.is_self else context
        q = self.to_q(x)
        if controller is not None and self.is_self:
            q = controller.on_query(site, q)
        k = self.to_k(src)
        v = self.to_v(src)

        def split(z):
            return z.view(b, -1, self.heads, self.head_dim).transpose(1, 2)

        qh, kh, vh = split(q), split(k), split(v)
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        if controller is not None and self.is_self:
            controller.on_attn_probs(site, attn)
        heads = attn @ vh  # (b, heads, t, head_dim)
        if controller is not None and self.is_self:
            heads = controller.on_heads(site, heads)
        out = self.to_out(heads.transpose(1, 2).reshape(b, t, -1))
        if controller is not None:
            out = controller.on_activation(site + ".out", out)
        return out


class TransformerBlock(nn.Module):
    def __init__(self, conv_ch, attn_dim, heads, context_dim, mlp_width):
        super().__init__()
        self.proj_in = nn.Linear(conv_ch, attn_dim)
        self.norm1 = nn.LayerNorm(attn_dim)
        self.self_attn = Attention(attn_dim, heads)
        self.norm2 = nn.LayerNorm(attn_dim)
        self.cross_attn = Attention(attn_dim, heads, context_dim=context_dim, inner_dim=attn_dim)
        self.norm3 = nn.LayerNorm(attn_dim)
        self.mlp = nn.Sequential(nn.Linear(attn_dim, mlp_width), nn.SiLU(), nn.Linear(mlp_width, attn_dim))
        self.proj_out = nn.Linear(attn_dim, conv_ch)

    def forward(self, x, context, controller=None, site=""):
        b, c, h, w = x.shape
        tokens = self.proj_in(x.flatten(2).transpose(1, 2))
        tokens = tokens + self.self_attn(self.norm1(tokens), controller=controller, site=site + ".self_attn")
        tokens = tokens + self.cross_attn(
            self.norm2(tokens), context=context, controller=controller, site=site + ".cross_attn"
        )
        tokens = tokens + self.mlp(self.norm3(tokens))
        out = self.proj_out(tokens).transpose(1, 2).view(b, c, h, w)
        return x + out


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(time_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb, controller=None, site=""):
        h = Fn.silu(self.conv1(Fn.silu(x)))
        h = h + self.emb(temb)[:, :, None, None]
        h = self.conv2(Fn.silu(h))
        if controller is not None:
            h = controller.on_activation(site + ".conv_residual", h)
        return self.skip(x) + h


class UNetStage(nn.Module):
    """A res block followed by a transformer block."""

    def __init__(self, in_ch, conv_ch, attn_dim, heads, context_dim, mlp_width, time_dim):
        super().__init__()
        self.res = ResBlock(in_ch, conv_ch, time_dim)
        self.attn = TransformerBlock(conv_ch, attn_dim, heads, context_dim, mlp_width)

    def forward(self, x, temb, context, controller=None, site=""):
        x = self.res(x, temb, controller=controller, site=site)
        x = self.attn(x, context, controller=controller, site=site)
        if controller is not None:
            x = controller.on_activation(site + ".block_out", x)
        return x


def _timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.get_default_dtype()) / half)
    args = t.to(freqs.dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class Denoiser(nn.Module):
    """U-Net over latents; 16 transformer stages (5 + 5 + 6 across 3 levels)."""

    DOWN_PER_LEVEL = 2
    UP_PER_LEVEL = 3

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        cw = cfg.conv_width
        conv_chs = (cw, cw * 2, cw * 4)
        widths = cfg.widths
        time_dim = cw * 4
        self.time_mlp = nn.Sequential(nn.Linear(cw, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.time_base = cw
        self.conv_in = nn.Conv2d(cfg.latent_channels, conv_chs[0], 3, padding=1)

        def stage(in_ch, lvl):
            return UNetStage(in_ch, conv_chs[lvl], widths[lvl], cfg.heads, cfg.context_dim, cfg.mlp_width, time_dim)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = conv_chs[0]
        for lvl in range(3):
            stages = nn.ModuleList()
            for _ in range(self.DOWN_PER_LEVEL):
                stages.append(stage(ch, lvl))
                ch = conv_chs[lvl]
            self.down.append(stages)
            if lvl < 2:
                self.downsample.append(nn.Conv2d(ch, conv_chs[lvl + 1], 3, stride=2, padding=1))
                ch = conv_chs[lvl + 1]
        self.mid = stage(ch, 2)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        # the first DOWN_PER_LEVEL up stages of each level consume a skip
        for lvl in (2, 1, 0):
            stages = nn.ModuleList()
            for k in range(self.UP_PER_LEVEL):
                extra = conv_chs[lvl] if k < self.DOWN_PER_LEVEL else 0
                stages.append(stage(ch + extra, lvl))
                ch = conv_chs[lvl]
            self.up.append(stages)
            if lvl > 0:
                self.upsample.append(nn.Conv2d(ch, conv_chs[lvl - 1], 3, padding=1))
                ch = conv_chs[lvl - 1]
        self.conv_out = nn.Conv2d(conv_chs[0], cfg.latent_channels, 3, padding=1)
        betas = torch.linspace(1e-4, 0.02, cfg.timesteps)
        self.register_buffer("sqrt_ab", torch.cumprod(1.0 - betas, dim=0).sqrt())

    def forward(self, x, t, context, controller=None, control_residuals=None):
        """x: (B,C,h,w); t: (B,) int timesteps; context: (B,T,ctx).

        Output is a clean-latent prediction: an analytic Wiener-style skip
        (optimal for a unit-Gaussian prior) plus a scaled learned residual.
        """
        x0_skip = self.sqrt_ab[t].view(-1, 1, 1, 1) * x
        if controller is not None:
            x0_skip = controller.on_activation("x_skip", x0_skip)
        temb = self.time_mlp(_timestep_embedding(t, self.time_base))
        h = self.conv_in(x)
        skips = []
        si = 0
        for lvl in range(3):
            for st in self.down[lvl]:
                h = st(h, temb, context, controller=controller, site=f"down.{si}")
                si += 1
                skips.append(h)
            if lvl < 2:
                h = self.downsample[lvl](h)
        if control_residuals is not None:
            h = h + control_residuals["mid"]
        h = self.mid(h, temb, context, controller=controller, site="mid.0")
        si = 0
        for ui, lvl in enumerate((2, 1, 0)):
            for k, st in enumerate(self.up[ui]):
                if k < self.DOWN_PER_LEVEL:
                    skip = skips.pop()
                    if control_residuals is not None:
                        skip = skip + control_residuals["skips"][len(skips)]
                    h = torch.cat([h, skip], dim=1)
                h = st(h, temb, context, controller=controller, site=f"up.{si}")
                si += 1
            if lvl > 0:
                h = Fn.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[ui](h)
        return x0_skip + self.cfg.out_scale * self.conv_out(h)

    def self_attention_sites(self) -> list[str]:
        sites = [f"down.{i}" for i in range(6)] + ["mid.0"] + [f"up.{i}" for i in range(9)]
        return [s + ".self_attn" for s in sites]

    def attention_modules(self) -> dict[str, Attention]:
        """Stable site id -> Attention module, self and cross."""
        out = {}
        idx = 0
        for lvl in range(3):
            for st in self.down[lvl]:
                out[f"down.{idx}.self_attn"] = st.attn.self_attn
                out[f"down.{idx}.cross_attn"] = st.attn.cross_attn
                idx += 1
        out["mid.0.self_attn"] = self.mid.attn.self_attn
        out["mid.0.cross_attn"] = self.mid.attn.cross_attn
        idx = 0
        for ui in range(3):
            for st in self.up[ui]:
                out[f"up.{idx}.self_attn"] = st.attn.self_attn
                out[f"up.{idx}.cross_attn"] = st.attn.cross_attn
                idx += 1
        return out


# -- noise schedule ---------------------------------------------------------


class NoiseSchedule:
    def __init__(self, timesteps: int):
        self.timesteps = timesteps
        betas = torch.linspace(1e-4, 0.02, timesteps)
        alphas = 1.0 - betas
        self.alphas_cumprod = torch.cumprod(alphas, dim=0)

    def add_noise(self, x0, t, noise):
        a = self.alphas_cumprod[t].view(-1, 1, 1, 1)
        return a.sqrt() * x0 + (1 - a).sqrt() * noise

    def pred_x0(self, x_t, t, eps):
        a = self.alphas_cumprod[t].view(-1, 1, 1, 1)
        return (x_t - (1 - a).sqrt() * eps) / a.sqrt()

    def eps_from_x0(self, x_t, t, x0):
        """Implied noise for a clean-latent prediction (x0-parametrization)."""
        a = self.alphas_cumprod[t].view(-1, 1, 1, 1)
        return (x_t - a.sqrt() * x0) / (1 - a).sqrt().clamp_min(1e-8)

    def ddim_step(self, x_t, t, t_prev, eps):
        x0 = self.pred_x0(x_t, t, eps)
        if t_prev < 0:
            return x0
        a_prev = self.alphas_cumprod[t_prev]
        return a_prev.sqrt() * x0 + (1 - a_prev).sqrt() * eps

    def normalized_time(self, t: int) -> float:
        """Project convention: 0 = pure noise, 1 = final image."""
        return 1.0 - t / (self.timesteps - 1)


# -- ControlNet -------------------------------------------------------------


class EdgeControlNet(nn.Module):
    """Edge-conditioned residual network matching the denoiser's down path.

    Output projections are zero-initialized so a fresh network is a no-op;
    trained instances are loaded as external artifacts.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cw = cfg.conv_width
        chs = (cw, cw * 2, cw * 4)
        self.stem = nn.Sequential(
            nn.Conv2d(1, cw, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(cw, cw, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(cw, chs[0], 3, stride=2, padding=1),
        )
        self.blocks = nn.ModuleList()
        self.zero_projs = nn.ModuleList()
        ch = chs[0]
        n_skips = Denoiser.DOWN_PER_LEVEL * 3
        for lvl in range(3):
            for _ in range(Denoiser.DOWN_PER_LEVEL):
                self.blocks.append(nn.Conv2d(ch, chs[lvl], 3, padding=1))
                ch = chs[lvl]
                proj = nn.Conv2d(ch, ch, 1)
                nn.init.zeros_(proj.weight)
                nn.init.zeros_(proj.bias)
                self.zero_projs.append(proj)
            if lvl < 2:
                self.blocks.append(nn.Conv2d(ch, chs[lvl + 1], 3, stride=2, padding=1))
                ch = chs[lvl + 1]
        self.mid_proj = nn.Conv2d(ch, ch, 1)
        nn.init.zeros_(self.mid_proj.weight)
        nn.init.zeros_(self.mid_proj.bias)

    def forward(self, edge_image: torch.Tensor):
        """edge_image: (B,1,H,W) at pixel resolution -> residual dict."""
        h = self.stem(edge_image)
        skips = []
        zi = 0
        for blk in self.blocks:
            h = Fn.silu(blk(h))
            if blk.stride == (1, 1):
                skips.append(self.zero_projs[zi](h))
                zi += 1
        return {"skips": skips, "mid": self.mid_proj(h)}


# -- backbone bundle --------------------------------------------------------


class DiffusionBackbone:
    """Denoiser + autoencoder + text encoder + schedule, built deterministically."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.init_seed)
        self.unet = Denoiser(cfg)
        self.text = ToyTextEncoder(cfg)
        self.vae = FixedAutoencoder()
        self.schedule = NoiseSchedule(cfg.timesteps)
        self.unet.eval()

    @property
    def fingerprint(self) -> str:
        return self.cfg.fingerprint()

    @property
    def latent_hw(self):
        s = self.cfg.image_size // FixedAutoencoder.factor
        return (s, s)

    def embed(self, prompt: str) -> torch.Tensor:
        with torch.no_grad():
            return self.text(prompt)

    def predict(self, x_t, t, context, controller=None, control_residuals=None):
        """Model output: predicted clean latent (x0-parametrization)."""
        tt = torch.full((x_t.shape[0],), int(t), dtype=torch.long) if np.isscalar(t) else t
        return self.unet(x_t, tt, context, controller=controller, control_residuals=control_residuals)


def build_backbone(name_or_cfg="tiny", init_seed: int | None = None) -> DiffusionBackbone:
    cfg = CONFIGS[name_or_cfg] if isinstance(name_or_cfg, str) else name_or_cfg
    if init_seed is not None:
        cfg = BackboneConfig(**{**cfg.__dict__, "init_seed": init_seed})
    return DiffusionBackbone(cfg)
