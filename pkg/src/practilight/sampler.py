"""Relighting engine: DDIM sampling with classifier-free guidance, an
irradiance-regressor guidance energy, self-attention query injection,
windowed edge-ControlNet conditioning, and final color correction.

Normalized time convention across the project: 0 is pure noise, 1 is the
final image. All gating windows are closed intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .diffusion import AttnController, DiffusionBackbone, EdgeControlNet
from .lora import LoraAdapter, predict_direct_irradiance
from .render.core import IrradianceMap

DEFAULT_NEGATIVE_PROMPT = (
    "artifacts, slow, ugly, blurry, deformed, multiple limbs, pixelated, "
    "static, fog, flat, unclear, distorted, error, still, low resolution, "
    "oversaturated, grain, blur, morhping, warping"
)


class CacheMismatch(RuntimeError):
    pass


@dataclass
class GuidanceConfig:
    cfg_scale: float = 7.5  # w
    gamma_peak: float = 2.2
    gamma_window: tuple[float, float] = (0.05, 0.5)
    injection_window: tuple[float, float] = (0.0, 0.7)
    controlnet_window: tuple[float, float] = (0.0, 0.6)
    controlnet_scale: float = 0.6
    steps: int = 50
    eta: float = 0.0
    grad_norm_mode: str = "squared_l2"  # squared_l2 | l2
    grad_epsilon: float = 1e-8
    energy_clip: float = 1.0  # max L2 norm of the normalized energy; 0 disables
    negative_prompt: str = DEFAULT_NEGATIVE_PROMPT

    def __post_init__(self):
        for lo, hi in (self.gamma_window, self.injection_window, self.controlnet_window):
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError("windows must be sub-intervals of [0,1] with lo <= hi")
        if self.cfg_scale < 0 or self.steps < 1:
            raise ValueError("cfg_scale must be >= 0 and steps >= 1")
        # "none" is an extension used by the no-scheduling ablation
        if self.grad_norm_mode not in ("squared_l2", "l2", "none"):
            raise ValueError("grad_norm_mode must be squared_l2, l2 or none")
        if self.eta != 0.0:
            raise ValueError("only deterministic sampling (eta=0) is supported")

    def to_sidecar(self) -> dict:
        return asdict(self)


def gamma_schedule(t: float, cfg: GuidanceConfig) -> float:
    """Piecewise-constant guidance scale over normalized time, inclusive bounds."""
    lo, hi = cfg.gamma_window
    return cfg.gamma_peak if lo <= t <= hi else 0.0


def _in_window(t: float, window) -> bool:
    return window[0] <= t <= window[1]


@dataclass
class TrajectoryCache:
    prompt: str
    seed: int
    steps: int
    timesteps: list[int]
    initial_latent: torch.Tensor
    latents: list[torch.Tensor]  # latent after each step
    queries: list[dict[str, torch.Tensor]]  # per step: site -> query (conditional branch)
    uncond_queries: list[dict[str, torch.Tensor]] = field(default_factory=list)
    source_image: np.ndarray | None = None

    def query_record_count(self) -> int:
        return sum(len(q) for q in self.queries)


class QueryRecorder(AttnController):
    def __init__(self):
        self.queries: dict[str, torch.Tensor] = {}

    def on_query(self, site, q):
        self.queries[site] = q.detach().clone()
        return q


class QueryInjector(AttnController):
    def __init__(self, queries: dict[str, torch.Tensor]):
        self.queries = queries

    def on_query(self, site, q):
        cached = self.queries.get(site)
        if cached is None:
            return q
        return cached.to(q.dtype).expand_as(q) if cached.shape != q.shape else cached

    def replaced_sites(self):
        return set(self.queries)


def ddim_timesteps(schedule, steps: int) -> list[int]:
    return [int(round(v)) for v in np.linspace(schedule.timesteps - 1, 0, steps)]


def guidance_energy(
    backbone: DiffusionBackbone,
    x_t: torch.Tensor,
    t: int,
    cond_latent: torch.Tensor,
    adapter: LoraAdapter,
    cfg: GuidanceConfig | None = None,
    text_embedding: torch.Tensor | None = None,
) -> torch.Tensor:
    """Normalized gradient of L = ||pred_irradiance - cond||^2 w.r.t. x_t.

    L is mean-reduced so its scale is resolution independent; the normalized
    energy is clamped to cfg.energy_clip for stability.
    """
    cfg = cfg or GuidanceConfig()
    x = x_t.detach().requires_grad_(True)
    pred = predict_direct_irradiance(backbone, x, t, adapter, text_embedding)
    loss = torch.mean((pred - cond_latent) ** 2)
    (grad,) = torch.autograd.grad(loss, x)
    adapter.set_enabled(False)
    norm = float(torch.linalg.vector_norm(grad))
    if norm < cfg.grad_epsilon:
        return torch.zeros_like(grad)
    if cfg.grad_norm_mode == "none":
        return grad
    denom = norm * norm if cfg.grad_norm_mode == "squared_l2" else norm
    energy = grad / max(denom, cfg.grad_epsilon)
    e_norm = float(torch.linalg.vector_norm(energy))
    if cfg.energy_clip > 0 and e_norm > cfg.energy_clip:
        energy = energy * (cfg.energy_clip / e_norm)
    return energy


def _cfg_x0(
    backbone, x, t, ctx_cond, ctx_uncond, w,
    controller_c=None, controller_u=None, control_residuals=None,
):
    """Classifier-free-guided clean-latent prediction, (1+w)*cond - w*uncond."""
    p_c = backbone.predict(x, t, ctx_cond, controller=controller_c, control_residuals=control_residuals)
    if w == 0.0:
        return p_c
    p_u = backbone.predict(x, t, ctx_uncond, controller=controller_u, control_residuals=control_residuals)
    return (1.0 + w) * p_c - w * p_u


def sample_source(
    backbone: DiffusionBackbone,
    prompt: str,
    seed: int,
    cfg: GuidanceConfig | None = None,
) -> tuple[np.ndarray, TrajectoryCache]:
    """Plain CFG DDIM sample; records self-attention queries and per-step latents."""
    cfg = cfg or GuidanceConfig()
    h, w_lat = backbone.latent_hw
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(1, backbone.cfg.latent_channels, h, w_lat, generator=gen)
    ctx_c = backbone.embed(prompt)
    ctx_u = backbone.embed(cfg.negative_prompt)
    ts = ddim_timesteps(backbone.schedule, cfg.steps)
    cache = TrajectoryCache(
        prompt=prompt,
        seed=int(seed),
        steps=cfg.steps,
        timesteps=ts,
        initial_latent=x.clone(),
        latents=[],
        queries=[],
    )
    with torch.no_grad():
        for i, t in enumerate(ts):
            rec_c, rec_u = QueryRecorder(), QueryRecorder()
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            x0 = _cfg_x0(
                backbone, x, t, ctx_c, ctx_u, cfg.cfg_scale,
                controller_c=rec_c, controller_u=rec_u,
            )
            x = backbone.schedule.ddim_step(x, t, t_prev, backbone.schedule.eps_from_x0(x, t, x0))
            cache.queries.append(rec_c.queries)
            cache.uncond_queries.append(rec_u.queries)
            cache.latents.append(x.clone())
    img = backbone.vae.decode_np(x)
    cache.source_image = img
    return img, cache


def color_correct(result: np.ndarray, source: np.ndarray, sigma_eps: float = 1e-6) -> np.ndarray:
    """Match each channel's mean/std to the source; clamped to [0,1] afterwards."""
    out = np.empty_like(result, dtype=np.float64)
    res = np.atleast_3d(result)
    src = np.atleast_3d(source)
    o = np.atleast_3d(out)
    for c in range(res.shape[2]):
        mu_r, sd_r = res[..., c].mean(), res[..., c].std()
        mu_s, sd_s = src[..., c].mean(), src[..., c].std()
        if sd_r < sigma_eps:
            o[..., c] = mu_s
        else:
            o[..., c] = (res[..., c] - mu_r) / sd_r * sd_s + mu_s
    return np.clip(out, 0.0, 1.0)


def relight(
    backbone: DiffusionBackbone,
    source: TrajectoryCache,
    condition: IrradianceMap | np.ndarray,
    adapter: LoraAdapter,
    cfg: GuidanceConfig | None = None,
    edge_condition: np.ndarray | None = None,
    controlnet: EdgeControlNet | None = None,
) -> np.ndarray:
    """Resample the source trajectory under the new light condition."""
    cfg = cfg or GuidanceConfig()
    if source.steps != cfg.steps:
        raise CacheMismatch(f"cache has {source.steps} steps, config wants {cfg.steps}")
    cond_px = condition.pixels if isinstance(condition, IrradianceMap) else np.asarray(condition)
    cond_latent = backbone.vae.encode_np(cond_px).detach()
    ctx_c = backbone.embed(source.prompt)
    ctx_u = backbone.embed(cfg.negative_prompt)
    residuals = None
    if controlnet is not None and edge_condition is not None:
        edge = torch.from_numpy(np.ascontiguousarray(edge_condition)).float()[None, None]
        with torch.no_grad():
            raw = controlnet(edge)
        residuals = {
            "skips": [cfg.controlnet_scale * s for s in raw["skips"]],
            "mid": cfg.controlnet_scale * raw["mid"],
        }
    x = source.initial_latent.clone()
    ts = source.timesteps
    sched = backbone.schedule
    adapter.set_enabled(False)
    for i, t in enumerate(ts):
        tn = sched.normalized_time(t)
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        inj_c = inj_u = None
        if _in_window(tn, cfg.injection_window):
            inj_c = QueryInjector(source.queries[i])
            uq = source.uncond_queries[i] if i < len(source.uncond_queries) else source.queries[i]
            inj_u = QueryInjector(uq or source.queries[i])
        ctrl_res = residuals if (residuals is not None and _in_window(tn, cfg.controlnet_window)) else None
        with torch.no_grad():
            x0 = _cfg_x0(
                backbone, x, t, ctx_c, ctx_u, cfg.cfg_scale,
                controller_c=inj_c, controller_u=inj_u, control_residuals=ctrl_res,
            )
            eps = sched.eps_from_x0(x, t, x0)
        g = gamma_schedule(tn, cfg)
        if g != 0.0:
            energy = guidance_energy(backbone, x, t, cond_latent, adapter, cfg, text_embedding=ctx_c)
            eps = eps + g * energy
        with torch.no_grad():
            x = sched.ddim_step(x, t, t_prev, eps)
    result = backbone.vae.decode_np(x)
    src_img = source.source_image
    if src_img is None:
        src_img = backbone.vae.decode_np(source.latents[-1])
    return color_correct(result, src_img)
