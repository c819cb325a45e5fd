"""Diagnostic bench: DDIM inversion, activation injection between two
trajectories with similarity scoring, attention-to-ROI curves, and
best/worst-head injection ranked by adapter change norms.

All runs are stateless and deterministic; similarity metrics come from the
pluggable backends in :mod:`practilight.metrics`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import AttnController, DiffusionBackbone
from .lora import LoraAdapter, head_change_norms
from .metrics import distance
from .sampler import _cfg_x0, ddim_timesteps

ANALYSIS_METRICS = ("dreamsim_proxy", "dino", "clip")
INVERSION_CFG_SCALE = 3.5
GENERATION_CFG_SCALE = 7.5
LAYER_SELECTORS = ("self_attention", "cross_attention", "conv_residual", "all")
# first decoder attention block (see attention_to_roi)
DEFAULT_ROI_LAYER = "up.0.self_attn"


class SelectorMismatch(ValueError):
    pass


class DegenerateRanking(RuntimeError):
    pass


class OutOfBounds(ValueError):
    pass


def _stage_sites(n_down=6, n_up=9) -> list[str]:
    return [f"down.{i}" for i in range(n_down)] + ["mid.0"] + [f"up.{i}" for i in range(n_up)]


def site_resolution(backbone: DiffusionBackbone, stage_site: str) -> int:
    """Token-grid side length at a stage site ("down.3", "mid.0", ...)."""
    s = backbone.latent_hw[0]
    kind, idx = stage_site.split(".")
    idx = int(idx)
    if kind == "down":
        return s >> (idx // 2)
    if kind == "mid":
        return s >> 2
    if kind == "up":
        return s >> (2 - idx // 3)
    raise SelectorMismatch(f"unknown site {stage_site!r}")


# -- trajectories -----------------------------------------------------------


@dataclass
class InvertedTrajectory:
    prompt: str
    cfg_scale: float
    steps: int
    timesteps: list[int]  # generation order (noisiest first)
    initial_latent: torch.Tensor  # latent at the noisiest timestep
    inversion_latents: list[torch.Tensor]  # x0 upwards, len steps + 1
    image: np.ndarray | None = None


def ddim_invert(
    backbone: DiffusionBackbone,
    image: np.ndarray,
    prompt: str,
    cfg_scale: float = INVERSION_CFG_SCALE,
    steps: int = 50,
    refine_iters: int = 5,
) -> InvertedTrajectory:
    """Deterministic DDIM inversion of an image to a noise latent.

    Each inversion step solves the forward DDIM update for the previous
    latent by fixed-point iteration (the update is a contraction in the
    model's residual term on the usual step grids), so resampling with the
    same prompt/cfg (eta=0) reconstructs the image closely. On very coarse
    grids the iteration is skipped and reconstruction degrades.
    """
    z0 = backbone.vae.encode_np(image)
    ctx_c = backbone.embed(prompt)
    ctx_u = backbone.embed("")
    ts = ddim_timesteps(backbone.schedule, steps)
    ab = backbone.schedule.alphas_cumprod

    def residual(x, t):
        # learned part of the clean-latent prediction (model minus analytic skip)
        x0 = _cfg_x0(backbone, x, t, ctx_c, ctx_u, cfg_scale)
        return x0 - ab[t].sqrt() * x

    lat = [z0.clone()]
    with torch.no_grad():
        # invert the final generation step: z0 = model(x, t_last)
        t_last = ts[-1]
        c = ab[t_last].sqrt()
        if c > 0.3:
            x = z0 / c
            for _ in range(refine_iters):
                x = (z0 - residual(x, t_last)) / c
        else:
            x = c * z0  # coarse grid: renoise without solving
        lat.append(x.clone())
        # invert intermediate steps, noisier level t from cleaner level t_c
        for t, t_c in zip(ts[-2::-1], ts[:0:-1]):
            a_n, a_c = ab[t], ab[t_c]
            # cos/sin of the angle step between noise levels
            cosd = (a_n * a_c).sqrt() + ((1 - a_n) * (1 - a_c)).sqrt()
            sind = ((1 - a_n) * a_c).sqrt() - (a_n * (1 - a_c)).sqrt()
            w = sind / (1 - a_n).sqrt()
            y = x
            x = y / cosd if cosd > 0.3 else y * cosd
            if cosd > 0.3:
                for _ in range(refine_iters):
                    x = (y - w * residual(x, t)) / cosd
            lat.append(x.clone())
    return InvertedTrajectory(
        prompt=prompt,
        cfg_scale=cfg_scale,
        steps=steps,
        timesteps=ts,
        initial_latent=x.clone(),
        inversion_latents=lat,
        image=np.asarray(image, dtype=np.float64),
    )


def resample(
    backbone: DiffusionBackbone,
    traj: InvertedTrajectory,
    controller_factory=None,
) -> np.ndarray:
    """Forward DDIM from the trajectory's noise latent.

    controller_factory(step_index, normalized_t) may return a pair of
    AttnControllers for the conditional/unconditional branches.
    """
    x = traj.initial_latent.clone()
    ctx_c = backbone.embed(traj.prompt)
    ctx_u = backbone.embed("")
    ts = traj.timesteps
    sched = backbone.schedule
    with torch.no_grad():
        for i, t in enumerate(ts):
            cc = cu = None
            if controller_factory is not None:
                cc, cu = controller_factory(i, sched.normalized_time(t))
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            x0 = _cfg_x0(
                backbone, x, t, ctx_c, ctx_u, traj.cfg_scale,
                controller_c=cc, controller_u=cu,
            )
            x = sched.ddim_step(x, t, t_prev, sched.eps_from_x0(x, t, x0))
    return backbone.vae.decode_np(x)


# -- injection --------------------------------------------------------------


@dataclass
class InjectionSpec:
    layer_selector: str | None = None  # self_attention | cross_attention | conv_residual | all
    decoder_only: bool = False
    head_selector: frozenset | set | None = None  # {(site, head_index)}
    timestep_range: tuple[float, float] = (0.0, 1.0)

    def resolve_sites(self, backbone: DiffusionBackbone) -> set[str]:
        """Activation sites selected on this backbone; empty set is a no-op spec."""
        if self.layer_selector is None:
            sites = set()
        elif self.layer_selector not in LAYER_SELECTORS:
            raise SelectorMismatch(f"unknown layer selector {self.layer_selector!r}")
        else:
            stages = _stage_sites()
            suffixes = {
                "self_attention": (".self_attn.out",),
                "cross_attention": (".cross_attn.out",),
                "conv_residual": (".conv_residual",),
                "all": (".self_attn.out", ".cross_attn.out", ".conv_residual", ".block_out"),
            }[self.layer_selector]
            sites = {s + suf for s in stages for suf in suffixes}
            if self.layer_selector == "all":
                sites.add("x_skip")  # the analytic input skip; total substitution
        if self.decoder_only:
            sites = {s for s in sites if s.startswith("up.")}
        return sites

    def resolve_heads(self, backbone: DiffusionBackbone) -> dict[str, set[int]]:
        out: dict[str, set[int]] = {}
        valid_sites = {s + ".self_attn" for s in _stage_sites()}
        for site, h in self.head_selector or ():
            if site not in valid_sites:
                raise SelectorMismatch(f"no self-attention site {site!r}")
            if not (0 <= h < backbone.cfg.heads):
                raise SelectorMismatch(f"head {h} out of range for {site!r}")
            out.setdefault(site, set()).add(int(h))
        return out


@dataclass
class SimilarityReport:
    distances: dict[str, float]

    def __post_init__(self):
        for name, d in self.distances.items():
            if d < 0:
                raise ValueError(f"negative distance for {name}")


def similarity_report(result: np.ndarray, target: np.ndarray) -> SimilarityReport:
    return SimilarityReport({m: distance(m, result, target) for m in ANALYSIS_METRICS})


class ActRecorder(AttnController):
    def __init__(self, act_sites, head_sites):
        self.act_sites = set(act_sites)
        self.head_sites = set(head_sites)
        self.acts: dict[str, torch.Tensor] = {}
        self.heads: dict[str, torch.Tensor] = {}

    def on_activation(self, site, value):
        if site in self.act_sites:
            self.acts[site] = value.detach().clone()
        return value

    def on_heads(self, site, heads):
        if site in self.head_sites:
            self.heads[site] = heads.detach().clone()
        return heads


class ActInjector(AttnController):
    def __init__(self, acts: dict, head_map: dict[str, dict[int, torch.Tensor]]):
        self.acts = acts
        self.head_map = head_map

    def on_activation(self, site, value):
        cached = self.acts.get(site)
        if cached is None:
            return value
        if cached.shape != value.shape:
            raise SelectorMismatch(f"activation shape mismatch at {site}")
        return cached

    def on_heads(self, site, heads):
        m = self.head_map.get(site)
        if not m:
            return heads
        out = heads.clone()
        for h, rec in m.items():
            if rec.shape != heads.shape:
                raise SelectorMismatch(f"head shape mismatch at {site}")
            out[:, h] = rec[:, h]
        return out


def inject_and_generate(
    backbone: DiffusionBackbone,
    original: InvertedTrajectory,
    target: InvertedTrajectory,
    spec: InjectionSpec,
) -> tuple[np.ndarray, SimilarityReport]:
    """Regenerate `original` overwriting selected activations with `target`'s."""
    if original.steps != target.steps or original.timesteps != target.timesteps:
        raise SelectorMismatch("trajectories have different step grids")
    act_sites = spec.resolve_sites(backbone)
    head_sel = spec.resolve_heads(backbone)
    head_sites = set(head_sel)

    records: list[tuple[ActRecorder, ActRecorder]] = []

    def record_factory(i, tn):
        pair = (ActRecorder(act_sites, head_sites), ActRecorder(act_sites, head_sites))
        records.append(pair)
        return pair

    resample(backbone, target, record_factory)

    lo, hi = spec.timestep_range

    def inject_factory(i, tn):
        if not (lo <= tn <= hi):
            return None, None
        out = []
        for rec in records[i]:
            head_map = {s: {h: rec.heads[s] for h in hs} for s, hs in head_sel.items() if s in rec.heads}
            out.append(ActInjector(rec.acts, head_map))
        return tuple(out)

    img = resample(backbone, original, inject_factory)
    target_img = target.image
    if target_img is None:
        target_img = resample(backbone, target)
    return img, similarity_report(img, target_img)


# -- attention-to-ROI curves ------------------------------------------------


class _ProbRecorder(AttnController):
    def __init__(self, site):
        self.site = site
        self.probs = None

    def on_attn_probs(self, site, probs):
        if site == self.site:
            self.probs = probs.detach().clone()


def attention_to_roi(
    backbone: DiffusionBackbone,
    prompt: str,
    seed: int,
    pixel: tuple[int, int],
    roi: tuple[int, int, int, int],
    layer: str = DEFAULT_ROI_LAYER,
    steps: int = 50,
    cfg_scale: float = GENERATION_CFG_SCALE,
    per_head: bool = False,
) -> np.ndarray:
    """Fraction of the pixel's attention row falling inside the ROI, per step.

    `roi` is (row_lo, row_hi, col_lo, col_hi), half-open, in the token grid of
    the chosen layer. Returns shape (steps,) or (steps, heads) with per_head.
    """
    if not layer.endswith(".self_attn"):
        raise SelectorMismatch("attention curves are defined on self-attention sites")
    res = site_resolution(backbone, layer[: -len(".self_attn")])
    r, c = pixel
    if not (0 <= r < res and 0 <= c < res):
        raise OutOfBounds(f"pixel {pixel} outside {res}x{res} grid")
    r0, r1, c0, c1 = roi
    if not (0 <= r0 <= r1 <= res and 0 <= c0 <= c1 <= res):
        raise OutOfBounds(f"roi {roi} outside {res}x{res} grid")
    q_idx = r * res + c
    mask = np.zeros(res * res, dtype=bool)
    grid = mask.reshape(res, res)
    grid[r0:r1, c0:c1] = True

    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(1, backbone.cfg.latent_channels, *backbone.latent_hw, generator=gen)
    ctx_c = backbone.embed(prompt)
    ctx_u = backbone.embed("")
    ts = ddim_timesteps(backbone.schedule, steps)
    curve = []
    with torch.no_grad():
        for i, t in enumerate(ts):
            rec = _ProbRecorder(layer)
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            x0 = _cfg_x0(backbone, x, t, ctx_c, ctx_u, cfg_scale, controller_c=rec)
            x = backbone.schedule.ddim_step(x, t, t_prev, backbone.schedule.eps_from_x0(x, t, x0))
            row = rec.probs[0, :, q_idx, :].numpy()  # (heads, tokens)
            frac = row[:, mask].sum(axis=1) / row.sum(axis=1)
            curve.append(frac if per_head else float(frac.mean()))
    return np.asarray(curve)


# -- head ranking -----------------------------------------------------------


@dataclass
class HeadInjectionResult:
    best_image: np.ndarray
    best_report: SimilarityReport
    worst_image: np.ndarray
    worst_report: SimilarityReport
    best_heads: set = field(default_factory=set)
    worst_heads: set = field(default_factory=set)


def best_worst_head_injection(
    backbone: DiffusionBackbone,
    original: InvertedTrajectory,
    target: InvertedTrajectory,
    adapter: LoraAdapter,
    timestep_range: tuple[float, float] = (0.0, 1.0),
) -> HeadInjectionResult:
    """Inject only each layer's most- vs least-changed head (by adapter norms)."""
    norms = head_change_norms(adapter, backbone.cfg.heads)
    self_norms = {s: n for s, n in norms.items() if s.endswith(".self_attn")}
    if not self_norms or all(np.ptp(n) < 1e-18 for n in self_norms.values()):
        raise DegenerateRanking("adapter head norms carry no ranking signal")
    best = {(s, int(np.argmax(n))) for s, n in self_norms.items()}
    worst = {(s, int(np.argmin(n))) for s, n in self_norms.items()}
    img_b, rep_b = inject_and_generate(
        backbone, original, target,
        InjectionSpec(head_selector=best, timestep_range=timestep_range),
    )
    img_w, rep_w = inject_and_generate(
        backbone, original, target,
        InjectionSpec(head_selector=worst, timestep_range=timestep_range),
    )
    return HeadInjectionResult(img_b, rep_b, img_w, rep_w, best, worst)


# -- outputs ----------------------------------------------------------------


def write_curve_csv(path, curves: dict[str, np.ndarray]):
    """One column per named curve, one row per timestep index."""
    names = list(curves)
    n = max(len(np.atleast_1d(curves[k])) for k in names)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step"] + names)
        for i in range(n):
            row = [i]
            for k in names:
                v = np.atleast_1d(curves[k])
                row.append(float(v[i]) if i < len(v) else "")
            w.writerow(row)
    return Path(path)
