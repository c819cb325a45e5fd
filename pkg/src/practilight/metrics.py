"""Pluggable image-distance backends shared by the analysis bench and the
eval harness.

The perceptual backends here are deterministic stand-ins with the right
qualitative behaviour (zero self-distance, non-negative, sensitive to
luminance structure); the registries accept externally provided callables for
real feature extractors. Everything records a pinned version string so
reports stay byte-reproducible.
"""

from __future__ import annotations

import numpy as np

from .imgio import resize, to_gray

FEATURE_RES = 64  # all backends resample to this before featurizing


class BackendUnavailable(RuntimeError):
    pass


def _as_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    if img.shape[:2] != (FEATURE_RES, FEATURE_RES):
        img = resize(img, (FEATURE_RES, FEATURE_RES))
    return np.clip(img, 0.0, 1.0)


def _block_mean(gray: np.ndarray, size: int) -> np.ndarray:
    f = gray.shape[0] // size
    return gray.reshape(size, f, size, f).mean(axis=(1, 3))


def _pyramid(gray: np.ndarray) -> list[np.ndarray]:
    return [_block_mean(gray, s) for s in (64, 32, 16, 8)]


def lpips_proxy(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale luminance pyramid distance (LPIPS stand-in)."""
    ga, gb = to_gray(_as_rgb(a)), to_gray(_as_rgb(b))
    levels = zip(_pyramid(ga), _pyramid(gb))
    return float(np.mean([np.sqrt(np.mean((la - lb) ** 2)) for la, lb in levels]))


def dreamsim_proxy(a: np.ndarray, b: np.ndarray) -> float:
    """Pyramid distance over luminance plus coarse chroma."""
    ra, rb = _as_rgb(a), _as_rgb(b)
    d = lpips_proxy(ra, rb)
    ca = np.stack([_block_mean(ra[..., c], 8) for c in range(3)])
    cb = np.stack([_block_mean(rb[..., c], 8) for c in range(3)])
    return float(d + np.sqrt(np.mean((ca - cb) ** 2)))


_DINO_DIM = 64
_DINO_PATCH = 8


def _dino_features(img: np.ndarray) -> np.ndarray:
    """Patch statistics pushed through a fixed random projection."""
    g = to_gray(_as_rgb(img))
    n = FEATURE_RES // _DINO_PATCH
    patches = g.reshape(n, _DINO_PATCH, n, _DINO_PATCH).transpose(0, 2, 1, 3).reshape(n * n, -1)
    gy, gx = np.gradient(g)
    def stat(m):
        return m.reshape(n, _DINO_PATCH, n, _DINO_PATCH).mean(axis=(1, 3)).ravel()
    tokens = np.concatenate(
        [patches.mean(axis=1), patches.std(axis=1), stat(np.abs(gx)), stat(np.abs(gy))]
    )
    rng = np.random.default_rng(0xD140)
    proj = rng.standard_normal((_DINO_DIM, tokens.size)) / np.sqrt(tokens.size)
    return proj @ tokens


def dino_proxy(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(_dino_features(a) - _dino_features(b)))


def clip_proxy(a: np.ndarray, b: np.ndarray) -> float:
    """Global color-statistics distance (CLIP-embedding stand-in)."""
    def feats(img):
        rgb = _as_rgb(img)
        hists = [np.histogram(rgb[..., c], bins=8, range=(0, 1), density=True)[0] for c in range(3)]
        moments = np.concatenate([rgb.mean(axis=(0, 1)), rgb.std(axis=(0, 1))])
        return np.concatenate(hists + [moments * 8.0])

    return float(np.linalg.norm(feats(a) - feats(b)) / 8.0)


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """RMSE over [0,1]-normalized pixels at the finer image's resolution."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = np.stack([a] * 3, axis=-1)
    if b.ndim == 2:
        b = np.stack([b] * 3, axis=-1)
    if a.shape[:2] != b.shape[:2]:
        b = resize(b, a.shape[:2])
    return float(np.sqrt(np.mean((np.clip(a, 0, 1) - np.clip(b, 0, 1)) ** 2)))


DISTANCE_BACKENDS = {
    "l2": l2_distance,
    "lpips": lpips_proxy,
    "dreamsim_proxy": dreamsim_proxy,
    "dino": dino_proxy,
    "clip": clip_proxy,
}

BACKEND_VERSIONS = {
    "l2": "rmse-1",
    "lpips": "pyr-1",
    "dreamsim_proxy": "pyrchroma-1",
    "dino": "patchproj-1",
    "clip": "colorstats-1",
}


def distance(name: str, a: np.ndarray, b: np.ndarray) -> float:
    fn = DISTANCE_BACKENDS.get(name)
    if fn is None:
        raise BackendUnavailable(f"no distance backend named {name!r}")
    return fn(a, b)
