"""Night-style photometric augmentation for day images.

Six augmentations run in a fixed order: brightness, contrast, gamma,
Gaussian noise, Gaussian blur, glare insertion. Each one is independently
gated by a uniform draw r: below the apply threshold the image passes
through untouched; at or above it the same draw is rescaled into a strength
(0.8*r + 0.2) that interpolates the augmentation's intensity range, with
the strong end of every range being the more night-like extreme. After an
augmentation is applied, a revert loop restores random rectangles to the
pre-augmentation pixels: while a fresh uniform draw is >= prob (starting at
0.4 and rising 0.1 per pass), one rectangle is pasted back. The reverts
leave patches of the original daylight statistics inside the augmented
image, so one image carries both distributions.

All randomness flows through a single numpy Generator, which makes a run
reproducible from its seed; pass a trace list to record every draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .structures import ImageTensor

AUGMENTATIONS = ("brightness", "contrast", "gamma", "noise", "blur", "glare")


@dataclass
class NightAugConfig:
    """Gates, strength transform, revert schedule, and intensity ranges.

    Intensity ranges are (value at minimum strength, value at maximum
    strength); for brightness and contrast the strong end is the smaller
    number because stronger augmentation means a darker, flatter image.
    """

    apply_threshold: float = 0.5
    strength_scale: float = 0.8
    strength_offset: float = 0.2
    revert_start_prob: float = 0.4
    revert_increment: float = 0.1
    brightness_range: tuple[float, float] = (0.9, 0.2)
    contrast_range: tuple[float, float] = (1.0, 0.3)
    gamma_range: tuple[float, float] = (1.0, 3.0)
    noise_sigma_range: tuple[float, float] = (0.01, 0.08)
    blur_sigma_range: tuple[float, float] = (0.5, 2.5)
    glare_peak_range: tuple[float, float] = (0.3, 1.0)
    glare_radius_range: tuple[float, float] = (4.0, 24.0)
    glare_falloff: float = 2.0
    glare_count_range: tuple[int, int] = (1, 3)
    rng_seed: int | None = None

    def validate(self) -> None:
        for name in ("apply_threshold", "revert_start_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"nightaug.{name} must be in [0, 1], got {v}")
        if self.revert_increment <= 0:
            raise ConfigError(
                "nightaug.revert_increment must be > 0 or the revert loop "
                f"cannot terminate, got {self.revert_increment}"
            )
        if self.strength_scale <= 0:
            raise ConfigError("nightaug.strength_scale must be > 0")
        if self.glare_count_range[0] < 0 or (
            self.glare_count_range[1] < self.glare_count_range[0]
        ):
            raise ConfigError(
                f"bad glare_count_range {self.glare_count_range}"
            )


@dataclass
class GlareSpec:
    """One additive glare spot: I(d) = peak * exp(-(d / radius) ** falloff)."""

    center: tuple[float, float]  # (x, y) pixels
    radius: float
    peak: float
    falloff: float = 2.0

    def render(self, height: int, width: int) -> np.ndarray:
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float32)
        d = np.sqrt((xs - self.center[0]) ** 2 + (ys - self.center[1]) ** 2)
        return (
            np.float32(self.peak)
            * np.exp(-np.power(d / np.float32(self.radius), np.float32(self.falloff)))
        ).astype(np.float32)


def _range_value(strength: float, lo_hi: tuple[float, float], cfg: NightAugConfig) -> float:
    # strength lives on [offset, offset + scale]; map it linearly onto the range
    t = (strength - cfg.strength_offset) / cfg.strength_scale
    t = min(max(t, 0.0), 1.0)
    lo, hi = lo_hi
    return lo + t * (hi - lo)


def _transform(
    px: np.ndarray, aug: str, strength: float, cfg: NightAugConfig, rng, record: dict
) -> np.ndarray:
    h, w = px.shape[:2]
    if aug == "brightness":
        f = _range_value(strength, cfg.brightness_range, cfg)
        record["factor"] = f
        return px * np.float32(f)
    if aug == "contrast":
        f = _range_value(strength, cfg.contrast_range, cfg)
        record["factor"] = f
        m = px.mean(dtype=np.float32)
        return (px - m) * np.float32(f) + m
    if aug == "gamma":
        g = _range_value(strength, cfg.gamma_range, cfg)
        record["gamma"] = g
        return np.power(px, np.float32(g))
    if aug == "noise":
        sigma = _range_value(strength, cfg.noise_sigma_range, cfg)
        record["sigma"] = sigma
        record["field"] = "per-pixel gaussian from the stream (values not traced)"
        noise = rng.normal(0.0, sigma, size=px.shape).astype(np.float32)
        return px + noise
    if aug == "blur":
        sigma = _range_value(strength, cfg.blur_sigma_range, cfg)
        record["sigma"] = sigma
        return gaussian_filter(px, sigma=(sigma, sigma, 0.0), mode="nearest")
    if aug == "glare":
        peak = _range_value(strength, cfg.glare_peak_range, cfg)
        count = int(rng.integers(cfg.glare_count_range[0], cfg.glare_count_range[1] + 1))
        record["peak"] = peak
        record["count"] = count
        record["spots"] = []
        out = px.copy()
        for _ in range(count):
            cx = float(rng.uniform(0, w))
            cy = float(rng.uniform(0, h))
            radius = float(rng.uniform(*cfg.glare_radius_range))
            spot = GlareSpec((cx, cy), radius, peak, cfg.glare_falloff)
            record["spots"].append(
                {"cx": cx, "cy": cy, "radius": radius, "peak": peak}
            )
            out = out + spot.render(h, w)[:, :, None]
        return out
    raise ConfigError(f"unknown augmentation id: {aug!r}")


def apply_single(
    img: ImageTensor,
    aug: str,
    rng: np.random.Generator,
    cfg: NightAugConfig | None = None,
    trace: list | None = None,
) -> ImageTensor:
    """Apply one gated augmentation with the rectangle-revert loop.

    Draw order is fixed so a seed fully determines the output: gate, then
    any augmentation-specific parameter draws, then revert draws (each pass
    draws one uniform, then two row indices and two column indices for the
    rectangle). Gate draws below the threshold return the input unchanged,
    bit for bit.
    """
    cfg = cfg or NightAugConfig()
    if aug not in AUGMENTATIONS:
        raise ConfigError(f"unknown augmentation id: {aug!r}")
    record = {"augmentation": aug}
    if trace is not None:
        trace.append(record)

    gate = float(rng.random())
    record["gate"] = gate
    if gate < cfg.apply_threshold:
        record["applied"] = False
        return img

    strength = cfg.strength_scale * gate + cfg.strength_offset
    record["applied"] = True
    record["strength"] = strength

    clean = img.pixels
    out = np.asarray(
        _transform(clean, aug, strength, cfg, rng, record), dtype=np.float32
    )

    h, w = clean.shape[:2]
    reverts = []
    record["reverts"] = reverts
    prob = cfg.revert_start_prob
    while True:
        draw = float(rng.random())
        if draw < prob:
            reverts.append({"draw": draw, "prob": prob, "rect": None})
            break
        ys = np.sort(rng.integers(0, h, size=2))
        xs = np.sort(rng.integers(0, w, size=2))
        y1, y2 = int(ys[0]), int(ys[1])
        x1, x2 = int(xs[0]), int(xs[1])
        out[y1:y2, x1:x2] = clean[y1:y2, x1:x2]
        reverts.append({"draw": draw, "prob": prob, "rect": [x1, y1, x2, y2]})
        prob += cfg.revert_increment

    return img.new_like(np.clip(out, 0.0, 1.0))


def nightaug_pipeline(
    img: ImageTensor,
    cfg: NightAugConfig | None = None,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> ImageTensor:
    """Run all six augmentations in their fixed order on one image."""
    cfg = cfg or NightAugConfig()
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    out = img
    for aug in AUGMENTATIONS:
        out = apply_single(out, aug, rng, cfg, trace)
    return out
