"""Deterministic synthetic pre/post disaster scenes.

Each scene is a textured ground plane with non-overlapping rectangular
buildings, some rotated by angles whose cosine and sine are exact rationals
(Pythagorean triples) so placement never depends on libm. Every building
draws a damage class; the post image re-renders it with an effect whose
strength grows with the class: minor damage darkens the roof and adds a few
debris speckles, major damage also replaces part of the roof with rubble,
and destroyed buildings are entirely rubble.

Randomness comes from numpy's PCG64 bit generator seeded through
SeedSequence, so a (config, seed) pair always yields the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .raster import polygon_coverage
from .wkt import PolygonLabel

# (cos, sin) pairs with exact rational values
_ROTATIONS = ((4 / 5, 3 / 5), (3 / 5, 4 / 5), (12 / 13, 5 / 13), (5 / 13, 12 / 13))


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class DamageEffect:
    brightness: float = 0.0
    speckle: float = 0.0
    removal: float = 0.0


DEFAULT_EFFECTS = (
    DamageEffect(0.0, 0.0, 0.0),
    DamageEffect(-0.12, 0.10, 0.0),
    DamageEffect(-0.22, 0.25, 0.45),
    DamageEffect(-0.30, 0.60, 1.0),
)


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    buildings_per_scene: tuple[int, int] = (3, 6)
    building_size: tuple[int, int] = (8, 16)
    class_distribution: tuple[float, float, float, float] = (0.4, 0.2, 0.2, 0.2)
    damage_rendering: tuple[DamageEffect, ...] = DEFAULT_EFFECTS
    domain_shift: str | None = None
    rotated_fraction: float = 0.3
    margin: int = 2
    max_retries: int = 200
    ground_color: tuple[float, float, float] = (0.35, 0.45, 0.30)
    texture_strength: float = 0.06
    pixel_noise: float = 0.02
    aspect_range: tuple[float, float] = (0.6, 1.0)

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 8:
            raise GeneratorError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        lo, hi = self.buildings_per_scene
        if lo < 0 or hi < lo:
            raise GeneratorError(f"invalid buildings_per_scene {self.buildings_per_scene}")
        smin, smax = self.building_size
        if smin < 2 or smax < smin or smax >= self.image_size:
            raise GeneratorError(f"invalid building_size {self.building_size}")
        dist = self.class_distribution
        if len(dist) != 4 or any(p < 0 for p in dist) or abs(sum(dist) - 1.0) > 1e-9:
            raise GeneratorError(f"class_distribution must be 4 non-negative values summing to 1, got {dist}")
        if len(self.damage_rendering) != 4:
            raise GeneratorError("damage_rendering needs one effect per damage class")
        if self.domain_shift is not None and self.domain_shift not in DOMAIN_SHIFTS:
            raise GeneratorError(f"unknown domain shift {self.domain_shift!r}; choose from {sorted(DOMAIN_SHIFTS)}")


# Presets that move texture statistics and shape priors away from the default.
DOMAIN_SHIFTS = {
    "arid": dict(
        ground_color=(0.62, 0.52, 0.38),
        texture_strength=0.10,
        pixel_noise=0.035,
        aspect_range=(0.35, 0.6),
        rotated_fraction=0.6,
    ),
    "dense": dict(
        buildings_per_scene=(6, 10),
        building_size=(6, 11),
        margin=1,
        ground_color=(0.42, 0.42, 0.42),
    ),
}


def resolve(config: GeneratorConfig) -> GeneratorConfig:
    config.validate()
    if config.domain_shift is None:
        return config
    return replace(config, **DOMAIN_SHIFTS[config.domain_shift])


@dataclass
class ScenePair:
    pre_img: np.ndarray  # 3×H×W float32 in [0, 1], multiples of 1/255
    post_img: np.ndarray
    combined_mask: np.ndarray  # H×W uint8 {0..4, 255}
    scene_id: str
    seed: int
    labels: list[PolygonLabel] = field(default_factory=list)


@dataclass
class _Building:
    polygon: PolygonLabel
    footprint: np.ndarray
    roof: np.ndarray


def to_float(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float32) / np.float32(255.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size, endpoint=False)
    i0 = t.astype(int)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _rectangle(rng, cfg: GeneratorConfig) -> list[tuple[float, float]]:
    size = cfg.image_size
    smin, smax = cfg.building_size
    long_side = int(rng.integers(smin, smax + 1))
    lo, hi = cfg.aspect_range
    short_side = max(smin // 2, int(round(long_side * (lo + (hi - lo) * rng.random()))))
    w, h = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
    rotated = rng.random() < cfg.rotated_fraction
    if rotated:
        c, s = _ROTATIONS[int(rng.integers(len(_ROTATIONS)))]
        if rng.random() < 0.5:
            s = -s
    else:
        c, s = 1.0, 0.0
    half_w, half_h = w / 2, h / 2
    ext_x = abs(c) * half_w + abs(s) * half_h
    ext_y = abs(s) * half_w + abs(c) * half_h
    lo_x, hi_x = int(np.ceil(ext_x)) + 1, size - int(np.ceil(ext_x)) - 1
    lo_y, hi_y = int(np.ceil(ext_y)) + 1, size - int(np.ceil(ext_y)) - 1
    if hi_x < lo_x or hi_y < lo_y:
        return []
    cx = float(rng.integers(lo_x, hi_x + 1))
    cy = float(rng.integers(lo_y, hi_y + 1))
    corners = ((-half_w, -half_h), (half_w, -half_h), (half_w, half_h), (-half_w, half_h))
    ring = [(cx + c * dx - s * dy, cy + s * dx + c * dy) for dx, dy in corners]
    return ring + [ring[0]]


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(r):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def _rubble(rng, n: int) -> np.ndarray:
    base = 0.30 + 0.35 * rng.random((n, 1))
    tint = np.array([1.0, 0.9, 0.78]) * base
    return tint + 0.08 * rng.standard_normal((n, 3))


def generate_scene(config: GeneratorConfig, seed: int, scene_id: str | None = None) -> ScenePair:
    cfg = resolve(config)
    size = cfg.image_size
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))

    lo, hi = cfg.buildings_per_scene
    count = int(rng.integers(lo, hi + 1))
    occupied = np.zeros((size, size), dtype=bool)
    buildings: list[_Building] = []
    cum = np.cumsum(cfg.class_distribution)
    for _ in range(count):
        for _attempt in range(cfg.max_retries):
            ring = _rectangle(rng, cfg)
            if not ring:
                continue
            fp = polygon_coverage([ring], size, size)
            if fp.sum() < 4 or (fp & occupied).any():
                continue
            break
        else:
            raise GeneratorError(
                f"could not place {count} non-overlapping buildings in a {size}x{size} scene "
                f"after {cfg.max_retries} attempts"
            )
        occupied |= _dilate(fp, cfg.margin)
        cls = int(min(np.searchsorted(cum, rng.random(), side="right"), 3)) + 1
        roof = 0.45 + 0.4 * rng.random(3)
        buildings.append(_Building(PolygonLabel(ring, [], cls), fp, roof))

    ground = np.asarray(cfg.ground_color)[:, None, None]
    coarse = _smooth_field(rng, size, 4)[None]
    fine = rng.standard_normal((3, 1, 1)) * _smooth_field(rng, size, 8)[None]
    scene = ground + cfg.texture_strength * (coarse + 0.5 * fine)

    mask = np.zeros((size, size), dtype=np.uint8)
    pre = scene.copy()
    post = scene.copy()
    for b in buildings:
        mask[b.footprint] = b.polygon.damage_class
        pre[:, b.footprint] = b.roof[:, None]
        post[:, b.footprint] = b.roof[:, None]

    pre = pre + cfg.pixel_noise * rng.standard_normal(pre.shape)
    post = post + cfg.pixel_noise * rng.standard_normal(post.shape)

    for b in buildings:
        effect = cfg.damage_rendering[b.polygon.damage_class - 1]
        ys, xs = np.nonzero(b.footprint)
        n = ys.size
        post[:, ys, xs] += effect.brightness
        if effect.removal > 0:
            # remove the part of the roof beyond a random cut line
            angle = rng.random() * 2 * np.pi
            proj = xs * np.cos(angle) + ys * np.sin(angle)
            cut = np.quantile(proj, 1.0 - effect.removal) if effect.removal < 1 else -np.inf
            gone = proj >= cut
            post[:, ys[gone], xs[gone]] = _rubble(rng, int(gone.sum())).T
        if effect.speckle > 0:
            hit = rng.random(n) < effect.speckle
            post[:, ys[hit], xs[hit]] = _rubble(rng, int(hit.sum())).T * 0.7

    return ScenePair(
        pre_img=to_float(quantize(pre)),
        post_img=to_float(quantize(post)),
        combined_mask=mask,
        scene_id=scene_id if scene_id is not None else f"scene_{int(seed)}",
        seed=int(seed),
        labels=[b.polygon for b in buildings],
    )


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint32)[0])


def generate_scenes(config: GeneratorConfig, count: int, seed: int) -> list[ScenePair]:
    return [
        generate_scene(config, scene_seed(seed, i), scene_id=f"s{seed}_{i:05d}")
        for i in range(count)
    ]
