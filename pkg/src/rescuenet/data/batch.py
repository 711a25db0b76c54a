"""Seeded random crops and flips over a list of scenes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synth import ScenePair


@dataclass
class Batch:
    pre: np.ndarray  # N×3×c×c float32
    post: np.ndarray
    mask: np.ndarray  # N×c×c uint8
    scene_ids: list[str]


def stack_pairs(pairs: list[ScenePair]) -> Batch:
    return Batch(
        pre=np.stack([p.pre_img for p in pairs]),
        post=np.stack([p.post_img for p in pairs]),
        mask=np.stack([p.combined_mask for p in pairs]),
        scene_ids=[p.scene_id for p in pairs],
    )


def crop_batch(pairs: list[ScenePair], crop: int, batch: int, seed: int, augment: bool = True) -> Batch:
    """Draw ``batch`` scenes (without replacement when possible), crop and flip.

    The same crop window and flips are applied to pre, post and mask.
    """
    if not pairs:
        raise ValueError("no scenes to draw from")
    if crop <= 0 or crop % 8:
        raise ValueError(f"crop must be a positive multiple of 8, got {crop}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    idx = rng.choice(len(pairs), size=batch, replace=batch > len(pairs))
    pre, post, mask, ids = [], [], [], []
    for i in idx:
        p = pairs[int(i)]
        h, w = p.combined_mask.shape
        if crop > h or crop > w:
            raise ValueError(f"crop {crop} larger than image {h}x{w}")
        r = int(rng.integers(0, h - crop + 1))
        c = int(rng.integers(0, w - crop + 1))
        a = p.pre_img[:, r : r + crop, c : c + crop]
        b = p.post_img[:, r : r + crop, c : c + crop]
        m = p.combined_mask[r : r + crop, c : c + crop]
        if augment:
            if rng.random() < 0.5:
                a, b, m = a[:, :, ::-1], b[:, :, ::-1], m[:, ::-1]
            if rng.random() < 0.5:
                a, b, m = a[:, ::-1], b[:, ::-1], m[::-1]
        pre.append(np.ascontiguousarray(a))
        post.append(np.ascontiguousarray(b))
        mask.append(np.ascontiguousarray(m))
        ids.append(p.scene_id)
    return Batch(np.stack(pre), np.stack(post), np.stack(mask), ids)
