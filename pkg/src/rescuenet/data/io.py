"""Dataset directory IO.

Layout per scene: ``<id>_pre.ppm``, ``<id>_post.ppm`` (binary P6, 8-bit RGB),
``<id>_mask.pgm`` (binary P5, values {0..4, 255}) and optionally
``<id>_labels.json`` in xBD style::

    {"features": {"xy": [{"wkt": "POLYGON ((...))",
                          "properties": {"feature_type": "building",
                                         "subtype": "minor-damage"}}]},
     "metadata": {"width": 64, "height": 64}}

When a label file exists the mask is rebuilt from its polygons.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..metrics import atomic_write
from .raster import rasterize_polygons
from .synth import ScenePair, quantize, to_float
from .wkt import parse_wkt_polygon

SUBTYPES = {
    "no-damage": 1,
    "minor-damage": 2,
    "major-damage": 3,
    "destroyed": 4,
    "un-classified": None,
}
_SUBTYPE_NAMES = {v: k for k, v in SUBTYPES.items()}


class DatasetError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_netpbm(path: str | os.PathLike) -> np.ndarray:
    """Read binary P5 (H×W) or P6 (H×W×3) 8-bit images."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: not a binary PGM/PPM file")
    vals = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise DatasetError(f"{path}: malformed header")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit images are supported")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    data = buf[pos : pos + need]
    if len(data) != need:
        raise DatasetError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def netpbm_bytes(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim == 3:
        h, w, _ = img.shape
        header = f"P6\n{w} {h}\n255\n".encode()
    else:
        h, w = img.shape
        header = f"P5\n{w} {h}\n255\n".encode()
    return header + img.tobytes()


def write_netpbm(path: str | os.PathLike, img: np.ndarray) -> None:
    atomic_write(os.fspath(path), netpbm_bytes(img))


def labels_json(pair: ScenePair) -> str:
    h, w = pair.combined_mask.shape
    feats = [
        {
            "properties": {"feature_type": "building", "subtype": _SUBTYPE_NAMES[label.damage_class]},
            "wkt": label.to_wkt(),
        }
        for label in pair.labels
    ]
    doc = {"features": {"xy": feats}, "metadata": {"width": w, "height": h, "scene_id": pair.scene_id}}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def parse_labels(text: str):
    doc = json.loads(text)
    labels = []
    for feat in doc["features"]["xy"]:
        subtype = feat.get("properties", {}).get("subtype", "un-classified")
        if subtype not in SUBTYPES:
            raise DatasetError(f"unknown damage subtype {subtype!r}")
        labels.append(parse_wkt_polygon(feat["wkt"], SUBTYPES[subtype]))
    return labels, doc.get("metadata", {})


def save_scene(pair: ScenePair, directory: str | os.PathLike, with_labels: bool = True) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = [d / f"{pair.scene_id}_pre.ppm", d / f"{pair.scene_id}_post.ppm", d / f"{pair.scene_id}_mask.pgm"]
    write_netpbm(files[0], quantize(pair.pre_img).transpose(1, 2, 0))
    write_netpbm(files[1], quantize(pair.post_img).transpose(1, 2, 0))
    write_netpbm(files[2], pair.combined_mask)
    if with_labels and pair.labels:
        files.append(d / f"{pair.scene_id}_labels.json")
        atomic_write(os.fspath(files[3]), labels_json(pair).encode())
    return files


def save_dataset(pairs, directory: str | os.PathLike) -> None:
    for pair in pairs:
        save_scene(pair, directory)


def scene_ids(directory: str | os.PathLike) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"dataset directory {d} does not exist")
    ids = {p.name[: -len("_pre.ppm")] for p in d.glob("*_pre.ppm")}
    ids |= {p.name[: -len("_post.ppm")] for p in d.glob("*_post.ppm")}
    return sorted(ids)


def load_scene(directory: str | os.PathLike, scene_id: str) -> ScenePair:
    d = Path(directory)
    paths = {k: d / f"{scene_id}_{k}" for k in ("pre.ppm", "post.ppm", "mask.pgm", "labels.json")}
    for key in ("pre.ppm", "post.ppm"):
        if not paths[key].exists():
            raise FileNotFoundError(f"missing file {paths[key]}")
    pre = read_netpbm(paths["pre.ppm"])
    post = read_netpbm(paths["post.ppm"])
    if pre.shape != post.shape or pre.ndim != 3:
        raise DatasetError(f"{scene_id}: pre {pre.shape} and post {post.shape} images differ")
    h, w = pre.shape[:2]
    labels = []
    if paths["labels.json"].exists():
        labels, _ = parse_labels(paths["labels.json"].read_text())
        mask = rasterize_polygons(labels, h, w)
    elif paths["mask.pgm"].exists():
        mask = read_netpbm(paths["mask.pgm"]).copy()
    else:
        raise FileNotFoundError(f"missing file {paths['mask.pgm']} (and no label file)")
    if mask.shape != (h, w):
        raise DatasetError(f"{scene_id}: mask {mask.shape} does not match images {(h, w)}")
    return ScenePair(
        pre_img=to_float(pre.transpose(2, 0, 1)),
        post_img=to_float(post.transpose(2, 0, 1)),
        combined_mask=np.asarray(mask, dtype=np.uint8),
        scene_id=scene_id,
        seed=-1,
        labels=labels,
    )


def load_dataset(directory: str | os.PathLike) -> list[ScenePair]:
    """All scenes in ``directory`` ordered by scene id."""
    return [load_scene(directory, sid) for sid in scene_ids(directory)]


def load_masks(directory: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read every ``<id>_mask.pgm`` in a directory (used for scoring predictions)."""
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"directory {d} does not exist")
    return {p.name[: -len("_mask.pgm")]: read_netpbm(p) for p in sorted(d.glob("*_mask.pgm"))}
