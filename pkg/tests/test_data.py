import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rescuenet.data import (
    DatasetError,
    GeneratorConfig,
    GeneratorError,
    PolygonLabel,
    WKTError,
    crop_batch,
    generate_scene,
    generate_scenes,
    load_dataset,
    parse_wkt_polygon,
    polygon_coverage,
    rasterize_polygons,
    save_dataset,
    scene_seed,
)
from rescuenet.data.io import labels_json, parse_labels, read_netpbm, save_scene
from rescuenet.data.synth import DOMAIN_SHIFTS


# -- WKT --------------------------------------------------------------------

def test_wkt_square():
    label = parse_wkt_polygon("POLYGON ((0 0, 2 0, 2 2, 0 2, 0 0))")
    assert label.exterior == [(0, 0), (2, 0), (2, 2), (0, 2), (0, 0)]
    assert len(set(label.exterior)) == 4 and label.holes == []


def test_wkt_unclosed_ring():
    with pytest.raises(WKTError, match="not closed"):
        parse_wkt_polygon("POLYGON((0 0,1 0,1 1))")


def test_wkt_scientific_notation_and_whitespace():
    label = parse_wkt_polygon("  polygon(\n(0 0,1e1 0 , 10 10,0\t10, 0 0 ) )  ")
    assert label.exterior[1] == (10.0, 0.0)


def test_wkt_holes_and_roundtrip():
    text = "POLYGON ((0 0, 10 0, 10 10, 0 10, 0 0), (2 2, 4 2, 4 4, 2 4, 2 2))"
    label = parse_wkt_polygon(text, damage_class=3)
    assert len(label.holes) == 1
    again = parse_wkt_polygon(label.to_wkt(), 3)
    assert again == label


def test_wkt_errors_carry_offsets():
    with pytest.raises(WKTError) as err:
        parse_wkt_polygon("POLYGON ((0 0, 1 0, 0 0))")
    assert "at least 4" in str(err.value)
    text = "POLYGON ((0 0, 1 0, 1 1, 0 0)) x"
    with pytest.raises(WKTError) as err:
        parse_wkt_polygon(text)
    assert err.value.offset == text.index("x")
    with pytest.raises(WKTError) as err:
        parse_wkt_polygon("POINT (1 2)")
    assert err.value.offset == 0


@given(st.binary(max_size=60))
@settings(max_examples=300)
def test_wkt_parser_is_total_on_bytes(data):
    try:
        label = parse_wkt_polygon(data)
    except WKTError as exc:
        assert 0 <= exc.offset <= len(data)
    else:
        assert all(r[0] == r[-1] and len(r) >= 4 for r in label.rings)


@given(st.lists(st.sampled_from([b"POLYGON", b"(", b")", b",", b" ", b"0", b"1.5", b"-2e1", b"x"]), max_size=25))
@settings(max_examples=300)
def test_wkt_parser_is_total_on_token_soup(tokens):
    data = b"".join(tokens)
    try:
        parse_wkt_polygon(data)
    except WKTError as exc:
        assert 0 <= exc.offset <= len(data)


# -- rasterization ----------------------------------------------------------

def brute_force_inside(rings, h, w):
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            px, py = c + 0.5, r + 0.5
            inside = False
            for ring in rings:
                for (x1, y1), (x2, y2) in zip(ring, ring[1:]):
                    if (y1 > py) != (y2 > py) and px < x1 + (py - y1) * (x2 - x1) / (y2 - y1):
                        inside = not inside
            out[r, c] = inside
    return out


def random_polygon(rng, size):
    n = int(rng.integers(3, 9))
    cx, cy = rng.uniform(0, size, 2)
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    if rng.random() < 0.5:
        radii = np.full(n, rng.uniform(1, size / 2))
    else:
        radii = rng.uniform(0.5, size / 2, n)
    pts = [(float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for a, r in zip(angles, radii)]
    if rng.random() < 0.3:
        pts = [(float(round(x)), float(round(y))) for x, y in pts]
    return pts + [pts[0]]


def test_square_on_four_by_four():
    mask = rasterize_polygons([parse_wkt_polygon("POLYGON ((0 0, 2 0, 2 2, 0 2, 0 0))")], 4, 4)
    assert sorted(zip(*np.nonzero(mask))) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_empty_labels():
    assert not rasterize_polygons([], 5, 6).any()


def test_rasterizer_matches_brute_force_200_polygons():
    rng = np.random.default_rng(20)
    for _ in range(200):
        ring = random_polygon(rng, 16)
        rings = [ring]
        if rng.random() < 0.2:
            rings.append(random_polygon(rng, 16))
        assert np.array_equal(polygon_coverage(rings, 16, 16), brute_force_inside(rings, 16, 16))


def test_overwrite_order_unclassified_and_degenerate():
    a = PolygonLabel([(0, 0), (4, 0), (4, 4), (0, 4), (0, 0)], [], 1)
    b = PolygonLabel([(2, 2), (6, 2), (6, 6), (2, 6), (2, 2)], [], None)
    flat = PolygonLabel([(0, 0), (3, 0), (6, 0), (0, 0)], [], 2)
    mask, skipped = rasterize_polygons([a, b, flat], 8, 8, return_skipped=True)
    assert skipped == 1
    assert mask[1, 1] == 1 and mask[3, 3] == 255 and mask[7, 7] == 0


def test_hole_is_excluded():
    label = parse_wkt_polygon("POLYGON ((0 0, 6 0, 6 6, 0 6, 0 0), (2 2, 4 2, 4 4, 2 4, 2 2))", 2)
    mask = rasterize_polygons([label], 6, 6)
    assert mask[2, 2] == 0 and mask[0, 0] == 2 and (mask == 2).sum() == 32


# -- generator --------------------------------------------------------------

def pair_bytes(p):
    return p.pre_img.tobytes() + p.post_img.tobytes() + p.combined_mask.tobytes()


def test_generator_deterministic():
    cfg = GeneratorConfig()
    assert pair_bytes(generate_scene(cfg, 11)) == pair_bytes(generate_scene(cfg, 11))
    assert pair_bytes(generate_scene(cfg, 11)) != pair_bytes(generate_scene(cfg, 12))
    assert scene_seed(3, 0) == scene_seed(3, 0) != scene_seed(3, 1)


def test_no_damage_only():
    cfg = GeneratorConfig(class_distribution=(1.0, 0.0, 0.0, 0.0))
    for seed in range(5):
        p = generate_scene(cfg, seed)
        fg = p.combined_mask > 0
        assert set(np.unique(p.combined_mask[fg])) == {1}
        diff = np.abs(p.post_img - p.pre_img)
        # only independent pixel noise separates the two acquisitions
        assert diff.max() < 8 * cfg.pixel_noise + 1 / 255
        assert abs(float(diff[:, fg].mean()) - float(diff[:, ~fg].mean())) < 0.01


def test_class_frequencies_over_1000_scenes():
    cfg = GeneratorConfig()
    counts = np.zeros(4)
    for p in generate_scenes(cfg, 1000, seed=5):
        for label in p.labels:
            counts[label.damage_class - 1] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - np.array(cfg.class_distribution)) <= 0.03)


def test_damage_severity_is_monotone():
    cfg = GeneratorConfig()
    change = {k: [] for k in range(1, 5)}
    for p in generate_scenes(cfg, 60, seed=9):
        d = np.abs(p.post_img - p.pre_img).mean(axis=0)
        for k in range(1, 5):
            if (p.combined_mask == k).any():
                change[k].append(d[p.combined_mask == k].mean())
    means = [np.mean(change[k]) for k in range(1, 5)]
    assert means == sorted(means)


@pytest.mark.parametrize("shift", [None, *sorted(DOMAIN_SHIFTS)])
def test_mask_consistency_and_no_overlap(shift):
    cfg = GeneratorConfig(domain_shift=shift)
    for p in generate_scenes(cfg, 20, seed=1):
        h, w = p.combined_mask.shape
        cover = np.zeros((h, w), dtype=int)
        for label in p.labels:
            fp = polygon_coverage(label.rings, h, w)
            assert np.all(p.combined_mask[fp] == label.damage_class)
            cover += fp
        assert cover.max() <= 1
        assert np.array_equal(cover == 1, p.combined_mask > 0)
        assert p.pre_img.shape == p.post_img.shape == (3, h, w)
        assert np.array_equal(np.round(p.pre_img * 255) / 255, p.pre_img)


def test_domain_shift_changes_statistics():
    base = generate_scenes(GeneratorConfig(), 20, seed=2)
    dense = generate_scenes(GeneratorConfig(domain_shift="dense"), 20, seed=2)
    arid = generate_scenes(GeneratorConfig(domain_shift="arid"), 20, seed=2)
    assert np.mean([len(p.labels) for p in dense]) > np.mean([len(p.labels) for p in base])
    assert np.mean([p.pre_img[0].mean() for p in arid]) > np.mean([p.pre_img[0].mean() for p in base])


def test_generator_config_errors():
    with pytest.raises(GeneratorError, match="summing to 1"):
        generate_scene(GeneratorConfig(class_distribution=(0.5, 0.5, 0.2, 0.0)), 0)
    with pytest.raises(GeneratorError, match="multiple of 8"):
        generate_scene(GeneratorConfig(image_size=30), 0)
    with pytest.raises(GeneratorError, match="could not place"):
        generate_scene(GeneratorConfig(image_size=16, buildings_per_scene=(30, 30), building_size=(6, 8)), 0)
    with pytest.raises(GeneratorError, match="unknown domain shift"):
        generate_scene(GeneratorConfig(domain_shift="lunar"), 0)


# -- IO ---------------------------------------------------------------------

def test_save_load_roundtrip(tmp_path):
    pairs = generate_scenes(GeneratorConfig(), 10, seed=4)
    save_dataset(pairs, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [p.scene_id for p in loaded] == sorted(p.scene_id for p in pairs)
    for a, b in zip(sorted(pairs, key=lambda p: p.scene_id), loaded):
        assert pair_bytes(a) == pair_bytes(b)
        assert a.labels == b.labels


def test_files_are_byte_identical_across_runs(tmp_path):
    for out in ("a", "b"):
        save_dataset(generate_scenes(GeneratorConfig(), 2, seed=7), tmp_path / out)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 8
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_missing_post_image(tmp_path):
    save_dataset(generate_scenes(GeneratorConfig(), 1, seed=4), tmp_path)
    target = next(tmp_path.glob("*_post.ppm"))
    target.unlink()
    with pytest.raises(FileNotFoundError, match=target.name):
        load_dataset(tmp_path)


def test_label_file_takes_precedence(tmp_path):
    pair = generate_scene(GeneratorConfig(), 3, scene_id="x")
    save_scene(pair, tmp_path)
    (tmp_path / "x_mask.pgm").write_bytes(b"P5\n64 64\n255\n" + bytes(64 * 64))
    assert np.array_equal(load_dataset(tmp_path)[0].combined_mask, pair.combined_mask)
    (tmp_path / "x_labels.json").unlink()
    assert not load_dataset(tmp_path)[0].combined_mask.any()


def test_label_file_format():
    pair = generate_scene(GeneratorConfig(), 3, scene_id="x")
    doc = json.loads(labels_json(pair))
    subtypes = {f["properties"]["subtype"] for f in doc["features"]["xy"]}
    assert subtypes <= {"no-damage", "minor-damage", "major-damage", "destroyed"}
    labels, meta = parse_labels(labels_json(pair))
    assert labels == pair.labels and meta["width"] == 64
    doc["features"]["xy"][0]["properties"]["subtype"] = "un-classified"
    labels, _ = parse_labels(json.dumps(doc))
    assert labels[0].damage_class is None
    doc["features"]["xy"][0]["properties"]["subtype"] = "flooded"
    with pytest.raises(DatasetError):
        parse_labels(json.dumps(doc))


def test_dimension_mismatch(tmp_path):
    pair = generate_scene(GeneratorConfig(), 3, scene_id="x")
    save_scene(pair, tmp_path, with_labels=False)
    (tmp_path / "x_mask.pgm").write_bytes(b"P5\n8 8\n255\n" + bytes(64))
    with pytest.raises(DatasetError, match="does not match"):
        load_dataset(tmp_path)
    assert read_netpbm(tmp_path / "x_mask.pgm").shape == (8, 8)


# -- batching ---------------------------------------------------------------

@pytest.fixture(scope="module")
def scenes():
    return generate_scenes(GeneratorConfig(), 4, seed=6)


def test_full_crop_without_augment_is_identity(scenes):
    b = crop_batch(scenes, 64, 4, seed=0, augment=False)
    by_id = {p.scene_id: p for p in scenes}
    assert sorted(b.scene_ids) == sorted(by_id)
    for i, sid in enumerate(b.scene_ids):
        assert np.array_equal(b.pre[i], by_id[sid].pre_img)
        assert np.array_equal(b.mask[i], by_id[sid].combined_mask)


def test_crop_deterministic(scenes):
    a = crop_batch(scenes, 32, 6, seed=3)
    b = crop_batch(scenes, 32, 6, seed=3)
    assert a.pre.tobytes() == b.pre.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    assert a.pre.shape == (6, 3, 32, 32)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_flips_commute_with_mask(seed):
    pair = generate_scene(GeneratorConfig(image_size=16, buildings_per_scene=(1, 2), building_size=(4, 6)), seed)
    # encode the mask into the image so any mismatch in transforms shows up
    pair.pre_img = np.broadcast_to(pair.combined_mask / 255.0, pair.pre_img.shape).astype(np.float32)
    pair.post_img = pair.pre_img.copy()
    b = crop_batch([pair], 8, 1, seed=seed, augment=True)
    assert np.array_equal(np.round(b.pre[0, 0] * 255).astype(np.uint8), b.mask[0])
    assert np.array_equal(b.pre, b.post)


def test_crop_errors(scenes):
    with pytest.raises(ValueError, match="larger"):
        crop_batch(scenes, 72, 1, seed=0)
    with pytest.raises(ValueError, match="multiple of 8"):
        crop_batch(scenes, 30, 1, seed=0)
