from .batch import Batch, crop_batch, stack_pairs
from .io import DatasetError, load_dataset, load_masks, save_dataset, save_scene
from .raster import polygon_coverage, rasterize_polygons
from .synth import (
    DamageEffect,
    GeneratorConfig,
    GeneratorError,
    ScenePair,
    generate_scene,
    generate_scenes,
    scene_seed,
)
from .wkt import PolygonLabel, WKTError, parse_wkt_polygon

__all__ = [
    "Batch",
    "DamageEffect",
    "DatasetError",
    "GeneratorConfig",
    "GeneratorError",
    "PolygonLabel",
    "ScenePair",
    "WKTError",
    "crop_batch",
    "generate_scene",
    "generate_scenes",
    "load_dataset",
    "load_masks",
    "parse_wkt_polygon",
    "polygon_coverage",
    "rasterize_polygons",
    "save_dataset",
    "save_scene",
    "scene_seed",
    "stack_pairs",
]
