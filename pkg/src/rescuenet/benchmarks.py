"""Pinned synthetic benchmarks used by the experiment scripts and acceptance tests.

Changing any constant here changes the reference numbers; rerun
``scripts/overfit.py`` and ``scripts/ablation.py`` and update the bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .data import GeneratorConfig, ScenePair, generate_scenes
from .metrics import EvalReport
from .training import AblationReport, TrainConfig, TrainResult, evaluate, run_ablations_on_pairs, train_on_pairs


@dataclass(frozen=True)
class OverfitBenchmark:
    scenes: int = 10
    data_seed: int = 123
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    # no flips: the model is scored on exactly the images it trains on
    train: TrainConfig = TrainConfig(steps=500, batch=4, crop=64, learning_rate=0.05, augment=False, seed=0)
    min_score: float = 0.95

    def pairs(self) -> list[ScenePair]:
        return generate_scenes(self.generator, self.scenes, self.data_seed)

    def run(self, log: Callable[[str], None] | None = None) -> tuple[TrainResult, EvalReport]:
        pairs = self.pairs()
        result = train_on_pairs(pairs, self.train, log=log)
        ck = result.checkpoint
        return result, evaluate(ck.params, ck.model_config, pairs, self.train.fusion)


@dataclass(frozen=True)
class AblationBenchmark:
    train_scenes: int = 40
    val_scenes: int = 20
    train_seed: int = 1000
    val_seed: int = 2000
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    base: TrainConfig = TrainConfig(steps=600, batch=4, crop=64, learning_rate=0.05)
    seeds: tuple[int, ...] = (0, 1, 2)

    def run(self, log: Callable[[str], None] | None = None) -> AblationReport:
        train_pairs = generate_scenes(self.generator, self.train_scenes, self.train_seed)
        val_pairs = generate_scenes(self.generator, self.val_scenes, self.val_seed)
        return run_ablations_on_pairs(train_pairs, val_pairs, self.base, list(self.seeds), log=log)


OVERFIT = OverfitBenchmark()
ABLATION = AblationBenchmark()
