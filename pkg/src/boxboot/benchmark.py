"""The standard synthetic benchmark and the comparison runs built on it.

Every run uses 640 scenes at 64x64 with the default 18% pixel-perfect train
images.  Runs differ in loss variant, region mode, which labels are sampled,
or whether the whole train split is pixel-perfect (the oracle).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

from boxboot.synthdata import SceneConfig, generate_dataset, make_split
from boxboot.trainer import MetricsRecord, TrainConfig, TrainData, train

N_SCENES = 640
STEPS = 5000


@dataclass(frozen=True)
class RunSpec:
    classes: int
    oracle: bool = False
    overrides: dict = field(default_factory=dict)


RUNS: dict[str, RunSpec] = {
    # binary benchmark
    "plain_mixed": RunSpec(1, overrides={"loss_variant": "BcePlain"}),
    "pp_only": RunSpec(1, overrides={"loss_variant": "BcePlain", "pp_sampling_chance": 1.0}),
    "unc_box": RunSpec(1, overrides={"loss_variant": "BceUncBootstrap", "region_mode": "UncBoxOnly"}),
    "unc_all": RunSpec(1, overrides={"loss_variant": "BceUncBootstrap", "region_mode": "UncAll"}),
    "oracle": RunSpec(1, oracle=True, overrides={"loss_variant": "BcePlain", "pp_sampling_chance": 1.0}),
    # two object classes plus background
    "mc_plain_mixed": RunSpec(2, overrides={"loss_variant": "BcePlain"}),
    "mc_composite": RunSpec(2, overrides={"loss_variant": "MultiClass"}),
    "mc_oracle": RunSpec(2, oracle=True, overrides={"loss_variant": "BcePlain", "pp_sampling_chance": 1.0}),
}


@dataclass
class RunResult:
    name: str
    history: list[MetricsRecord]
    cpu_seconds: float

    @property
    def final(self) -> MetricsRecord:
        return self.history[-1]


@lru_cache(maxsize=4)
def benchmark_data(classes: int, oracle: bool = False, seed: int = 0) -> TrainData:
    dataset = generate_dataset(SceneConfig(classes=classes, seed=seed), N_SCENES)
    if oracle:
        # same scenes and val images, every train image pixel-perfect
        dataset = dataset.with_split(make_split(N_SCENES, 1.0, seed))
    return TrainData.from_dataset(dataset)


def run(name: str, steps: int = STEPS, eval_every: int = 500, seed: int = 0) -> RunResult:
    """Train one named benchmark run; ``cpu_seconds`` covers training only."""
    spec = RUNS[name]
    data = benchmark_data(spec.classes, spec.oracle, seed)
    cfg = TrainConfig(steps=steps, eval_every=eval_every, seed=seed, **spec.overrides)
    start = time.process_time()
    _, history = train(data, cfg)
    return RunResult(name, history, time.process_time() - start)
