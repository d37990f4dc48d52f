"""Synthetic benchmark, stage runners and the ablation harness."""
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import BenchmarkConfig, PipelineConfig
from .evaluation import evaluate, format_table
from .model import DetectorTrainConfig, build_detector, build_samples, ground_truth, predict, train_detector
from .mre import training as mos_training
from .mre.pointnet import build_mos
from .scene import named_rng, random_scene_config, simulate

log = logging.getLogger(__name__)

FRAMES_GRID = (1, 3, 5)
ALPHA_GRID = (0.3, 0.5, 0.7)
MODULES_GRID = (("neither", False, False), ("MRE only", True, False), ("MAGF only", False, True),
                ("MRE+MAGF", True, True))
PRESETS = ("frames", "alpha", "modules")
SPLITS = ("train", "test", "mos-train", "mos-test")


def sub_seed(seed, *keys):
    """Integer seed for one named stage under the root ``seed``."""
    return int(named_rng(seed, *keys).integers(0, 2 ** 62))


def benchmark_sequence(seed, split, i, bench=BenchmarkConfig(), n_frames=None):
    """Scene ``i`` of ``split`` under root ``seed``."""
    s = sub_seed(seed, "sim", split, i)
    rng = named_rng(s, "ego")
    tpl = replace(bench.scene, n_frames=n_frames or bench.scene.n_frames,
                  ego_speed=float(rng.uniform(*bench.ego_speed)))
    cfg = random_scene_config(s, tpl, n_objects=bench.n_objects, lidar_range_ref=bench.lidar_range_ref)
    return simulate(cfg, name=f"{split}{i:03d}")


def benchmark_split(seed, split, bench=BenchmarkConfig()):
    n = {"train": bench.n_train, "test": bench.n_test, "mos-train": bench.mos_sequences,
         "mos-test": bench.mos_test_sequences}[split]
    frames = {"mos-train": bench.mos_frames, "mos-test": bench.mos_frames, "test": bench.test_frames}.get(split)
    return [benchmark_sequence(seed, split, i, bench, frames) for i in range(n)]


def train_mos_on(train_seqs, test_seqs, cfg, seed, epochs=None, every=1, on_epoch=None, net=None):
    """Train the MOS network; returns ``(net, history, metrics on test_seqs)``."""
    m = cfg.mre
    net = net or build_mos(m.network, seed=sub_seed(seed, "mos-init"))
    train = mos_training.build_samples(train_seqs, net, m.frames, every)
    tc = replace(m.train, seed=sub_seed(seed, "mos-train"), epochs=m.train.epochs if epochs is None else epochs)
    net, hist = mos_training.train_mos(net, train, tc, on_epoch=on_epoch)
    metrics = {}
    if test_seqs:
        test = mos_training.build_samples(test_seqs, net, m.frames, every)
        metrics = {"mos": mos_training.evaluate_mos(net, test, m.alpha),
                   "threshold": mos_training.evaluate_threshold(test)}
    return net, hist, metrics


@dataclass
class Variant:
    frames: int = 5
    use_mre: bool = True
    use_magf: bool = True

    @property
    def key(self):
        return (self.frames, self.use_mre, self.use_magf)


@dataclass
class Benchmark:
    """Lazily simulates, trains and caches everything one seed of the ablations needs."""
    seed: int = 0
    config: PipelineConfig = PipelineConfig()
    mos: object = None
    mos_metrics: dict = None
    models: dict = field(default_factory=dict)
    sequences: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def bench(self):
        return self.config.benchmark

    def split(self, name):
        if name not in self.sequences:
            self.sequences[name] = benchmark_split(self.seed, name, self.bench)
        return self.sequences[name]

    def mos_net(self):
        if self.mos is None:
            t = time.perf_counter()
            self.mos, _, self.mos_metrics = train_mos_on(
                self.split("mos-train"), self.split("mos-test"), self.config, self.seed,
                self.bench.mos_epochs, self.bench.mos_every)
            self.timings["mos"] = time.perf_counter() - t
            log.info("seed %d MOS: %s", self.seed, self.mos_metrics["mos"])
        return self.mos

    def samples(self, split, variant, alpha=None):
        m = self.config.mre
        alpha = m.alpha if alpha is None else alpha
        first = max(FRAMES_GRID + (m.frames,)) - 1
        return build_samples(self.split(split), self.mos_net(), variant.frames, alpha, variant.use_mre,
                             self.config.ground_params(), 1, first_target=first, tau=m.tau)

    def model(self, variant):
        if variant.key not in self.models:
            cfg = self.config
            dc = replace(cfg.detector_config(self.bench.grid), use_mre=variant.use_mre, use_magf=variant.use_magf)
            det = build_detector(dc, seed=sub_seed(self.seed, "det-init"))
            train = self.samples("train", variant)
            tc = replace(cfg.detector.train, seed=sub_seed(self.seed, "det-train"), epochs=self.bench.det_epochs)
            t = time.perf_counter()
            train_detector(det, train, DetectorTrainConfig(tc, cfg.detector.mode), self.mos_net())
            self.timings[variant.key] = time.perf_counter() - t
            log.info("seed %d trained %s in %.0f s", self.seed, variant.key, self.timings[variant.key])
            self.models[variant.key] = det
        return self.models[variant.key]

    def evaluate(self, variant, alpha=None):
        det = self.model(variant)
        test = self.samples("test", variant, alpha)
        return evaluate(predict(det, test), ground_truth(test), self.config.eval.build())


def preset_rows(preset, frames=5):
    """``[(label, Variant, alpha)]`` for one ablation preset."""
    if preset == "frames":
        return [(f"{k} frame" + ("s" if k > 1 else ""), Variant(k), None) for k in FRAMES_GRID]
    if preset == "alpha":
        return [(f"alpha={a}", Variant(frames), a) for a in ALPHA_GRID]
    if preset == "modules":
        return [(name, Variant(frames, mre, magf), None) for name, mre, magf in MODULES_GRID]
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")


def ablate(preset, seeds=(0,), config=PipelineConfig(), benches=None):
    """Run one preset grid for each seed; returns ``{seed: [(label, report)]}``.

    ``benches`` (seed -> :class:`Benchmark`) lets several presets share trained models.
    """
    benches = {} if benches is None else benches
    out = {}
    for seed in seeds:
        bench = benches.setdefault(seed, Benchmark(seed, config))
        out[seed] = [(label, bench.evaluate(v, a)) for label, v, a in preset_rows(preset, config.mre.frames)]
    return out


def map_series(results, region="EntireArea"):
    """``{seed: [mAP per row]}``."""
    return {seed: [rep[region]["mAP"] for _, rep in rows] for seed, rows in results.items()}


def ablation_table(results, region="EntireArea"):
    """Text table per seed, plus the seed-mean mAP per row."""
    parts = []
    for seed, rows in results.items():
        parts += [f"seed {seed}", format_table(rows), ""]
    labels = [label for label, _ in next(iter(results.values()))]
    series = np.array(list(map_series(results, region).values()))
    means = [f"{label}: {100 * float(np.nanmean(series[:, i])):.2f}" for i, label in enumerate(labels)]
    parts.append(f"mean mAP ({region}) | " + " | ".join(means))
    return "\n".join(parts)


def increasing(values, strict=True):
    """Whether a sequence is increasing (strictly or not); NaN anywhere fails."""
    if any(math.isnan(x) for x in values):
        return False
    return all((b > a) if strict else (b >= a) for a, b in zip(values, values[1:]))
