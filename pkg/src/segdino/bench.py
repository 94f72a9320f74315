"""Inference throughput measurement."""

from __future__ import annotations

import statistics
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from segdino import decoder as dec_mod
from segdino.data import load_image, save_image, synth_sample
from segdino.encoder import frozen_param_count
from segdino.pipeline import Model, preprocessor


@dataclass
class BenchReport:
    iterations: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    trainable_params: int
    frozen_params: int
    include_io: bool

    def lines(self) -> list[str]:
        return [
            f"iterations        {self.iterations}",
            f"include_io        {str(self.include_io).lower()}",
            f"mean_ms           {self.mean_ms:.4f}",
            f"median_ms         {self.median_ms:.4f}",
            f"p95_ms            {self.p95_ms:.4f}",
            f"fps               {self.fps:.4f}",
            f"trainable_params  {self.trainable_params}",
            f"frozen_params     {self.frozen_params}",
        ]


def run_bench(model: Model, iterations: int = 100, warmup: int = 10, include_io: bool = False) -> BenchReport:
    """Time end-to-end forward passes on one synthetic image.

    Without ``include_io`` only the model runs (encoder + decoder + mask);
    with it, every iteration also reads a PPM from disk and normalises it.
    """
    if iterations < 100:
        raise ValueError("bench needs at least 100 timed iterations")
    cfg = model.cfg
    enc, dcfg = cfg.encoder, cfg.decoder
    if enc.image_h == enc.image_w:
        image = synth_sample(replace(cfg.data.synth, n_samples=1, size=enc.image_h), 0).image
    else:
        image = np.full((enc.image_h, enc.image_w, 3), 0.5)
    prep = preprocessor(cfg)
    x = prep(image)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bench.ppm"
        save_image(image, path)

        def once():
            inp = prep(load_image(path)) if include_io else x
            dec_mod.forward(inp, model.encoder, model.decoder, enc, dcfg)

        for _ in range(warmup):
            once()
        times = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            once()
            times.append((time.perf_counter() - t0) * 1000.0)

    mean = statistics.fmean(times)
    return BenchReport(
        iterations=iterations,
        mean_ms=mean,
        median_ms=statistics.median(times),
        p95_ms=float(np.percentile(times, 95)),
        fps=1000.0 / mean,
        trainable_params=model.decoder.count(),
        frozen_params=frozen_param_count(enc),
        include_io=include_io,
    )
