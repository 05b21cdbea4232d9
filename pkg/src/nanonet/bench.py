"""Batch-1 latency / FPS measurement and the images-per-second-per-watt metric."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import network
from .arch import validate_and_toposort
from .trainer import ModelState


class BenchError(ValueError):
    pass


@dataclass
class BenchReport:
    model: str
    runs: int
    latency_ms: dict
    fps: float
    watts: float | None = None
    images_per_sec_per_watt: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def energy_efficiency(fps: float, watts: float) -> float:
    if not watts > 0:
        raise BenchError(f"watts must be positive, got {watts}")
    return fps / watts


def latency_stats(durations_ms) -> dict:
    d = np.asarray(durations_ms, dtype=np.float64)
    return {"mean": float(d.mean()), "p50": float(np.percentile(d, 50)),
            "p95": float(np.percentile(d, 95)), "min": float(d.min())}


def measure(model: ModelState, input_shape=None, warmup: int = 5, runs: int = 50,
            clock: Callable[[], float] = time.perf_counter, watts: float | None = None,
            seed: int = 0) -> BenchReport:
    """Time ``warmup + runs`` single-image forward passes.

    ``clock`` returns seconds. Every pass reads it once before and once
    after; warmup passes are timed too but excluded from the statistics.
    """
    if runs < 10:
        raise BenchError("runs >= 10 required")
    if warmup < 1:
        raise BenchError("warmup >= 1 required")
    spec = model.spec
    if input_shape is None:
        input_shape = spec.input_shape
    if tuple(input_shape) != tuple(spec.input_shape):
        raise BenchError(f"input shape {tuple(input_shape)} does not match the model's "
                         f"{tuple(spec.input_shape)}")
    network.check_params(spec, model.params)
    if watts is not None:
        energy_efficiency(1.0, watts)
    order = validate_and_toposort(spec)
    dtype = next(iter(model.params.values())).weights.dtype
    x = np.random.default_rng(seed).random((1,) + tuple(input_shape)).astype(dtype)
    durations = []
    for i in range(warmup + runs):
        t0 = clock()
        network.forward(spec, model.params, x, order=order, keep=False)
        t1 = clock()
        if i >= warmup:
            durations.append((t1 - t0) * 1000.0)
    stats = latency_stats(durations)
    fps = 1000.0 / stats["mean"]
    eff = energy_efficiency(fps, watts) if watts is not None else None
    return BenchReport(spec.name, runs, stats, fps, watts, eff)


def measure_batched(model: ModelState, batch: int = 32, runs: int = 10,
                    clock: Callable[[], float] = time.perf_counter) -> float:
    """Images per second at a fixed batch size (throughput, not real-time FPS)."""
    spec = model.spec
    order = validate_and_toposort(spec)
    dtype = next(iter(model.params.values())).weights.dtype
    x = np.random.default_rng(0).random((batch,) + tuple(spec.input_shape)).astype(dtype)
    network.forward(spec, model.params, x, order=order, keep=False)
    t0 = clock()
    for _ in range(runs):
        network.forward(spec, model.params, x, order=order, keep=False)
    return batch * runs / (clock() - t0)
