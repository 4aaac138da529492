"""Software throughput benchmark of the quantized inference engine.

Generates random event windows at the three reference densities (slow,
medium, fast motion), runs the engine for a fixed number of inferences,
and reports inferences per second plus mean internal spike counts, for a
single corner network and for all four corners batched.
"""

from __future__ import annotations

import time

import numpy as np

from .snn import NetworkConfig, QuantizedCornerNet, load_checkpoint, random_network


def synthetic_windows(rng: np.random.Generator, n: int, events_per_inference: float,
                      corners: int, patch: int = 16) -> np.ndarray:
    """Binary spike tensors (n, corners, 2, patch, patch) with Poisson
    event counts summing to the requested mean across all corners."""
    out = np.zeros((n, corners, 2, patch, patch))
    lam = events_per_inference / corners
    for i in range(n):
        for c in range(corners):
            k = rng.poisson(lam)
            if k == 0:
                continue
            xs = rng.integers(0, patch, k)
            ys = rng.integers(0, patch, k)
            ps = rng.integers(0, 2, k)
            out[i, c, ps, ys, xs] = 1.0
    return out


def measure(net: QuantizedCornerNet, windows: np.ndarray) -> tuple[float, float]:
    """(inferences per second, mean spikes per inference) over the run.

    One inference = one 5 ms step of one corner network; a batched step
    over four corners counts as four inferences.
    """
    n, corners = windows.shape[:2]
    net.reset(corners)
    spike_total = 0.0
    sizes = np.asarray(net.config.layer_sizes(), dtype=float)
    t0 = time.perf_counter()
    for i in range(n):
        _, activity = net.step(windows[i])
        spike_total += float((activity[1:] * sizes).sum()) * corners
    dt = time.perf_counter() - t0
    inferences = n * corners
    return inferences / dt, spike_total / inferences


def run_bench(cfg) -> list:
    """Report rows (density, corners, inf/s, spikes/inf) for the config."""
    rng = np.random.default_rng(cfg["run"]["seed"])
    ckpt = cfg["snn"]["checkpoint"]
    if ckpt is not None:
        net, _ = load_checkpoint(ckpt)
    else:
        net = random_network(
            NetworkConfig(
                encoder_channels=tuple(cfg["snn"]["encoder_channels"]),
                pooling_size=cfg["snn"]["pooling_size"],
            ),
            rng,
        )
    n = cfg["bench"]["inferences"]
    rows = []
    for density in cfg["bench"]["densities"]:
        for corners in (1, 4):
            windows = synthetic_windows(rng, max(1, n // corners), density, corners)
            rate, spikes = measure(net, windows)
            rows.append((float(density), corners, rate, spikes))
    return rows
