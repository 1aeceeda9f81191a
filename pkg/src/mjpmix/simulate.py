"""Seeded simulation of mixture sample paths via the embedded jump chain.

Each path draws from its own Philox stream keyed by ``(seed, path_index)``, so a
cohort is identical whatever the evaluation order or worker count.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NonAbsorbingModel, ZeroExitRate
from .model import MixtureModel, require_valid
from .paths import SamplePath

MAX_EVENTS = 10**9


@dataclass(frozen=True)
class SimConfig:
    """Either a fixed ``horizon`` (censoring time) or ``until_absorption``."""

    count: int
    seed: int = 0
    horizon: Optional[float] = None
    until_absorption: bool = False
    max_events: int = MAX_EVENTS

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("path count must be nonnegative")
        if self.until_absorption:
            if self.max_events <= 0:
                raise ValueError("event cap must be positive")
        elif self.horizon is None or not self.horizon > 0:
            raise ValueError("horizon must be positive unless until_absorption is set")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one path; draws advance the Philox counter."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _categorical(u: float, probs: np.ndarray) -> int:
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # guard against round-off at the top end and zero-probability cells
    k = min(k, len(probs) - 1)
    while probs[k] <= 0 and k > 0:
        k -= 1
    return k


def check_absorbing(model: MixtureModel) -> None:
    """Raise NonAbsorbingModel unless every regime absorbs with probability one."""
    from .analysis import absorption_probs

    if model.space.num_absorbing == 0:
        raise NonAbsorbingModel("until_absorption mode needs at least one absorbing state")
    for m, q in enumerate(model.regimes):
        res = absorption_probs(q)
        if res.unreachable or np.any(np.abs(res.F.sum(axis=1) - 1.0) > 1e-9):
            raise NonAbsorbingModel(
                f"regime {m}: states {[model.space.label(i) for i in res.unreachable]} may never be absorbed")


def simulate_path(model: MixtureModel, config: SimConfig, path_index: int):
    """Simulate one path. Returns ``(SamplePath, hidden_regime)``.

    The hidden regime is for oracle checks only; estimation never sees it.
    """
    rng = path_rng(config.seed, path_index)
    space = model.space
    w = space.num_transient
    initial = _categorical(rng.random(), model.pi)
    regime = _categorical(rng.random(), model.phi[initial])
    q = model.regimes[regime]
    exit_rates = q.exit_rates
    jumps = q.offdiag
    horizon = None if config.until_absorption else float(config.horizon)
    pid = str(path_index)
    t, state, events = 0.0, initial, []
    while True:
        rate = exit_rates[state]
        if rate <= 0:
            if horizon is None:
                raise ZeroExitRate(f"transient state {space.label(state)} has zero exit rate "
                                   f"under regime {regime}")
            return SamplePath(pid, initial, events, horizon, True), regime
        t_next = t + rng.exponential(1.0 / rate)
        if horizon is not None and t_next > horizon:
            # final sojourn truncated at the horizon
            return SamplePath(pid, initial, events, horizon, True), regime
        state = _categorical(rng.random(), jumps[state])
        t = t_next
        events.append((t, state))
        if state >= w:
            return SamplePath(pid, initial, events, t, False), regime
        if len(events) >= config.max_events:
            raise NonAbsorbingModel(f"path {path_index} exceeded {config.max_events} events")


def _simulate_range(args):
    model, config, lo, hi = args
    return [simulate_path(model, config, k) for k in range(lo, hi)]


def simulate_cohort(model: MixtureModel, config: SimConfig, workers: int = 1):
    """Simulate ``config.count`` paths. Returns ``(paths, hidden_labels)``.

    Output does not depend on ``workers``.
    """
    require_valid(model)
    if config.until_absorption:
        check_absorbing(model)
    K = config.count
    if workers > 1 and K > 1:
        step = -(-K // workers)
        chunks = [(model, config, lo, min(lo + step, K)) for lo in range(0, K, step)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for chunk in pool.map(_simulate_range, chunks) for r in chunk]
    else:
        results = _simulate_range((model, config, 0, K))
    paths = [p for p, _ in results]
    labels = np.array([m for _, m in results], dtype=int)
    return paths, labels
