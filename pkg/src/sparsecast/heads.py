"""Multi-resolution forecasting: horizon scheduling and autoregressive rollout.

A model carries one linear head per configured horizon p_j. An arbitrary
request H is served by greedily picking the largest head that still fits the
remaining length, appending its prediction to the context, and repeating;
since the smallest head is always 1, every H is reachable. Multivariate
inputs are forecast channel by channel and never mix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigError


@dataclass
class ForecastPlan:
    """Ordered head picks whose sum is exactly the requested horizon."""

    picks: list

    def __iter__(self):
        return iter(self.picks)

    def __len__(self):
        return len(self.picks)

    @property
    def total(self) -> int:
        return sum(self.picks)


def plan_horizons(h: int, horizons) -> ForecastPlan:
    """Greedy schedule: repeatedly take the largest horizon that still fits."""
    if h < 1:
        raise ValueError(f"forecast horizon must be >= 1, got {h}")
    horizons = list(horizons)
    if not horizons or horizons[0] != 1:
        raise ConfigError("head horizons must start at 1")
    picks = []
    done = 0
    while done < h:
        for p in reversed(horizons):
            if done + p <= h:
                picks.append(p)
                done += p
                break
    return ForecastPlan(picks=picks)


def autoregressive_forecast(model, context, h: int, ensemble: bool = False) -> np.ndarray:
    """Forecast h future points of a univariate context.

    Per plan pick p: run the model on the current context, read head p's
    prediction at the last position, and append those p values. The context
    slides (oldest points dropped) whenever it would exceed max_context.

    With ensemble=True each predicted offset is averaged over every head
    whose horizon reaches it, instead of trusting the scheduled head alone.
    """
    context = np.asarray(context, dtype=np.float64).reshape(-1)
    if context.size < 1:
        raise ValueError("cannot forecast from an empty context")
    horizons = model.config.head_horizons
    plan = plan_horizons(h, horizons)
    window = np.array(context, copy=True)
    out = np.empty(0, dtype=np.float64)
    for p in plan:
        if window.size > model.config.max_context:
            window = window[-model.config.max_context:]
        result = model.forward(window)
        head_idx = horizons.index(p)
        if ensemble:
            votes = []
            for j, pj in enumerate(horizons):
                if pj >= p:
                    votes.append(result.head_outputs[j].data[-1, :p])
            step = np.mean(votes, axis=0)
        else:
            step = result.head_outputs[head_idx].data[-1, :]
        step = np.asarray(step, dtype=np.float64)
        window = np.concatenate([window, step])
        out = np.concatenate([out, step])
    assert out.size == h
    return out


def forecast_multivariate(model, context: np.ndarray, h: int, ensemble: bool = False) -> np.ndarray:
    """Channel-independent forecast: context [T, C] -> [H, C]."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim == 1:
        context = context[:, None]
    channels = context.shape[1]
    out = np.empty((h, channels), dtype=np.float64)
    for c in range(channels):
        out[:, c] = autoregressive_forecast(model, context[:, c], h, ensemble=ensemble)
    return out
