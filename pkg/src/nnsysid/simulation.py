"""Rollout engines: open-loop simulation, batched subsequence simulation, one-step prediction.

Batched simulation advances q subsequences of length m in lockstep on the
tape, so gradients reach both the network parameters and the
per-subsequence initial conditions.  Open-loop simulation reuses the same
step calls on a single row, which keeps a q=1 batch bit-identical to the
sequential rollout.  Any output exceeding DIVERGE_LIMIT in magnitude (or
going non-finite) aborts the rollout with the offending step index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model_structures import IOStructure, io_output, io_shift, ss_output, ss_step

DIVERGE_LIMIT = 1e6


class SimulationDiverged(RuntimeError):
    """Rollout output left the plausible range; carries the step index."""

    def __init__(self, step, worst):
        self.step = step
        self.worst = worst
        super().__init__(
            f"simulated output diverged at step {step} (|y| reached {worst:.3e})"
        )


class UnsupportedStructure(ValueError):
    """The requested operation is undefined for this structure variant."""


@dataclass
class BatchTensors:
    """Subsequence batch: starts s, measured slices, and differentiable seeds.

    y and u hold the measured q x m x channel slices (y[j, t] = Y[s[j] + t]);
    y_tilde holds the matching slice of the hidden variable (standardized
    units) and x0 the per-subsequence initial condition in physical units,
    both built differentiably so gradients flow back to the hidden variable.
    """

    s: np.ndarray
    m: int
    y: np.ndarray
    u: np.ndarray
    y_tilde: ad.Variable
    x0: ad.Variable


def _check_finite(values, step):
    worst = np.abs(values).max() if values.size else 0.0
    if not np.isfinite(worst) or worst > DIVERGE_LIMIT:
        raise SimulationDiverged(step, worst)


def _stack_steps(parts, width):
    """Stack m step results of shape (q, width) into (q, m, width)."""
    q = parts[0].value.shape[0]
    flat = ad.concat(parts)
    return ad.reshape(flat, (q, len(parts), width))


def simulate_batch(model, batch, return_states=False):
    """Simulate all subsequences in lockstep; returns a q x m x n_y Variable.

    With return_states=True (state-space only) also returns the q x m x n_x
    state trajectory Variable, aligned so states[:, t] is the state at
    sample s + t (states[:, 0] is the initial condition itself).
    """
    m = batch.m
    if m < 1:
        raise ValueError(f"subsequence length must be >= 1, got {m}")
    if isinstance(model, IOStructure):
        if return_states:
            raise UnsupportedStructure(
                "lag-vector rollouts have no separate state trajectory"
            )
        x = batch.x0
        outs = []
        for t in range(m):
            y_t = io_output(model, x)
            _check_finite(y_t.value, t)
            outs.append(y_t)
            if t + 1 < m:
                u_t = ad.constant(batch.u[:, t, :])
                x = io_shift(model, x, y_t, u_t)
        return _stack_steps(outs, model.n_y)

    x = batch.x0
    outs, states = [], []
    for t in range(m):
        u_t = ad.constant(batch.u[:, t, :])
        states.append(x)
        y_t = ss_output(model, x, u_t)
        _check_finite(y_t.value, t)
        outs.append(y_t)
        if t + 1 < m:
            x = ss_step(model, x, u_t)
    y_sim = _stack_steps(outs, model.n_y)
    if return_states:
        return y_sim, _stack_steps(states, model.n_x)
    return y_sim


def simulate_open_loop(model, initial, u):
    """Free-run rollout over an input sequence; returns a plain output array.

    State-space: `initial` is the physical starting state; one output per
    input sample.  Lagged structures: `initial` is the lag vector at index
    max(n_a, n_b) into `u`, and the first max(n_a, n_b) samples only seed
    it, so the result has len(u) - max(n_a, n_b) rows.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"input sequence must be 2-D (time, channel), got {u.shape}")
    n = u.shape[0]
    init = initial.value if isinstance(initial, ad.Variable) else np.asarray(initial)
    init = np.asarray(init, dtype=np.float64).reshape(1, -1)

    if isinstance(model, IOStructure):
        k0 = model.min_history
        if n <= k0:
            raise ValueError(
                f"input sequence of {n} samples is shorter than the {k0} lag samples"
            )
        x = ad.constant(init)
        outs = []
        for k in range(k0, n):
            y_k = io_output(model, x)
            _check_finite(y_k.value, k)
            outs.append(y_k.value[0])
            if k + 1 < n:
                x = io_shift(model, x, ad.constant(y_k.value),
                             ad.constant(u[k][None, :]))
        return np.array(outs)

    x = ad.constant(init)
    outs = []
    for k in range(n):
        u_k = ad.constant(u[k][None, :])
        y_k = ss_output(model, x, u_k)
        _check_finite(y_k.value, k)
        outs.append(y_k.value[0])
        if k + 1 < n:
            x = ss_step(model, x, u_k)
    return np.array(outs)


def prediction_offset(model):
    """Index of the first sample a one-step prediction can cover."""
    if isinstance(model, IOStructure):
        return model.min_history
    if getattr(model, "supports_one_step", False):
        return 1
    raise UnsupportedStructure(
        f"one-step prediction needs measured regressors; the "
        f"{model.variant!r} variant has unmeasured states"
    )


def one_step_regressors(model, dataset):
    """Constant regressor matrix whose rows drive each one-step prediction."""
    offset = prediction_offset(model)
    y = np.asarray(dataset.y, dtype=np.float64)
    u = np.asarray(dataset.u, dtype=np.float64)
    n = y.shape[0]
    if n <= offset:
        raise ValueError(f"dataset of {n} samples is too short for lags ({offset})")
    if isinstance(model, IOStructure):
        blocks = [y[offset - lag:n - lag] for lag in range(1, model.n_a + 1)]
        blocks += [u[offset - lag:n - lag] for lag in range(1, model.n_b + 1)]
        return np.concatenate(blocks, axis=1)
    return np.concatenate([y[:-1], u[:-1]], axis=1)


def predict_one_step(model, dataset):
    """Predict each output sample from measured history; rows cover
    samples prediction_offset(model)..N-1 in physical units."""
    reg = one_step_regressors(model, dataset)
    if isinstance(model, IOStructure):
        return io_output(model, ad.constant(reg)).value
    x = ad.constant(reg[:, :model.n_x])
    u = ad.constant(reg[:, model.n_x:])
    return ss_step(model, x, u).value
