"""Losses, optimizers, and the three fitting procedures for dynamical models.

One-step fitting regresses each sample on its measured predecessors, which
is fast but biased by output noise.  Multi-step fitting rolls the model out
over short subsequences seeded from trainable hidden variables and blends
a fit term against a consistency term, recovering noise robustness at a
back-propagation cost proportional to the subsequence length.  Full
simulation-error fitting is the degenerate single-subsequence case.
"""

import csv
import time
from collections import namedtuple
from dataclasses import dataclass, replace

import numpy as np

import nnsysid.autodiff as ad
from nnsysid.model_structures import IOStructure, Scaler, io_output, ss_step
from nnsysid.nnet import mlp_init
from nnsysid.simulation import (
    BatchTensors,
    SimulationDiverged,
    one_step_regressors,
    prediction_offset,
    simulate_batch,
)

OPTIMIZERS = ("gradient-descent", "adam")
START_MODES = ("random", "sequential-cycling")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOSS_LOG_HEADER = ("iteration", "total", "fit", "consistency", "seconds")

LossRecord = namedtuple("LossRecord", LOSS_LOG_HEADER)


class TrainingDiverged(RuntimeError):
    """Raised when a run loses too many iterations to unstable rollouts."""


@dataclass(frozen=True)
class TrainConfig:
    """Settings shared by all fitting procedures.

    n: iteration count
    lr: learning rate, shared by network parameters and hidden variables
    q: subsequences per batch          (multi-step only)
    m: subsequence length              (multi-step only)
    alpha: weight of the fit term in (0, 1]; 1 - alpha weights consistency
    optimizer: "adam" or "gradient-descent"
    seed: drives both parameter init and batch start sampling
    start_selection: "random" or "sequential-cycling"
    """

    n: int
    lr: float
    q: int = 64
    m: int = 64
    alpha: float = 0.5
    optimizer: str = "adam"
    seed: int = 0
    start_selection: str = "random"

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"iteration count must be >= 0, got {self.n}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.q < 1 or self.m < 1:
            raise ValueError(f"batch shape must be >= 1, got q={self.q}, m={self.m}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(
                f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}"
            )
        if self.start_selection not in START_MODES:
            raise ValueError(
                f"unknown start selection {self.start_selection!r}; "
                f"choose from {START_MODES}"
            )


@dataclass
class HiddenVariables:
    """Trainable per-sample estimates of the noise-free trajectory.

    values holds an N x width Variable in standardized units: scaled
    outputs for lagged structures (kind "output"), scaled states for
    state-space structures (kind "state").
    """

    values: ad.Variable
    kind: str


def loss_mse(y_hat, y):
    """Mean over all elements of squared differences, as a Variable."""
    if not isinstance(y, ad.Variable):
        y = ad.constant(np.asarray(y, dtype=np.float64))
    if y_hat.value.shape != y.value.shape:
        raise ValueError(
            f"prediction shape {y_hat.value.shape} does not match "
            f"target shape {y.value.shape}"
        )
    return ad.mean_all(ad.square(ad.subtract(y_hat, y)))


def _blend(fit, consistency, alpha):
    return ad.add(
        ad.scalar_multiply(fit, alpha),
        ad.scalar_multiply(consistency, 1.0 - alpha),
    )


def loss_multistep(y_sim, y, y_tilde, alpha):
    """alpha * MSE(y_sim, y) + (1 - alpha) * MSE(y_sim, y_tilde)."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    return _blend(loss_mse(y_sim, y), loss_mse(y_sim, y_tilde), alpha)


def sample_batch_starts(rng, q, m, n, min_start, mode="random", iteration=0):
    """Pick q subsequence start indices in [min_start, n - m - 1].

    Random mode draws independently and uniformly; sequential-cycling
    strides through the valid range so every start is visited within
    ceil(count / q) iterations.
    """
    last = n - m - 1
    if last < min_start:
        raise ValueError(
            f"no valid subsequence starts: N={n}, m={m}, min_start={min_start}"
        )
    if mode == "random":
        return rng.integers(min_start, last + 1, size=q)
    if mode == "sequential-cycling":
        count = last - min_start + 1
        return min_start + (iteration * q + np.arange(q)) % count
    raise ValueError(f"unknown start selection {mode!r}; choose from {START_MODES}")


def gather_batch(dataset, hidden, s, m, model):
    """Slice measured tensors and build differentiable seeds for starts s.

    y and u are plain q x m x channel slices of the dataset.  y_tilde
    gathers the matching hidden rows (standardized units) and x0 builds
    each subsequence's initial condition from hidden values in physical
    units, so gradients reach the hidden variable through both.
    """
    s = np.asarray(s, dtype=np.int64)
    y_data = np.asarray(dataset.y, dtype=np.float64)
    u_data = np.asarray(dataset.u, dtype=np.float64)
    n = y_data.shape[0]
    first = model.min_history if isinstance(model, IOStructure) else 0
    if s.min() < first or s.max() + m > n:
        raise ValueError(
            f"starts must lie in [{first}, {n - m}] for m={m}, "
            f"got range [{s.min()}, {s.max()}]"
        )
    window = s[:, None] + np.arange(m)
    y = y_data[window]
    u = u_data[window]
    flat = window.ravel()
    width = hidden.values.value.shape[1]
    y_tilde = ad.reshape(ad.gather_rows(hidden.values, flat), (len(s), m, width))
    if isinstance(model, IOStructure):
        blocks = [
            model.scaler_y.unscale(ad.gather_rows(hidden.values, s - lag))
            for lag in range(1, model.n_a + 1)
        ]
        blocks += [
            ad.constant(u_data[s - lag]) for lag in range(1, model.n_b + 1)
        ]
        x0 = ad.concat(blocks)
    else:
        x0 = model.scaler_x.unscale(ad.gather_rows(hidden.values, s))
    return BatchTensors(s=s, m=m, y=y, u=u, y_tilde=y_tilde, x0=x0)


class OptimizerState:
    """Adam moment accumulators (or nothing, for plain gradient descent)."""

    def __init__(self, params, method):
        if method not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {method!r}; choose from {OPTIMIZERS}")
        self.method = method
        self.t = 0
        if method == "adam":
            self.m = [np.zeros_like(p.value) for p in params]
            self.v = [np.zeros_like(p.value) for p in params]


def optimizer_step(state, params, lr):
    """Apply one update in place; gradients must already be populated."""
    if state.method == "adam":
        if len(params) != len(state.m):
            raise ValueError(
                f"optimizer state tracks {len(state.m)} parameters, got {len(params)}"
            )
        state.t += 1
    for i, p in enumerate(params):
        g = p.grad
        if not np.all(np.isfinite(g)):
            name = p.name or f"parameter {i}"
            raise FloatingPointError(f"non-finite gradient for {name}")
        if state.method == "gradient-descent":
            p.value -= lr * g
        else:
            state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
            state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g
            m_hat = state.m[i] / (1.0 - ADAM_BETA1**state.t)
            v_hat = state.v[i] / (1.0 - ADAM_BETA2**state.t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def min_start_for(model):
    """First admissible subsequence start index."""
    return model.min_history if isinstance(model, IOStructure) else 1


def init_hidden(dataset, model):
    """Seed hidden variables from measurements where they are observable.

    Lagged structures copy the measured outputs; fully-observed states
    copy them as states; mechanical states copy measured positions and
    estimate velocities by differencing them (central in the interior,
    one-sided at the ends).  Unobservable states start at zero.  Values
    are stored in standardized units via the model's scalers.
    """
    y = np.asarray(dataset.y, dtype=np.float64)
    if isinstance(model, IOStructure):
        return HiddenVariables(
            ad.Variable(model.scaler_y.scale_np(y), name="hidden"), "output"
        )
    if model.variant == "fully-observed":
        values = model.scaler_x.scale_np(y)
    elif model.variant == "mechanical":
        if model.ts is None:
            raise ValueError("mechanical hidden init needs the model sample time")
        states = np.empty((y.shape[0], model.n_x))
        states[:, 0::2] = y
        states[:, 1::2] = np.gradient(y, model.ts, axis=0)
        values = model.scaler_x.scale_np(states)
    else:
        values = np.zeros((y.shape[0], model.n_x))
    return HiddenVariables(ad.Variable(values, name="hidden"), "state")


def _reinit_parameters(model, seed):
    """Overwrite network weights with a fresh seeded initialization."""

    def refresh(net, net_seed):
        fresh = mlp_init(net.spec, net_seed)
        for p, f in zip(net.parameters(), fresh.parameters()):
            p.value[...] = f.value

    if isinstance(model, IOStructure):
        refresh(model.nn, seed)
    elif model.variant == "mechanical":
        for i, net in enumerate(model.nn_x):
            refresh(net, seed + i)
    else:
        refresh(model.nn_x, seed)
        if model.nn_y is not None:
            refresh(model.nn_y, seed + 1)


def _fit_scalers(model, dataset):
    """Standardize channels from the identification data."""
    y = np.asarray(dataset.y, dtype=np.float64)
    model.scaler_u = Scaler.fit(dataset.u)
    model.scaler_y = Scaler.fit(y)
    if isinstance(model, IOStructure):
        return
    if model.variant == "fully-observed":
        model.scaler_x = Scaler.fit(y)
    elif model.variant == "mechanical":
        if model.ts is None:
            raise ValueError("mechanical scaling needs the model sample time")
        states = np.empty((y.shape[0], model.n_x))
        states[:, 0::2] = y
        states[:, 1::2] = np.gradient(y, model.ts, axis=0)
        model.scaler_x = Scaler.fit(states)


def _check_divergence_budget(skipped, total_n, lr):
    if skipped > max(1, total_n // 100):
        raise TrainingDiverged(
            f"{skipped} iterations diverged (over 1% of {total_n}); "
            f"lower the learning rate (currently {lr})"
        )


def train_multistep(model, dataset, config, train_hidden=True):
    """Fit by multi-step simulation over sampled subsequences.

    Re-initializes network weights from config.seed, standardizes channels
    from the dataset, seeds hidden variables from measurements, then per
    iteration samples q starts, rolls the model out m steps from hidden
    initial conditions, and descends alpha * fit + (1 - alpha) *
    consistency with one shared learning rate.  Returns (model, hidden,
    loss log); the model is modified in place.
    """
    n_samples = np.asarray(dataset.y).shape[0]
    min_start = min_start_for(model)
    if n_samples - config.m - 1 < min_start:
        raise ValueError(
            f"dataset of {n_samples} samples is too short for m={config.m} "
            f"with min_start={min_start}"
        )
    _reinit_parameters(model, config.seed)
    _fit_scalers(model, dataset)
    hidden = init_hidden(dataset, model)
    is_io = isinstance(model, IOStructure)

    params = list(model.parameters())
    trainables = params + ([hidden.values] if train_hidden else [])
    opt = OptimizerState(trainables, config.optimizer)
    rng = np.random.default_rng(config.seed)
    log = []
    skipped = 0
    for i in range(config.n):
        t0 = time.perf_counter()
        starts = sample_batch_starts(
            rng, config.q, config.m, n_samples, min_start,
            config.start_selection, i,
        )
        try:
            with ad.Tape() as tape:
                batch = gather_batch(dataset, hidden, starts, config.m, model)
                if is_io:
                    y_sim = simulate_batch(model, batch)
                    sim_scaled = model.scaler_y.scale(y_sim)
                    consistency = loss_mse(sim_scaled, batch.y_tilde)
                else:
                    y_sim, states = simulate_batch(model, batch, return_states=True)
                    sim_scaled = model.scaler_y.scale(y_sim)
                    consistency = loss_mse(
                        model.scaler_x.scale(states), batch.y_tilde
                    )
                fit = loss_mse(sim_scaled, model.scaler_y.scale_np(batch.y))
                total = _blend(fit, consistency, config.alpha)
        except SimulationDiverged:
            skipped += 1
            _check_divergence_budget(skipped, config.n, config.lr)
            log.append(LossRecord(i, np.nan, np.nan, np.nan,
                                  time.perf_counter() - t0))
            continue
        ad.zero_grads(trainables)
        ad.backward(tape, total)
        optimizer_step(opt, trainables, config.lr)
        log.append(LossRecord(
            i, total.value.item(), fit.value.item(), consistency.value.item(),
            time.perf_counter() - t0,
        ))
    return model, hidden, log


def train_one_step(model, dataset, config):
    """Fit by one-step prediction from measured regressors.

    Only structures whose regressors are fully measured support this
    (lagged input/output and fully-observed state-space).  Each iteration
    evaluates the full-dataset prediction loss on standardized residuals.
    Weights continue from their current values, so an already-perfect
    model is a fixed point.  Returns (model, loss log); the model is
    modified in place.
    """
    offset = prediction_offset(model)
    _fit_scalers(model, dataset)

    regressors = one_step_regressors(model, dataset)
    targets = model.scaler_y.scale_np(
        np.asarray(dataset.y, dtype=np.float64)[offset:]
    )
    if isinstance(model, IOStructure):
        predict = io_output
        inputs = (ad.constant(regressors),)
    else:
        predict = ss_step
        inputs = (
            ad.constant(regressors[:, : model.n_x]),
            ad.constant(regressors[:, model.n_x:]),
        )

    params = list(model.parameters())
    opt = OptimizerState(params, config.optimizer)
    log = []
    for i in range(config.n):
        t0 = time.perf_counter()
        with ad.Tape() as tape:
            pred = predict(model, *inputs)
            fit = loss_mse(model.scaler_y.scale(pred), targets)
        if not np.isfinite(fit.value):
            raise TrainingDiverged(
                f"prediction loss became non-finite at iteration {i}; "
                f"lower the learning rate (currently {config.lr})"
            )
        ad.zero_grads(params)
        ad.backward(tape, fit)
        optimizer_step(opt, params, config.lr)
        log.append(LossRecord(i, fit.value.item(), fit.value.item(), 0.0,
                              time.perf_counter() - t0))
    return model, log


def train_full_sim(model, dataset, config):
    """Fit by simulation error over one maximal subsequence per iteration.

    Equivalent to train_multistep with q=1, the longest admissible m,
    alpha=1, and hidden variables frozen at their initialization.
    Returns (model, loss log); the model is modified in place.
    """
    n_samples = np.asarray(dataset.y).shape[0]
    m_full = n_samples - min_start_for(model) - 1
    if m_full < 1:
        raise ValueError(f"dataset of {n_samples} samples is too short to simulate")
    degenerate = replace(
        config, q=1, m=m_full, alpha=1.0, start_selection="sequential-cycling"
    )
    model, _, log = train_multistep(model, dataset, degenerate, train_hidden=False)
    return model, log


def write_loss_log(path, log):
    """Export per-iteration losses as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_LOG_HEADER)
        writer.writerows(log)
