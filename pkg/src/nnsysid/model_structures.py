"""Dynamical model structures: state-space variants and the lagged input/output form.

All structures expose physical-unit step/output maps.  Each owns a set of
per-channel affine scalers; inputs are standardized before entering a
network and network outputs are mapped back to physical units.  Where a
network is the entire quantity (state map of the general and
fully-observed variants, output maps other than the residual one, the
lagged-form output) the full affine unscaling applies, so a zero network
with fitted scalers predicts the channel means.  Where a network is an
additive correction (residual terms, the integral state increment, the
mechanical acceleration) only the standard-deviation factor applies, so a
zero network reproduces the underlying linear/constant behavior exactly.

State layout for the mechanical variant: position channels at even
indices, each immediately followed by its velocity; one independent
acceleration network per velocity; outputs are the positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nnet import MLPSpec, mlp_forward, mlp_init

SS_VARIANTS = ("general", "residual", "integral", "fully-observed", "mechanical")


class Scaler:
    """Per-channel affine standardization: scaled = (x - mean) / std."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError(
                f"scaler mean/std must be matching 1-D arrays, got "
                f"{self.mean.shape} and {self.std.shape}"
            )
        if np.any(self.std <= 0):
            raise ValueError("scaler std entries must be positive")

    @classmethod
    def identity(cls, n):
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, data):
        """Mean/std per channel; zero-variance channels get unit scale."""
        data = np.asarray(data, dtype=np.float64)
        std = data.std(axis=0)
        std[std == 0.0] = 1.0
        return cls(data.mean(axis=0), std)

    @property
    def is_identity(self):
        return bool(np.all(self.mean == 0.0) and np.all(self.std == 1.0))

    def scale(self, v):
        """Physical Variable -> standardized Variable."""
        shifted = ad.subtract(v, ad.constant(self.mean))
        return ad.multiply(shifted, ad.constant(1.0 / self.std))

    def unscale(self, v):
        """Standardized Variable -> physical Variable (full affine)."""
        stretched = ad.multiply(v, ad.constant(self.std))
        return ad.add(stretched, ad.constant(self.mean))

    def unscale_sigma(self, v):
        """Std factor only: maps a standardized increment to physical units."""
        return ad.multiply(v, ad.constant(self.std))

    def scale_np(self, arr):
        return (np.asarray(arr, dtype=np.float64) - self.mean) / self.std

    def unscale_np(self, arr):
        return np.asarray(arr, dtype=np.float64) * self.std + self.mean


@dataclass
class LinearApprox:
    """Known linear system matrices used by the residual variant."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        n_x = self.a.shape[0]
        if self.a.shape != (n_x, n_x):
            raise ValueError(f"A must be square, got {self.a.shape}")
        if self.b.ndim != 2 or self.b.shape[0] != n_x:
            raise ValueError(f"B must be {n_x}xn_u, got {self.b.shape}")
        if self.c.ndim != 2 or self.c.shape[1] != n_x:
            raise ValueError(f"C must be n_yx{n_x}, got {self.c.shape}")


class StateSpaceStructure:
    """State update x+ = f(x, u) with a variant-specific output map.

    nn_x is a single network for all variants except mechanical, where it
    is a tuple with one single-output acceleration network per velocity
    channel.  nn_y is absent for the fully-observed and mechanical
    variants (their output maps are fixed selections).
    """

    def __init__(self, variant, n_x, n_u, n_y, nn_x, nn_y=None, linear=None,
                 ts=None, scaler_x=None, scaler_u=None, scaler_y=None):
        if variant not in SS_VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {SS_VARIANTS}")
        self.variant = variant
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.n_y = int(n_y)
        self.nn_x = nn_x
        self.nn_y = nn_y
        self.linear = linear
        self.ts = None if ts is None else float(ts)
        self.scaler_x = scaler_x or Scaler.identity(self.n_x)
        self.scaler_u = scaler_u or Scaler.identity(self.n_u)
        self.scaler_y = scaler_y or Scaler.identity(self.n_y)
        self._validate()

    def _validate(self):
        v = self.variant
        if v == "fully-observed":
            if self.n_y != self.n_x:
                raise ValueError(
                    f"fully-observed requires n_y == n_x, got {self.n_y} != {self.n_x}"
                )
            if self.nn_y is not None:
                raise ValueError("fully-observed has a fixed identity output map")
        if v == "residual" and self.linear is None:
            raise ValueError("residual variant requires linear system matrices")
        if v == "mechanical":
            if self.n_x % 2 != 0:
                raise ValueError(f"mechanical requires even n_x, got {self.n_x}")
            if self.ts is None or self.ts <= 0:
                raise ValueError("mechanical requires a positive sample time ts")
            if self.nn_y is not None:
                raise ValueError("mechanical output is a fixed position selection")
            nets = self.nn_x
            if not isinstance(nets, (tuple, list)) or len(nets) != self.n_x // 2:
                raise ValueError(
                    f"mechanical needs one acceleration network per velocity "
                    f"({self.n_x // 2}), got {nets!r}"
                )
            if self.n_y != self.n_x // 2:
                raise ValueError(
                    f"mechanical outputs the positions: n_y must be {self.n_x // 2}"
                )
        if v in ("general", "integral", "residual") and self.nn_y is None:
            raise ValueError(f"{v} variant requires an output network")

    def parameters(self):
        """All trainable network Variables."""
        params = []
        if self.variant == "mechanical":
            for net in self.nn_x:
                params.extend(net.parameters())
        else:
            params.extend(self.nn_x.parameters())
        if self.nn_y is not None:
            params.extend(self.nn_y.parameters())
        return params

    @property
    def supports_one_step(self):
        return self.variant == "fully-observed"


class IOStructure:
    """Output predicted from lagged outputs and inputs through one network."""

    def __init__(self, n_y, n_u, n_a, n_b, nn, scaler_u=None, scaler_y=None):
        self.n_y = int(n_y)
        self.n_u = int(n_u)
        self.n_a = int(n_a)
        self.n_b = int(n_b)
        if self.n_a < 1 or self.n_b < 1:
            raise ValueError(f"lags must be positive, got n_a={n_a}, n_b={n_b}")
        self.nn = nn
        expect = self.regressor_width
        if nn.spec.n_in != expect or nn.spec.n_out != self.n_y:
            raise ValueError(
                f"network must map {expect} -> {self.n_y}, got "
                f"{nn.spec.n_in} -> {nn.spec.n_out}"
            )
        self.scaler_u = scaler_u or Scaler.identity(self.n_u)
        self.scaler_y = scaler_y or Scaler.identity(self.n_y)

    @property
    def regressor_width(self):
        return self.n_a * self.n_y + self.n_b * self.n_u

    @property
    def min_history(self):
        return max(self.n_a, self.n_b)

    def parameters(self):
        return self.nn.parameters()

    @property
    def supports_one_step(self):
        return True


def build_state_space(variant, n_x, n_u, n_y=None, hidden=64, activation="relu",
                      seed=0, linear=None, ts=None):
    """Construct a state-space structure with freshly initialized networks."""
    if variant == "fully-observed":
        n_y = n_x
    elif variant == "mechanical":
        n_y = n_x // 2
    elif n_y is None:
        raise ValueError(f"{variant} variant needs an explicit n_y")
    if variant == "mechanical":
        if n_x % 2 != 0:
            raise ValueError(f"mechanical requires even n_x, got {n_x}")
        nn_x = tuple(
            mlp_init(MLPSpec((n_x + n_u, hidden, 1), activation), seed + i)
            for i in range(n_x // 2)
        )
        return StateSpaceStructure(variant, n_x, n_u, n_y, nn_x, ts=ts)
    nn_x = mlp_init(MLPSpec((n_x + n_u, hidden, n_x), activation), seed)
    if variant == "fully-observed":
        return StateSpaceStructure(variant, n_x, n_u, n_y, nn_x)
    if variant == "general":
        nn_y = mlp_init(MLPSpec((n_x, hidden, n_y), activation), seed + 1)
    else:  # residual and integral output nets see (x, u)
        nn_y = mlp_init(MLPSpec((n_x + n_u, hidden, n_y), activation), seed + 1)
    return StateSpaceStructure(variant, n_x, n_u, n_y, nn_x, nn_y=nn_y, linear=linear)


def build_io(n_y, n_u, n_a, n_b, hidden=64, activation="relu", seed=0):
    """Construct a lagged input/output structure with a fresh network."""
    width = n_a * n_y + n_b * n_u
    nn = mlp_init(MLPSpec((width, hidden, n_y), activation), seed)
    return IOStructure(n_y, n_u, n_a, n_b, nn)


def _check_xu(model, x, u):
    if x.value.shape[-1] != model.n_x:
        raise ValueError(
            f"state last axis {x.value.shape} does not match n_x={model.n_x}"
        )
    if u.value.shape[-1] != model.n_u:
        raise ValueError(
            f"input last axis {u.value.shape} does not match n_u={model.n_u}"
        )
    if x.value.shape[:-1] != u.value.shape[:-1]:
        raise ValueError(
            f"state and input batch axes differ: {x.value.shape} vs {u.value.shape}"
        )


def _scaled_xu(model, x, u):
    return ad.concat([model.scaler_x.scale(x), model.scaler_u.scale(u)])


def _linear_map(mat, v):
    return ad.matmul(v, ad.constant(mat.T))


def ss_step(model, x, u):
    """Advance the state one sample; physical units in and out."""
    _check_xu(model, x, u)
    v = model.variant
    if v in ("general", "fully-observed"):
        nn_out = mlp_forward(model.nn_x, _scaled_xu(model, x, u))
        return model.scaler_x.unscale(nn_out)
    if v == "integral":
        nn_out = mlp_forward(model.nn_x, _scaled_xu(model, x, u))
        return ad.add(x, model.scaler_x.unscale_sigma(nn_out))
    if v == "residual":
        lin = ad.add(_linear_map(model.linear.a, x), _linear_map(model.linear.b, u))
        nn_out = mlp_forward(model.nn_x, _scaled_xu(model, x, u))
        return ad.add(lin, model.scaler_x.unscale_sigma(nn_out))
    # mechanical: positions advance by ts*velocity, velocities by ts*acceleration
    xu = _scaled_xu(model, x, u)
    vel_std = model.scaler_x.std[1::2]
    parts = []
    for i, net in enumerate(model.nn_x):
        pos = ad.slice_last(x, 2 * i, 2 * i + 1)
        vel = ad.slice_last(x, 2 * i + 1, 2 * i + 2)
        acc = ad.scalar_multiply(mlp_forward(net, xu), vel_std[i])
        parts.append(ad.add(pos, ad.scalar_multiply(vel, model.ts)))
        parts.append(ad.add(vel, ad.scalar_multiply(acc, model.ts)))
    return ad.concat(parts)


def ss_output(model, x, u):
    """Evaluate the measured output for the current state; physical units."""
    _check_xu(model, x, u)
    v = model.variant
    if v == "fully-observed":
        return x
    if v == "mechanical":
        # fixed selection of the position channels
        sel = np.zeros((model.n_x, model.n_y))
        sel[2 * np.arange(model.n_y), np.arange(model.n_y)] = 1.0
        return ad.matmul(x, ad.constant(sel))
    if v == "general":
        nn_out = mlp_forward(model.nn_y, model.scaler_x.scale(x))
        return model.scaler_y.unscale(nn_out)
    if v == "integral":
        nn_out = mlp_forward(model.nn_y, _scaled_xu(model, x, u))
        return model.scaler_y.unscale(nn_out)
    # residual: known linear output plus a scaled correction
    lin = _linear_map(model.linear.c, x)
    nn_out = mlp_forward(model.nn_y, _scaled_xu(model, x, u))
    return ad.add(lin, model.scaler_y.unscale_sigma(nn_out))


def io_init_regressor(y_source, u_source, k, n_a, n_b):
    """Lag vector [y[k-1]..y[k-n_a], u[k-1]..u[k-n_b]] as a flat array.

    y_source may be the measured outputs or a running estimate; both are
    plain arrays here (differentiable construction happens in training).
    """
    y_source = np.asarray(y_source, dtype=np.float64)
    u_source = np.asarray(u_source, dtype=np.float64)
    if y_source.ndim != 2 or u_source.ndim != 2:
        raise ValueError("y_source and u_source must be 2-D (time, channel)")
    if k < max(n_a, n_b):
        raise ValueError(
            f"insufficient history: k={k} needs at least max(n_a, n_b)="
            f"{max(n_a, n_b)} earlier samples"
        )
    y_lags = [y_source[k - lag] for lag in range(1, n_a + 1)]
    u_lags = [u_source[k - lag] for lag in range(1, n_b + 1)]
    return np.concatenate(y_lags + u_lags)


def io_shift(model, x, y_new, u_new):
    """Push the newest output/input into the lag vector, dropping the oldest.

    Works on Variables with arbitrary leading batch axes; gradient flows
    through the retained lags and the new samples.
    """
    n_y, n_u, n_a, n_b = model.n_y, model.n_u, model.n_a, model.n_b
    if x.value.shape[-1] != model.regressor_width:
        raise ValueError(
            f"regressor width {x.value.shape[-1]} != expected {model.regressor_width}"
        )
    if y_new.value.shape[-1] != n_y or u_new.value.shape[-1] != n_u:
        raise ValueError(
            f"sample widths {y_new.value.shape[-1]}/{u_new.value.shape[-1]} do not "
            f"match n_y={n_y}/n_u={n_u}"
        )
    parts = [y_new]
    if n_a > 1:
        parts.append(ad.slice_last(x, 0, (n_a - 1) * n_y))
    parts.append(u_new)
    if n_b > 1:
        parts.append(ad.slice_last(x, n_a * n_y, n_a * n_y + (n_b - 1) * n_u))
    return ad.concat(parts)


def io_output(model, x):
    """Network output for a (batch of) lag vectors; physical units."""
    if x.value.shape[-1] != model.regressor_width:
        raise ValueError(
            f"regressor width {x.value.shape[-1]} != expected {model.regressor_width}"
        )
    scaled = _scale_regressor(model, x)
    return model.scaler_y.unscale(mlp_forward(model.nn, scaled))


def _scale_regressor(model, x):
    """Standardize each lag block with its channel scaler."""
    if model.scaler_y.is_identity and model.scaler_u.is_identity:
        return x
    y_mean = np.tile(model.scaler_y.mean, model.n_a)
    y_std = np.tile(model.scaler_y.std, model.n_a)
    u_mean = np.tile(model.scaler_u.mean, model.n_b)
    u_std = np.tile(model.scaler_u.std, model.n_b)
    mean = np.concatenate([y_mean, u_mean])
    std = np.concatenate([y_std, u_std])
    shifted = ad.subtract(x, ad.constant(mean))
    return ad.multiply(shifted, ad.constant(1.0 / std))
