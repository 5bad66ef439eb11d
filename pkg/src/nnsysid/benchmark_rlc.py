"""Ground-truth data generation: a nonlinear series RLC circuit.

The circuit is driven by a band-limited voltage source and integrated
with classical fixed-step RK4.  The inductance saturates with current,
which is what makes the identification problem nonlinear: around zero
current it sits near 52 uH and collapses to 7.5 uH at high current.
States are the capacitor voltage v_C and inductor current i_L; the input
is the source voltage v_in.  Measurements add independent Gaussian noise
per channel on top of the noise-free outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, lfilter


@dataclass(frozen=True)
class RLCParams:
    """Circuit constants: resistance (ohm), capacitance (F), nominal inductance (H)."""

    r: float = 3.0
    c: float = 270e-9
    l0: float = 50e-6

    def __post_init__(self):
        if self.r <= 0 or self.c <= 0 or self.l0 <= 0:
            raise ValueError(f"circuit parameters must be positive: {self}")


@dataclass(frozen=True)
class GenConfig:
    """Generation recipe: sampling, input synthesis, and measurement noise."""

    ts: float = 0.5e-6
    n: int = 4000
    bandwidth: float = 150e3
    input_std: float = 80.0
    noise_std: tuple = (0.0, 0.0)
    outputs: str = "vc_il"  # or "vc"
    seed: int = 0

    def __post_init__(self):
        if self.ts <= 0:
            raise ValueError(f"ts must be positive, got {self.ts}")
        if self.n < 2:
            raise ValueError(f"n must be at least 2, got {self.n}")
        if self.bandwidth >= 0.5 / self.ts:
            raise ValueError(
                f"bandwidth {self.bandwidth} Hz is not below the "
                f"{0.5 / self.ts:.4g} Hz sampling limit"
            )
        if self.outputs not in ("vc_il", "vc"):
            raise ValueError(f"outputs must be 'vc_il' or 'vc', got {self.outputs!r}")
        object.__setattr__(self, "noise_std", tuple(float(s) for s in self.noise_std))
        if len(self.noise_std) != self.n_y:
            raise ValueError(
                f"need {self.n_y} noise stds for outputs={self.outputs!r}, "
                f"got {self.noise_std}"
            )
        if any(s < 0 for s in self.noise_std):
            raise ValueError(f"noise stds must be non-negative, got {self.noise_std}")

    @property
    def n_y(self):
        return 2 if self.outputs == "vc_il" else 1


@dataclass
class Dataset:
    """Measured sequences: inputs u, outputs y, optional noise-free y_clean."""

    u: np.ndarray
    y: np.ndarray
    ts: float
    y_clean: np.ndarray = None
    input_names: tuple = ("u",)
    output_names: tuple = ("y",)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.y_clean is not None:
            self.y_clean = np.asarray(self.y_clean, dtype=np.float64)
            if self.y_clean.shape != self.y.shape:
                raise ValueError(
                    f"y_clean shape {self.y_clean.shape} != y shape {self.y.shape}"
                )
        if len(self.u) != len(self.y):
            raise ValueError(
                f"u and y lengths differ: {len(self.u)} vs {len(self.y)}"
            )

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def n_u(self):
        return self.u.shape[1]

    @property
    def n_y(self):
        return self.y.shape[1]

    @property
    def reference(self):
        """Noise-free outputs when present, else the measurements."""
        return self.y_clean if self.y_clean is not None else self.y


def inductance(i_l, params=RLCParams()):
    """Saturating inductance (H) as a function of current (A); even in i_l."""
    i_l = np.asarray(i_l, dtype=np.float64)
    return params.l0 * ((0.9 / np.pi) * np.arctan(-5.0 * (np.abs(i_l) - 5.0)) + 0.6)


def rlc_derivative(x, u, params=RLCParams()):
    """Time derivative [dv_C/dt, di_L/dt] of the circuit state."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v_c = x[..., 0]
    i_l = x[..., 1]
    v_in = u[..., 0] if u.ndim else u
    dv = i_l / params.c
    di = (-v_c - params.r * i_l + v_in) / inductance(i_l, params)
    return np.stack([dv, di], axis=-1)


def rk4_step(f, x, u, ts):
    """Classical 4th-order Runge-Kutta step with the input held constant."""
    if ts <= 0:
        raise ValueError(f"ts must be positive, got {ts}")
    x = np.asarray(x, dtype=np.float64)
    k1 = f(x, u)
    k2 = f(x + 0.5 * ts * k1, u)
    k3 = f(x + 0.5 * ts * k2, u)
    k4 = f(x + ts * k3, u)
    for name, k in (("k1", k1), ("k2", k2), ("k3", k3), ("k4", k4)):
        if not np.all(np.isfinite(k)):
            raise FloatingPointError(f"non-finite derivative at RK4 stage {name}")
    return x + (ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def gen_input(rng, n, ts, bandwidth, std):
    """Band-limited Gaussian input: white noise through a 2nd-order
    low-pass (cutoff = bandwidth), rescaled to the exact empirical std."""
    nyquist = 0.5 / ts
    if bandwidth >= nyquist:
        raise ValueError(
            f"bandwidth {bandwidth} Hz must be below the {nyquist:.4g} Hz limit"
        )
    white = rng.standard_normal(n)
    b, a = butter(2, bandwidth, fs=1.0 / ts)
    shaped = lfilter(b, a, white)
    return shaped * (std / shaped.std())


def simulate_circuit(u, ts, params=RLCParams(), x0=(0.0, 0.0)):
    """Integrate the circuit over an input sequence; returns the N x 2 state log."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    x = np.asarray(x0, dtype=np.float64)
    def f(state, v_in):
        return rlc_derivative(state, v_in, params)

    states = np.empty((u.shape[0], 2))
    for k in range(u.shape[0]):
        states[k] = x
        if k + 1 < u.shape[0]:
            x = rk4_step(f, x, u[k], ts)
    if np.abs(states).max() > 1e9 or not np.all(np.isfinite(states)):
        raise FloatingPointError("circuit simulation diverged")
    return states


def gen_dataset(config=GenConfig(), params=RLCParams()):
    """Generate one dataset: seeded input, RK4 rollout from rest, noisy outputs."""
    rng = np.random.default_rng(config.seed)
    u = gen_input(rng, config.n, config.ts, config.bandwidth, config.input_std)
    states = simulate_circuit(u, config.ts, params)
    if config.outputs == "vc_il":
        y_clean = states.copy()
        names = ("v_c", "i_l")
    else:
        y_clean = states[:, :1].copy()
        names = ("v_c",)
    noise = rng.standard_normal(y_clean.shape) * np.asarray(config.noise_std)
    return Dataset(
        u=u[:, None],
        y=y_clean + noise,
        y_clean=y_clean,
        ts=config.ts,
        input_names=("v_in",),
        output_names=names,
    )


def measure_snr(dataset):
    """Per-channel SNR (dB) between noise-free signal power and noise power."""
    if dataset.y_clean is None:
        raise ValueError("SNR needs the noise-free outputs")
    noise = dataset.y - dataset.y_clean
    noise_power = np.mean(noise**2, axis=0)
    signal_power = np.var(dataset.y_clean, axis=0)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(signal_power / noise_power)
