"""Leaky integrate-and-fire neurons: LIF, integer LIF and range-aligned IBRA-LIF.

All three share the charge step ``v_pre = alpha * v + I`` and a soft reset
``v = v_pre - O``.  They differ in how ``O`` is produced from ``v_pre``:

* LIF emits ``1`` when ``v_pre >= v_th``.
* I-LIF emits ``clip(round(v_pre), 0, D)``.
* IBRA-LIF emits ``clip(round(v_pre * N), 0, D_N) / N`` with ``D_N = D * N``.

I-LIF is IBRA-LIF with ``N = 1``; both train through a boxcar surrogate
gradient that is 1 for ``0 <= v_pre <= D`` and 0 elsewhere.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LIF = "LIF"
ILIF = "I-LIF"
IBRA = "IBRA-LIF"
KINDS = (LIF, ILIF, IBRA)


@dataclass(frozen=True)
class NeuronConfig:
    kind: str = IBRA
    alpha: float = 1.0
    v_th: float = 1.0
    D: float = 5.11
    N: int = 1
    T: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown neuron kind {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        if self.kind != IBRA and self.N != 1:
            raise ValueError(f"{self.kind} requires N = 1")
        if self.kind == ILIF and float(self.D) != round(self.D):
            raise ValueError(f"I-LIF needs an integer D, got {self.D}")
        if self.kind != LIF and self.d_n < 1:
            raise ValueError(f"D * N must round to a positive integer, got D={self.D}, N={self.N}")

    @classmethod
    def lif(cls, alpha=0.5, v_th=1.0, T=4):
        return cls(kind=LIF, alpha=alpha, v_th=v_th, D=1.0, N=1, T=T)

    @classmethod
    def ilif(cls, D=4, alpha=1.0, T=1):
        return cls(kind=ILIF, alpha=alpha, D=float(D), N=1, T=T)

    @classmethod
    def ibra(cls, D=5.11, N=100, alpha=1.0, T=1):
        return cls(kind=IBRA, alpha=alpha, D=float(D), N=int(N), T=T)

    @property
    def d_n(self) -> int:
        """Integer ceiling of the scaled neuron, ``round(D * N)``."""
        if self.kind == LIF:
            return 1
        return int(round(self.D * self.N))

    @property
    def nbits(self) -> int:
        """Bit-planes needed for values 0..D_N, ``ceil(log2(D_N + 1))``."""
        return max(1, self.d_n.bit_length())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NeuronConfig":
        return cls(**d)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def fire_codes(v_pre: np.ndarray, cfg: NeuronConfig) -> np.ndarray:
    """Integer emission of one step: ``O * N`` for I-LIF/IBRA-LIF, the 0/1 spike for LIF."""
    if cfg.kind == LIF:
        return (v_pre >= cfg.v_th).astype(np.int32)
    scaled = v_pre * v_pre.dtype.type(cfg.N)
    return np.clip(round_half_away(scaled), 0, cfg.d_n).astype(np.int32)


def codes_to_value(codes: np.ndarray, cfg: NeuronConfig, dtype) -> np.ndarray:
    dtype = np.dtype(dtype)
    if cfg.kind == LIF or cfg.N == 1:
        return codes.astype(dtype)
    return codes.astype(dtype) / dtype.type(cfg.N)


def surrogate_window(v_pre: np.ndarray, cfg: NeuronConfig) -> np.ndarray:
    """Straight-through window: 1 where the pre-activation is inside the emitting range."""
    if cfg.kind == LIF:
        return (np.abs(v_pre - cfg.v_th) <= 0.5).astype(v_pre.dtype)
    return ((v_pre >= 0) & (v_pre <= cfg.D)).astype(v_pre.dtype)


@dataclass
class NeuronState:
    """Post-reset membrane potential; ``None`` means zero (start of a sample)."""

    v: Tensor | None = None


def _charge(state: NeuronState | None, x: Tensor, cfg: NeuronConfig) -> Tensor:
    if state is None or state.v is None:
        return x
    if cfg.alpha == 1.0:
        return T.add(state.v, x)
    return T.add(T.scale(state.v, cfg.alpha), x)


def _fire_and_reset(v_pre: Tensor, cfg: NeuronConfig):
    dt = v_pre.data.dtype
    out = T.custom_grad_apply(
        v_pre,
        lambda a: codes_to_value(fire_codes(a, cfg), cfg, dt),
        lambda a: surrogate_window(a, cfg),
    )
    return out, NeuronState(T.sub(v_pre, out))


def lif_step(state: NeuronState | None, x: Tensor, cfg: NeuronConfig):
    if cfg.kind != LIF:
        raise ValueError(f"lif_step needs a LIF config, got {cfg.kind}")
    return _fire_and_reset(_charge(state, x, cfg), cfg)


def ilif_step(state: NeuronState | None, x: Tensor, cfg: NeuronConfig):
    if cfg.kind != ILIF:
        raise ValueError(f"ilif_step needs an I-LIF config, got {cfg.kind}")
    return _fire_and_reset(_charge(state, x, cfg), cfg)


def ibra_step(state: NeuronState | None, x: Tensor, cfg: NeuronConfig):
    if cfg.kind != IBRA:
        raise ValueError(f"ibra_step needs an IBRA-LIF config, got {cfg.kind}")
    return _fire_and_reset(_charge(state, x, cfg), cfg)


_STEPS = {LIF: lif_step, ILIF: ilif_step, IBRA: ibra_step}


def step(state: NeuronState | None, x: Tensor, cfg: NeuronConfig):
    """Advance one timestep; returns ``(activation, new_state)``."""
    return _STEPS[cfg.kind](state, x, cfg)


def encode_direct(image: Tensor, T_steps: int) -> list[Tensor]:
    """Repeat the (real-valued) image for every timestep."""
    if T_steps < 1:
        raise ValueError("T must be at least 1")
    return [image] * T_steps


def encode_spike_first_layer(image: Tensor, cfg: NeuronConfig) -> list[Tensor]:
    """Drive a neuron layer with the image as constant current for ``cfg.T`` steps."""
    state = None
    outs = []
    for _ in range(cfg.T):
        o, state = step(state, image, cfg)
        outs.append(o)
    return outs


def bits_for(d_n: int) -> int:
    return max(1, math.ceil(math.log2(d_n + 1)))
