"""IBRA-LIF spiking neural networks: integer-valued training, bit-plane lowering and energy accounting.

Modules
-------
tensor
    Dense tensors, reverse-mode differentiation and the custom-gradient hook.
neuron
    LIF, I-LIF and IBRA-LIF neurons plus input encoders.
network
    Layer graphs, temporal unrolling, training and presets.
lowering
    Accumulate-only inference graphs, bit-plane codecs and equivalence checks.
energy
    MAC/AC counting and energy pricing.
checkpoint, container
    On-disk formats.
"""
__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
