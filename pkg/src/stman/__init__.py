"""Joint dialogue satisfaction and utterance sentiment with an adversarial
shared encoder, written on a small reverse-mode autodiff engine."""

__version__ = "0.1.0"
