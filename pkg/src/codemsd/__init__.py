"""Multimodal sentiment detection with semantics completion and decomposition, at toy scale.

Everything runs on numpy: a small reverse-mode autodiff engine, attention
blocks, toy encoders, the shared/private decomposition with its losses, a
synthetic data generator and the training harness.
"""

__version__ = "0.1.0"
