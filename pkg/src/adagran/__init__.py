"""Adaptive temporal granularity for sparse three-mode tensors."""
