"""Longitudinal outcome-adaptive LASSO and fused LASSO for marginal structural models."""

__version__ = "0.1.0"
