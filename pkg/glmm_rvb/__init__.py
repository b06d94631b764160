"""Reparametrized variational Bayes for two-level generalized linear mixed models."""

from __future__ import annotations

__version__ = "0.3.0"
