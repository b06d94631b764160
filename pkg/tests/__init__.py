"""Tests for glmm_rvb."""
