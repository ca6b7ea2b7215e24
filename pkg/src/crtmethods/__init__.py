"""Estimators and simulation tools for cluster randomized trials."""
