"""Synthetic twin experiments for river flood forecasting.

A desk-scale chain: structured-grid shallow-water model, synthetic
catchment and flood event, gauge and wet-surface-ratio observations,
and a cycled stochastic ensemble Kalman filter estimating friction,
inflow and floodplain state corrections against a known truth run.
"""

__version__ = "0.1.0"
