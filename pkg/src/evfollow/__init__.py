"""Car-following model calibration, simulation and random-forest baselines."""

__version__ = "0.1.0"
