"""Multi-step heart-rate forecasting from inertial sensor streams."""

__version__ = "0.1.0"
