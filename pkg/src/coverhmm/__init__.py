"""Man/zone coverage prediction from pre-snap motion tracking data."""
__version__ = "0.1.0"
