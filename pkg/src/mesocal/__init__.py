"""mesocal: trajectory-driven demand estimation and supply calibration for
mesoscopic traffic simulation."""

__version__ = "0.1.0"
