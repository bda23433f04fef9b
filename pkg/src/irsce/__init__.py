"""Channel estimation for IRS-aided wideband mmWave links with unrolled AMP networks."""

__version__ = "0.1.0"
