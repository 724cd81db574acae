"""Pilot-conditioned channel diffusion plus a decision-transformer policy for IRS phase control."""

__version__ = "0.1.0"
