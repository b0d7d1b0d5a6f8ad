"""Numerical laboratory for two-dimensional harmonic map flow into sphere
targets: simulates the flow, verifies energy-splitting and stress-energy
identities, and measures blowup rates, neck decay, and bubble trees."""

__version__ = "0.1.0"
