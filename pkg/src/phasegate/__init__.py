"""Single-intersection traffic signal control with a phase-gated deep Q-network."""

__version__ = "0.1.0"
