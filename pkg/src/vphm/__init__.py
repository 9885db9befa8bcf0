"""Battery end-of-discharge voltage prognostics: reduced-order physics
simulation, probabilistic error correction, baselines, scoring and
health-state diagnostics."""

__version__ = "0.1.0"
