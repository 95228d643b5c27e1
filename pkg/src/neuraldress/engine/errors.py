from __future__ import annotations


class NeuralDressError(Exception):
    """Root of every error raised deliberately by the engine."""


class ParameterError(NeuralDressError, ValueError):
    """Bad argument values: dimension mismatches, degenerate cameras, infeasible configs."""


class StructuralError(NeuralDressError):
    """The mesh or skeleton itself is unusable (e.g. disconnected graph)."""


class ConfigurationError(NeuralDressError):
    """Components were assembled with incompatible settings."""


class DataError(NeuralDressError):
    """Dataset content is missing or malformed."""
