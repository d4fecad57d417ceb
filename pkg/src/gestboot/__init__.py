"""Gesture-bootstrapped hand segmentation.

A short calibration gesture is turned into motion cues (TV-L1 flow and
a Bayesian background model). A person-agnostic gesture network segments
the moving hands with Monte-Carlo dropout uncertainty. Its outputs become
precision-weighted pseudo-labels for a person-specific appearance network
that segments hands from RGB alone.
"""
from .errors import ConfigError, FormatError, GestbootError, InvalidInputError, ScheduleExhaustedError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "GestbootError", "InvalidInputError",
           "ScheduleExhaustedError", "__version__"]
