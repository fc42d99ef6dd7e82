"""Barriers, nested-domain solver and checks for the evolutionary p-Laplace
equation with a moving gradient singularity."""

from .params import (BarrierParams, ConstraintViolation, ExponentConfig, ExponentViolation,
                     SearchOptions, TuneFailure, derive_structural, min_K, tune_constants,
                     validate_exponents)
from .barriers import SampleGrid, certify, residual_sub, residual_super, sub_value, super_value
from .curve import Trajectory, admissible
from .solver import AnnulusGrid, Field, StepperOptions, nested_run, solve_on_annulus

__all__ = [
    "ExponentConfig", "BarrierParams", "SearchOptions", "ExponentViolation",
    "ConstraintViolation", "TuneFailure", "validate_exponents", "min_K",
    "derive_structural", "tune_constants", "SampleGrid", "certify", "residual_super",
    "residual_sub", "super_value", "sub_value", "Trajectory", "admissible", "AnnulusGrid",
    "Field", "StepperOptions", "solve_on_annulus", "nested_run",
]
