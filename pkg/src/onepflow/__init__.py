"""Solver and verification tools for the parabolic (1,p)-Laplace system."""
from .errors import *  # noqa: F401,F403
from .model import (CoefficientModel, ExponentReport, ForcingTerm, Parameters, PowerProfile,
                    SamplingPlan, TableProfile, constant_forcing, critical_exponents,
                    exponent_report, make_model, validate_exponents, validate_structure)
from .grid import Mesh, VectorField, GradientField, build_mesh, element_gradient
from .solver import Scenario, SolverConfig, implicit_step, run, steady_state

__version__ = "0.1.0"
