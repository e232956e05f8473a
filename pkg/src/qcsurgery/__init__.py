"""Quasiconformal surgery on rational maps: build a quasiregular perturbation, straighten it, count escapes."""
from .rational import RationalMap, Polynomial, critical_points, escape_census, green_function
from .curves import JordanCurve, lift_curve, pullback_components, assumption_g_search
from .moduli import AnnulusRegion, grid_modulus, largest_embedded_round_annulus
from .surgery import build_blend, build_quasiregular, invariant_beltrami, verify_invariance, SurgeryConfig
from .beltrami import solve_mrmt, straighten, BeltramiField, GridSpec
from .harness import run_instability_experiment, detect_conical, find_misiurewicz_cubic, ExperimentConfig

__version__ = "0.1.0"
