"""Monte Carlo toolkit for randomly biased walks on branching-random-walk environments."""
from .law import (INFINITE, KappaResult, LawError, NoRootBracket, ReproductionLaw, check_law,
                  dpsi, load_reference, psi, psi_exact, solve_kappa, validate_law)

__all__ = [
    "INFINITE", "KappaResult", "LawError", "NoRootBracket", "ReproductionLaw", "check_law",
    "dpsi", "load_reference", "psi", "psi_exact", "solve_kappa", "validate_law",
]
__version__ = "0.1.0"
