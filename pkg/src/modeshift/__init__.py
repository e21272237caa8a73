"""Mode-choice modelling and counterfactual impact simulation for urban trips."""
from pathlib import Path

from .core import (BASELINE, FOUR_MODES, NO_SFHV, TLC_MODES, DemandCell, Mode, ModeAttributes,
                   Scenario, WageGroup, Zone, apply_scenario, generalized_cost,
                   surcharge_scenario)
from .simulator import REFERENCE_PARAMS, SimParams

__version__ = "0.1.0"

# synthetic fixture and the surrogate trained by `train-surrogate --seed 0`
SHIPPED_FIXTURE = Path(__file__).parent / "shipped" / "fixture"
SHIPPED_MODEL = Path(__file__).parent / "shipped" / "surrogate.bin"

__all__ = [
    "BASELINE", "FOUR_MODES", "NO_SFHV", "TLC_MODES", "DemandCell", "Mode", "ModeAttributes",
    "Scenario", "WageGroup", "Zone", "apply_scenario", "generalized_cost", "surcharge_scenario",
    "REFERENCE_PARAMS", "SHIPPED_FIXTURE", "SHIPPED_MODEL", "SimParams", "__version__",
]
