"""Numerical Bohmian mechanics with perception-measure bookkeeping."""

__version__ = "0.1.0"

from .configspace import (EvolutionConfig, Grid, Potential, PsiSource, Wavefunction, density, evolve,
                          make_state)
from .ensemble import (Ensemble, EquivarianceReport, InitialDensity, equivariance_test, evolve_ensemble,
                       sample_initial, select_max_density_trajectory)
from .inference import TheoryComparison, TypicalityReport, compare_theories, typicality, \
    typicality_agreement_experiment
from .perception import (GCBM, SBM, SCBM, SQM, Perception, PerceptionSet, Region, build_perception_family,
                         sbm_measure_density, scbm_measure_density, set_measure, sqm_measure_density)
from .pilotwave import (NodePolicy, Trajectory, VelocityField, integrate_trajectory, path_density_integral,
                        velocity_field)

__all__ = [
    "EvolutionConfig", "Grid", "Potential", "PsiSource", "Wavefunction", "density", "evolve", "make_state",
    "Ensemble", "EquivarianceReport", "InitialDensity", "equivariance_test", "evolve_ensemble", "sample_initial",
    "select_max_density_trajectory",
    "TheoryComparison", "TypicalityReport", "compare_theories", "typicality", "typicality_agreement_experiment",
    "GCBM", "SBM", "SCBM", "SQM", "Perception", "PerceptionSet", "Region", "build_perception_family",
    "sbm_measure_density", "scbm_measure_density", "set_measure", "sqm_measure_density",
    "NodePolicy", "Trajectory", "VelocityField", "integrate_trajectory", "path_density_integral", "velocity_field",
]
