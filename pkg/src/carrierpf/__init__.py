"""Centimeter-level GNSS positioning without integer ambiguity resolution.

A Rao-Blackwellized particle filter over double-differenced carrier-phase
observations: position is estimated by a particle filter whose likelihood
comes from the ambiguity-function value, while each particle carries its
own velocity Kalman filter fed by NLOS-gated Doppler solutions. Includes
the conventional position-only particle filter baseline, a deterministic
urban-GNSS scenario simulator, and a benchmark harness.
"""

from .backend import backend_name, get_kernels, set_backend
from .filters import (
    FilterConfig,
    FilterEstimate,
    NoiseModel,
    Particle,
    ParticleSet,
    conventional_pf_step,
    init_particles,
    kf_measurement_update,
    kf_time_update,
    pf_correct,
    pf_predict,
    rbpf_step,
)
from .geo import EcefPosition, EnuVector, SatelliteGeometry
from .obs import (
    GPS_L1_WAVELENGTH_M,
    DdObservation,
    EpochObservation,
    VelocitySolution,
    afv,
    carrier_likelihood,
    dd_pseudorange_residual,
    doppler_velocity_ls,
    nlos_gate,
    particle_likelihood,
)
from .sim import ScenarioConfig, ScenarioTruth, generate_scenario, load_scenario, pseudorange_ls_fix, save_scenario

__version__ = "0.1.0"

__all__ = [
    "DdObservation",
    "EcefPosition",
    "EnuVector",
    "EpochObservation",
    "FilterConfig",
    "FilterEstimate",
    "GPS_L1_WAVELENGTH_M",
    "NoiseModel",
    "Particle",
    "ParticleSet",
    "SatelliteGeometry",
    "ScenarioConfig",
    "ScenarioTruth",
    "VelocitySolution",
    "afv",
    "backend_name",
    "carrier_likelihood",
    "conventional_pf_step",
    "dd_pseudorange_residual",
    "doppler_velocity_ls",
    "generate_scenario",
    "get_kernels",
    "init_particles",
    "kf_measurement_update",
    "kf_time_update",
    "load_scenario",
    "nlos_gate",
    "particle_likelihood",
    "pf_correct",
    "pf_predict",
    "pseudorange_ls_fix",
    "rbpf_step",
    "save_scenario",
    "set_backend",
]
