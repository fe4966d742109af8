"""Numerical laboratory for small-noise stochastic reaction-diffusion systems.

Layers, bottom to top: spatial domain and sine eigenbasis (`domain`),
coefficient specifications with assumption validators (`coefficients`), the
deterministic monotone solution map (`fixed_point`), mild-solution and
controlled simulation (`dynamics`), action/rate evaluation and instantons
(`rate`), Monte Carlo experiments (`lab`), and scenario files plus the CLI
(`scenario`, `cli`, `reporting`).
"""

from .coefficients import (CheckResult, DiffusionSpec, DriftSpec, NoiseSpec,
                           SamplePlan, ValidationReport, admissible_nu,
                           coefficient_preset, validate_diffusion,
                           validate_drift, validate_noise)
from .domain import (Basis, DomainSpec, Field, OperatorSpec, PathField,
                     path_distance, semigroup_apply, sup_norm, sup_norm_path,
                     to_grid, to_spectral)
from .dynamics import (BlowupError, ControlPath, Engine, NoiseIncrements,
                       SimParams, convolution_moment_probe,
                       resolve_factorization_exponents, sample_increments,
                       simulate, simulate_controlled, skeleton,
                       stochastic_convolution)
from .fixed_point import (FixedPointParams, UniformBoundTable, bump_profile,
                          lipschitz_probe, m_apply, m_x_apply,
                          random_path_pairs, resolvent_solve,
                          uniform_bound_probe, yosida_drift)
from .lab import (Estimate, ExceedanceEvent, ExitConfig, ExitReport,
                  SweepCell, SweepConfig, TerminalModeEvent, TubeEvent,
                  band_limited_directions, exit_time_sample, is_probability,
                  ldp_curve, mc_event_probability, sampled_controls,
                  uniformity_sweep)
from .rate import (InstantonProblem, RateResult, adjoint_gradient_check,
                   instanton_minimize, level_membership, rate_evaluate)
from .scenario import (ScenarioConfig, ScenarioError, build_control,
                       build_field, load_scenario, parse_scenario,
                       preset_path, validate_scenario)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
