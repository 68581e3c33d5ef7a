"""Probabilistic physics-aware surrogates for parametric elliptic PDEs.

Training never solves the reference PDE: randomly subsampled weighted
residuals act as virtual observations of zero, and a differentiable
coarse-grained finite-element solver sits inside the surrogate's mean map.
A multiscale variant adds per-atom fine-scale fluctuations in the
orthogonal complement of the coarse subspace.
"""

from .config import Config, load_config, parse_config, preset_config
from .errors import (ArchitectureError, ConfigError, DomainError, MeshError,
                     NonConvergenceError, NumericalError, PanisError)
from .evaluation import (EvalReport, PredictionBands, ValidationSet,
                         band_coverage, evaluate_state, gen_validation,
                         predict, r_squared, rel_l2, sweep)
from .fem import (ConstitutiveLaw, CoarseModel, CoarseSolution, TriMesh,
                  adjoint_gradient, assemble, solve_linear, solve_newton)
from .microstructure import (FieldSample, KernelSpec, KleBasis,
                             MicrostructureSpec, build_kle_basis, sample_field,
                             threshold_for_vf)
from .network import Architecture, backward, forward, init_xavier, mpanis_cnn, panis_cnn
from .pipeline import (BoundaryCondition, Problem, build_problem, init_state,
                       load_checkpoint, make_train_settings, save_checkpoint,
                       solve_reference)
from .projection import (ProjectionOperators, build_projection, coarse_project,
                         ortho_complement)
from .residuals import (QuadratureGrid, ResidualEngine, TrialBasis, WeightBank,
                        subsample_residuals, trial_space_galerkin)
from .surrogate import (Atom, PosteriorSample, SurrogateState, log_entropy,
                        mean_solve, sample_posterior)
from .training import (Adam, ElboTrace, TemperSchedule, TrainResult,
                       TrainSettings, elbo_and_grads, gradient_check,
                       temper_alpha, train)

__version__ = "0.1.0"
