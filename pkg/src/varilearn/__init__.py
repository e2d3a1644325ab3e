"""Learning data and regularization weights for variational denoising."""

from .adjoint import AdjointState, reduced_gradient, solve_adjoint, tracking_cost
from .bilevel import (GridResult, LearnOptions, LearnResult, LineSearchError,
                      PairOracle, ProblemTemplate, SpatialLearnResult,
                      SpatialOptions, armijo_search, bfgs_update,
                      check_gradient, grid_search, learn, learn_spatial)
from .fidelity import (DomainError, FidelityKind, FidelityModel, GaussianNoise,
                       ImpulseNoise, PoissonNoise, parse_noise_spec,
                       synthesize_noise)
from .firstorder import PdhgResult, pdhg_denoise
from .grids import (Boundary, ImageGrid, TensorField, VectorField,
                    default_mesh_size, div_backward, grad_forward,
                    inner_image, inner_tensor, inner_vector, laplacian_5pt,
                    norm_image, norm_vector, sym_div, sym_grad)
from .imageio import ImageIOError, load_image, load_manifest, save_image
from .metrics import interior_condition, psnr, snr, ssim, tv_seminorm
from .problems import (Combine, DenoiseProblem, DenoiseResult, Linearization,
                       Positivity, RegKind, Regularizer, SolverError)
from .sampling import (DynamicLearnResult, SampleState, TrainingPair,
                       TrainingSet, augment_sample, batch_gradient,
                       dynamic_learn, stack_gradients, variance_test)
from .solvers import (gauss_poisson_problem, infconv_problem, solve,
                      solve_gauss_poisson, solve_ictv, solve_infconv_l1l2,
                      solve_poisson_penalty, solve_tgv2, solve_tv)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
