"""Heat-kernel embeddings with conformal defect control.

Builds truncated normalized heat-kernel embeddings of compact testbed
manifolds from their Laplace spectra, measures and corrects the conformal
defect of the pullback metric, and perturbs almost-conformal embeddings to
exactly conformal immersions by a contraction fixed point.
"""

from .analysis import NormEstimate, OrderFit, fit_order, holder_norm, scaling_diagnostics
from .embedding import (CorrectionSpec, EmbeddingMap, PullbackReport, TruncationPolicy,
                        build_embedding, conformal_defect, corrected_model, defect_scan,
                        h1_solve, pullback_metric, tail_bound_check)
from .errors import (ConfigError, ConvergenceError, DomainError, HeatconfError,
                     PreconditionError, SpectrumError)
from .geometry import ManifoldModel, MetricAtPoint, SampleGrid, a1_tensor, metric_at, \
    orthonormal_frame, sample_grid
from .jets import (JetMatrixP, JetMatrixPc, RhsVector, apply_E, apply_Ec, assemble_P,
                   assemble_Pc, block_inverse, gram, kernel_generator, xi_inverse,
                   xi_matrix)
from .perturb import (ConformalResult, ConformalSolver, FieldRq, IterationState,
                      ResolventConfig, SpectralGrid, assemble_C, compute_Lij,
                      compute_r_terms, fixed_point_solve, resolvent_apply,
                      verify_conformal)
from .spectrum import (EigenPair, JetEvaluation, SpectrumProvider, analytic_spectrum,
                       enumerate_eigenpairs, load_external_spectrum, rescaled_provider,
                       save_spectrum)

__version__ = "0.1.0"
