"""Shape optimization of an obstacle in time-dependent incompressible flow.

Pipeline: forward Navier-Stokes solve on a triangulated annulus, continuous
adjoint solve backward in time, boundary shape gradient assembly, H1
smoothing into a descent field, and gradient-descent mesh morphing.
"""

from .adjoint import TRACKING, VORTICITY, TargetField, solve_adjoint
from .benchmark import (ALPHA_SWEEP, BenchmarkReport, BenchmarkSpec,
                        radial_deviation, run_benchmark)
from .errors import (ConfigError, MeshError, MorphExhaustedError,
                     NonlinearDivergenceError, NsShapeError,
                     ReversedTriangleError, SingularMatrixError,
                     VerificationError)
from .fem import TaylorHoodSpace
from .forward import ProblemConfig, StateTrajectory, solve_forward
from .gradient import (BoundaryGradient, assemble_gradient,
                       eulerian_derivative, evaluate_J1, evaluate_J2)
from .mesh import (BoundaryNormalField, BoundaryTag, TriMesh, circle_boundary,
                   compute_normals, ellipse_boundary, generate_annulus_mesh,
                   generate_square_mesh, load_mesh, min_quality, morph,
                   save_mesh, warp_to_circle)
from .optimize import (DescentField, IterationRecord, StepController, run,
                       smooth_gradient)
from .verify import (compare_gradient, fd_eulerian_derivative,
                     manufactured_convergence, run_battery, standard_probes)

__version__ = "0.1.0"
