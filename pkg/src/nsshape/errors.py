"""Exception types shared across the package."""


class NsShapeError(Exception):
    """Base class for all package errors."""


class MeshError(NsShapeError):
    """Invalid mesh: bad connectivity, bad tags, degenerate geometry, or a
    malformed mesh file."""


class ReversedTriangleError(MeshError):
    """A morph step flipped at least one triangle (signed area <= 0)."""

    def __init__(self, triangle: int, area: float):
        self.triangle = int(triangle)
        self.area = float(area)
        super().__init__(
            f"morph reversed triangle {triangle} (signed area {area:.3e})"
        )


class NonlinearDivergenceError(NsShapeError):
    """The nonlinear iteration at a time level failed to reach tolerance."""

    def __init__(self, level: int, residual: float, iterations: int):
        self.level = int(level)
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(
            f"nonlinear solve at time level {level} stalled at residual "
            f"{residual:.3e} after {iterations} iterations"
        )


class SingularMatrixError(NsShapeError):
    """Direct factorization failed or produced an unusable solution."""


class MorphExhaustedError(NsShapeError):
    """Step-size retries ran out without an acceptable mesh update."""

    def __init__(self, iteration: int, step: float, retries: int):
        self.iteration = int(iteration)
        self.step = float(step)
        self.retries = int(retries)
        super().__init__(
            f"optimization iteration {iteration}: no acceptable step after "
            f"{retries} retries (last step {step:.3e})"
        )


class ConfigError(NsShapeError):
    """Invalid run configuration file or option value."""


class VerificationError(NsShapeError):
    """A gradient or convergence verification missed its threshold."""
