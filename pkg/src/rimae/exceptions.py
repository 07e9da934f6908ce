"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class UsageError(RuntimeError):
    """An API was called out of its contract (e.g. backward twice)."""


class DegenerateFrame(ValueError):
    """PCA frame of a patch is not uniquely determined.

    Attributes
    ----------
    eigenvalues : ndarray
        Covariance spectrum in descending order.
    skewness : ndarray
        Scale-normalized third moments along the principal axes.
    reason : str
        ``"spectrum"`` for (near) tied eigenvalues, ``"skewness"`` for an
        axis whose sign cannot be disambiguated.
    """

    def __init__(self, message, eigenvalues=None, skewness=None, reason=""):
        super().__init__(message)
        self.eigenvalues = eigenvalues
        self.skewness = skewness
        self.reason = reason
