"""Kernel basis functions turning 3D coordinates into design matrices."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError

FAMILIES = ("squared-exponential",)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and its parameters.

    Parameters
    ----------
    family : str
        Only ``"squared-exponential"`` is available.
    length_scale : float
        Length scale in meters.
    signal_variance : float
        Kernel amplitude; ``k(x, x) == signal_variance``.
    include_bias : bool
        Prepend a constant ``1`` to every basis vector.
    """

    family: str = "squared-exponential"
    length_scale: float = 0.3
    signal_variance: float = 1.0
    include_bias: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown kernel family {self.family!r}")
        if not (np.isfinite(self.length_scale) and self.length_scale > 0):
            raise InvalidInputError("length_scale must be a positive finite number")
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise InvalidInputError("signal_variance must be a positive finite number")
        object.__setattr__(self, "length_scale", float(self.length_scale))
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "include_bias", bool(self.include_bias))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        unknown = set(d) - {"family", "length_scale", "signal_variance", "include_bias"}
        if unknown:
            raise InvalidInputError(f"unknown kernel keys: {sorted(unknown)}")
        return cls(**d)


def _as_points(x, name="points") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (n, 3), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contain non-finite coordinates")
    return x


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |a|^2+|b|^2-2ab expansion: exact zeros
    # on the diagonal and translation invariance up to rounding
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    """Pairwise kernel values ``k(a_i, b_j)`` without the bias column."""
    a = _as_points(a, "inputs")
    b = _as_points(b, "centers")
    return spec.signal_variance * np.exp(-_sq_dists(a, b) / (2.0 * spec.length_scale**2))


def kernel_eval(spec: KernelSpec, a, b) -> float:
    """Squared-exponential similarity of two 3D points."""
    return float(kernel_matrix(spec, a, b)[0, 0])


def design_matrix(spec: KernelSpec, inputs, centers) -> np.ndarray:
    """Design matrix with one row per input and one column per basis.

    The bias column, when enabled, comes first.
    """
    centers = _as_points(centers, "centers")
    if centers.shape[0] == 0:
        raise InvalidInputError("centers must be non-empty")
    inputs = _as_points(inputs, "inputs")
    if inputs.shape[0] == 0:
        raise InvalidInputError("inputs must be non-empty")
    K = kernel_matrix(spec, inputs, centers)
    if spec.include_bias:
        K = np.hstack([np.ones((K.shape[0], 1)), K])
    return K


def basis_vector(spec: KernelSpec, x, centers) -> np.ndarray:
    return design_matrix(spec, _as_points(x, "query")[:1], centers)[0]
