"""Per-label Gaussian-mixture intensities and the multiplicative bias field.

The observed image is ``I(x) = I*(x) * exp(-sum_p c_p psi_p(x))``; the
bias-corrected intensity ``I*`` follows a Gaussian mixture per label.  The
basis ``psi_p`` is the set of products of Legendre polynomials
``P_a(u) P_b(v) P_c(w)`` with ``a + b + c <= degree`` on grid coordinates
normalized to ``[-1, 1]``, ordered by total degree so ``psi_0 == 1`` and
``psi_1, psi_2, psi_3`` are linear in x, y, z.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy.special import logsumexp

from .volume import GridMeta, ScalarVolume

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2 * math.pi)
TIKHONOV = 1e-8


# ----------------------------------------------------------------------------
# Mixture
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelMixture:
    """Gaussian mixture per label; arrays are (L, C)."""

    labels: tuple[int, ...]
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if not (w.shape == mu.shape == var.shape) or w.shape[0] != len(self.labels):
            raise ValueError("mixture arrays must be (n_labels, n_components)")
        if np.any(var <= 0) or np.any(w < 0):
            raise ValueError("variances must be > 0 and weights >= 0")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("component weights must sum to 1 per label")
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def single(cls, labels, means, variances) -> "LabelMixture":
        means = np.asarray(means, dtype=np.float64)[:, None]
        return cls(tuple(labels), np.ones_like(means), means, np.asarray(variances, dtype=np.float64)[:, None])

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    def label_means(self) -> np.ndarray:
        return (self.weights * self.means).sum(axis=1)

    def row(self, label: int) -> int:
        try:
            return self.labels.index(int(label))
        except ValueError:
            raise KeyError(f"label {label} not in mixture") from None

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelMixture":
        return cls(tuple(d["labels"]), d["weights"], d["means"], d["variances"])


def _component_logpdf(mix: LabelMixture, values: np.ndarray) -> np.ndarray:
    """log(w_k N(v; mu_k, var_k)) with shape (L, C, V)."""
    v = np.asarray(values, dtype=np.float64)[None, None, :]
    mu = mix.means[:, :, None]
    var = mix.variances[:, :, None]
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)[:, :, None]
    return logw - 0.5 * (_LOG_2PI + np.log(var)) - 0.5 * (v - mu) ** 2 / var


def log_likelihood(mix: LabelMixture, values: np.ndarray) -> np.ndarray:
    """Log mixture density of each value under each label: (L, V)."""
    return logsumexp(_component_logpdf(mix, values), axis=1)


def likelihood(mix: LabelMixture, label: int, intensity: float) -> float:
    """Mixture density of ``intensity`` (bias-corrected) under ``label``."""
    row = mix.row(label)
    comp = _component_logpdf(mix, np.array([intensity]))[row, :, 0]
    return float(np.exp(logsumexp(comp)))


def default_variance_floor(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=np.float64)
    rng = float(v.max() - v.min()) if v.size else 0.0
    return max(1e-4 * rng * rng, 1e-12)


def m_step_mixture(
    responsibilities: np.ndarray,
    i_star: np.ndarray,
    mix: LabelMixture,
    var_floor: float | None = None,
    min_weight: float = 1e-6,
) -> tuple[LabelMixture, list[int]]:
    """Weighted-EM update of every label's mixture.

    ``responsibilities`` is (L, V) aligned with ``mix.labels``, ``i_star``
    the bias-corrected intensities (V,).  Within-label component
    responsibilities come from the current ``mix``; weights, means and
    variances are then the weighted moments, variances floored at
    ``var_floor``.  Labels whose total responsibility is below
    ``min_weight`` keep their parameters and are returned as flagged.
    """
    r = np.asarray(responsibilities, dtype=np.float64)
    v = np.asarray(i_star, dtype=np.float64)
    if r.shape != (len(mix.labels), v.size):
        raise ValueError(f"responsibilities must be {(len(mix.labels), v.size)}, got {r.shape}")
    if np.any(r < 0) or np.any(r.sum(axis=0) > 1 + 1e-9):
        raise ValueError("responsibilities must be >= 0 with per-voxel sums <= 1")
    mass = r.sum(axis=1)
    if not np.any(mass >= min_weight):
        raise ValueError("all labels have zero responsibility")
    if var_floor is None:
        var_floor = default_variance_floor(v)

    comp = _component_logpdf(mix, v)
    comp_post = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))  # (L, C, V)
    rk = comp_post * r[:, None, :]
    nk = rk.sum(axis=2)  # (L, C)

    weights = mix.weights.copy()
    means = mix.means.copy()
    variances = mix.variances.copy()
    flagged = []
    for li in range(len(mix.labels)):
        if mass[li] < min_weight:
            flagged.append(mix.labels[li])
            continue
        for k in range(mix.n_components):
            if nk[li, k] <= 0:
                weights[li, k] = 0.0
                continue
            mu = float(rk[li, k] @ v / nk[li, k])
            var = float(rk[li, k] @ (v - mu) ** 2 / nk[li, k])
            means[li, k] = mu
            variances[li, k] = max(var, var_floor)
            weights[li, k] = nk[li, k] / mass[li]
        weights[li] /= weights[li].sum()
    if flagged:
        log.debug("labels %s kept previous parameters (no responsibility)", flagged)
    return LabelMixture(mix.labels, weights, means, variances), flagged


def expected_loglik(responsibilities: np.ndarray, i_star: np.ndarray, mix: LabelMixture) -> float:
    """``sum_x sum_l r_l(x) log p(I*(x) | l)``: the mixture part of the M-step objective."""
    return float((np.asarray(responsibilities) * log_likelihood(mix, i_star)).sum())


# ----------------------------------------------------------------------------
# Bias field
# ----------------------------------------------------------------------------


def basis_exponents(degree: int) -> list[tuple[int, int, int]]:
    out = []
    for total in range(degree + 1):
        for a in range(total, -1, -1):
            for b in range(total - a, -1, -1):
                out.append((a, b, total - a - b))
    return out


def normalized_axes(meta: GridMeta) -> list[np.ndarray]:
    axes = []
    for n in meta.dims:
        axes.append(np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n))
    return axes


def _leg(u: np.ndarray, deg: int) -> np.ndarray:
    c = np.zeros(deg + 1)
    c[deg] = 1.0
    return legendre.legval(u, c)


def evaluate_basis(degree: int, meta: GridMeta, coords: np.ndarray | None = None) -> np.ndarray:
    """Basis values, (P, nx, ny, nz), or (P, V) at the given voxel ``coords``."""
    axes = normalized_axes(meta)
    exps = basis_exponents(degree)
    if coords is None:
        out = np.empty((len(exps), *meta.dims))
        for p, (a, b, c) in enumerate(exps):
            out[p] = (
                _leg(axes[0], a)[:, None, None] * _leg(axes[1], b)[None, :, None] * _leg(axes[2], c)[None, None, :]
            )
        return out
    u, v, w = (axes[d][coords[:, d]] for d in range(3))
    return np.stack([_leg(u, a) * _leg(v, b) * _leg(w, c) for a, b, c in exps])


@dataclass(frozen=True, eq=False)
class BiasModel:
    degree: int
    coeffs: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("bias degree must be >= 0")
        n = len(basis_exponents(self.degree))
        c = np.zeros(n) if self.coeffs is None else np.asarray(self.coeffs, dtype=np.float64).copy()
        if c.shape != (n,):
            raise ValueError(f"degree {self.degree} needs {n} coefficients, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("bias coefficients must be finite")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def n_basis(self) -> int:
        return len(self.coeffs)

    def log_field(self, meta: GridMeta) -> np.ndarray:
        """``sum_p c_p psi_p`` on the full grid."""
        return np.tensordot(self.coeffs, evaluate_basis(self.degree, meta), axes=1)

    def with_coeffs(self, coeffs) -> "BiasModel":
        return BiasModel(self.degree, coeffs)

    def to_dict(self) -> dict:
        return {"degree": self.degree, "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BiasModel":
        return cls(int(d["degree"]), d["coeffs"])


def apply_bias(i_star: ScalarVolume, bias: BiasModel) -> ScalarVolume:
    """Corrupt a clean image: ``I = I* exp(-sum_p c_p psi_p)``."""
    return i_star.with_data(i_star.data * np.exp(-bias.log_field(i_star.meta)))


def correct_bias(image: ScalarVolume, bias: BiasModel) -> ScalarVolume:
    """Inverse of :func:`apply_bias`."""
    return image.with_data(image.data * np.exp(bias.log_field(image.meta)))


def floor_intensities(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    top = float(v.max()) if v.size else 0.0
    eps = 1e-6 * top if top > 0 else 1e-12
    return np.maximum(v, eps)


def fit_bias(
    responsibilities: np.ndarray,
    image: np.ndarray,
    mix: LabelMixture,
    bias: BiasModel,
    basis: np.ndarray,
    damping: float = TIKHONOV,
) -> BiasModel:
    """Re-fit bias coefficients by weighted least squares in the log domain.

    The residual ``log I(x) - log(predicted I*(x))`` is regressed onto
    ``-psi_p(x)``, where the prediction is the responsibility-weighted label
    mean and the weights are the total responsibility at ``x``.  ``image``
    holds observed intensities (V,) and ``basis`` the (P, V) basis values on
    the same voxels.
    """
    r = np.asarray(responsibilities, dtype=np.float64)
    w = r.sum(axis=0)
    safe_w = np.where(w > 0, w, 1.0)
    pred = (r * mix.label_means()[:, None]).sum(axis=0) / safe_w
    pred = floor_intensities(np.where(w > 0, pred, 1.0))
    resid = np.log(floor_intensities(image)) - np.log(pred)
    psi = np.asarray(basis, dtype=np.float64)
    if psi.shape[0] != bias.n_basis:
        raise ValueError("basis does not match bias degree")
    a = (psi * w) @ psi.T + damping * np.eye(bias.n_basis)
    b = -(psi * w) @ resid
    coeffs = np.linalg.solve(a, b)
    assert np.all(np.isfinite(coeffs)), "bias normal equations produced non-finite coefficients"
    return bias.with_coeffs(coeffs)
