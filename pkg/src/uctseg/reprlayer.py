"""Learnable bone/dirt filter banks with discriminative energy losses.

The representation layer is a pair of small convolutional filter banks with
no bias and no nonlinearity. Each bank is pushed, by a regularization loss
evaluated on single-class exemplar patches, to respond weakly to the other
class while keeping (bone bank) or sparsifying (dirt bank) its own-class
response. The concatenated bank responses form the feature stack consumed
by the segmentation network.

Everything here is plain numpy/scipy with hand-derived closed-form
gradients, so the loss surface is auditable independently of any autograd
framework; the trainer re-expresses the same losses in torch and the test
suite checks the two agree.

Convolution convention: centered cross-correlation with zero padding, so
output maps match the input size and a delta filter is the identity.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal


DEFAULT_K = 16
DEFAULT_FILTER_SIZE = 3


@dataclass(frozen=True)
class ReprLossCoefficients:
    """Weights of the five discriminative loss terms.

    alpha and gamma scale the cross-class suppression terms (bone bank on
    dirt patches, dirt bank on bone patches) and carry the bulk of the
    signal; beta and sigma gently encourage own-class response energy, and
    zeta is the L1 sparsity weight on the dirt bank's own-class response.
    Own-class encouragement enters the objective negatively, so large
    beta/sigma values make the objective unbounded below and will trip the
    trainer's divergence guard.
    """

    alpha: float = 0.5
    beta: float = 1e-5
    gamma: float = 0.5
    sigma: float = 1e-5
    zeta: float = 1e-5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "sigma", "zeta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a non-negative finite real, got {value}")


@dataclass(frozen=True)
class RepresentationParams:
    """Two filter banks of shape (K, m, n); K may be 0 (disabled layer)."""

    bone_filters: np.ndarray
    dirt_filters: np.ndarray

    def __post_init__(self):
        for name, bank in (("bone_filters", self.bone_filters), ("dirt_filters", self.dirt_filters)):
            if bank.ndim != 3:
                raise ValueError(f"{name} must be a (K, m, n) array, got shape {bank.shape}")
            if not np.all(np.isfinite(bank)):
                raise ValueError(f"{name} contains non-finite weights")
        if self.bone_filters.shape != self.dirt_filters.shape:
            raise ValueError(
                f"banks must share (K, m, n): {self.bone_filters.shape} vs {self.dirt_filters.shape}"
            )
        _, m, n = self.bone_filters.shape
        if self.k > 0 and (m % 2 == 0 or n % 2 == 0 or m < 1 or n < 1):
            raise ValueError(f"filter dims must be odd for centered same-size convolution, got {m}x{n}")

    @property
    def k(self) -> int:
        return self.bone_filters.shape[0]

    @property
    def filter_shape(self) -> tuple[int, int]:
        return self.bone_filters.shape[1], self.bone_filters.shape[2]


def init_representation(
    k: int = DEFAULT_K,
    m: int = DEFAULT_FILTER_SIZE,
    n: int = DEFAULT_FILTER_SIZE,
    seed: int = 0,
) -> RepresentationParams:
    """Uniform init in [-u, u], u = 1/sqrt(m*n), from per-bank named streams."""
    if k < 0:
        raise ValueError(f"filter count must be non-negative, got {k}")
    u = 1.0 / np.sqrt(m * n)
    banks = {}
    for name in ("bone_filters", "dirt_filters"):
        rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
        banks[name] = rng.uniform(-u, u, size=(k, m, n))
    return RepresentationParams(**banks)


def _check_patch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2:
        raise ValueError(f"patches must be 2-D grayscale arrays, got shape {patch.shape}")
    if not np.all(np.isfinite(patch)):
        raise ValueError("patch contains non-finite values")
    return patch


def correlate_same(image: np.ndarray, filt: np.ndarray) -> np.ndarray:
    """Centered cross-correlation with zero padding; output matches input size."""
    return ndimage.correlate(image, filt, mode="constant", cval=0.0)


def repr_forward(image: np.ndarray, params: RepresentationParams) -> np.ndarray:
    """Stack of all 2K filter responses, bone bank first, each in filter order."""
    image = _check_patch(image)
    k = params.k
    out = np.empty((2 * k,) + image.shape, dtype=np.float64)
    for i in range(k):
        out[i] = correlate_same(image, params.bone_filters[i])
        out[k + i] = correlate_same(image, params.dirt_filters[i])
    return out


def loss_bone(
    params: RepresentationParams,
    bone_patches: list[np.ndarray],
    dirt_patches: list[np.ndarray],
    coeffs: ReprLossCoefficients,
) -> float:
    """Sum over filters and patches of alpha*||W_b * I_dirt||^2 - beta*||W_b * I_bone||^2.

    Norms are sums over the full same-size response map. Accumulation is in
    fixed sequential (filter, patch) order for bit-determinism.
    """
    if not bone_patches or not dirt_patches:
        raise ValueError("both patch lists must be non-empty")
    bone = [_check_patch(p) for p in bone_patches]
    dirt = [_check_patch(p) for p in dirt_patches]
    total = 0.0
    for filt in params.bone_filters:
        for patch in dirt:
            total += coeffs.alpha * float(np.sum(correlate_same(patch, filt) ** 2))
        for patch in bone:
            total -= coeffs.beta * float(np.sum(correlate_same(patch, filt) ** 2))
    return total


def loss_dirt(
    params: RepresentationParams,
    bone_patches: list[np.ndarray],
    dirt_patches: list[np.ndarray],
    coeffs: ReprLossCoefficients,
) -> float:
    """gamma*||W_d * I_bone||^2 - sigma*||W_d * I_dirt||^2 + zeta*||W_d * I_dirt||_1, summed."""
    if not bone_patches or not dirt_patches:
        raise ValueError("both patch lists must be non-empty")
    bone = [_check_patch(p) for p in bone_patches]
    dirt = [_check_patch(p) for p in dirt_patches]
    total = 0.0
    for filt in params.dirt_filters:
        for patch in bone:
            total += coeffs.gamma * float(np.sum(correlate_same(patch, filt) ** 2))
        for patch in dirt:
            resp = correlate_same(patch, filt)
            total -= coeffs.sigma * float(np.sum(resp**2))
            total += coeffs.zeta * float(np.sum(np.abs(resp)))
    return total


def _pad_for(patch: np.ndarray, m: int, n: int) -> np.ndarray:
    return np.pad(patch, ((m // 2, m // 2), (n // 2, n // 2)))


def _energy_grad(padded: np.ndarray, response: np.ndarray) -> np.ndarray:
    """d(sum response^2)/dW = 2 * valid-mode correlation of padded input with response."""
    return 2.0 * signal.correlate2d(padded, response, mode="valid")


def _abs_grad(padded: np.ndarray, response: np.ndarray) -> np.ndarray:
    """d(sum |response|)/dW with the subgradient at 0 taken as 0."""
    return signal.correlate2d(padded, np.sign(response), mode="valid")


def repr_gradients(
    params: RepresentationParams,
    bone_patches: list[np.ndarray],
    dirt_patches: list[np.ndarray],
    coeffs: ReprLossCoefficients,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of loss_bone + loss_dirt w.r.t. both banks.

    For a response map R = W * I (cross-correlation, zero padding),
    d(sum R^2)/dW is twice the valid-mode correlation of the zero-padded
    input with R, and d(sum |R|)/dW is the valid-mode correlation with
    sign(R). Returns (bone_bank_grad, dirt_bank_grad), each (K, m, n).
    """
    if not bone_patches or not dirt_patches:
        raise ValueError("both patch lists must be non-empty")
    m, n = params.filter_shape if params.k > 0 else (1, 1)
    bone = [_check_patch(p) for p in bone_patches]
    dirt = [_check_patch(p) for p in dirt_patches]
    bone_padded = [_pad_for(p, m, n) for p in bone]
    dirt_padded = [_pad_for(p, m, n) for p in dirt]

    grad_bone = np.zeros_like(params.bone_filters)
    for k, filt in enumerate(params.bone_filters):
        for patch, padded in zip(dirt, dirt_padded):
            grad_bone[k] += coeffs.alpha * _energy_grad(padded, correlate_same(patch, filt))
        for patch, padded in zip(bone, bone_padded):
            grad_bone[k] -= coeffs.beta * _energy_grad(padded, correlate_same(patch, filt))

    grad_dirt = np.zeros_like(params.dirt_filters)
    for k, filt in enumerate(params.dirt_filters):
        for patch, padded in zip(bone, bone_padded):
            grad_dirt[k] += coeffs.gamma * _energy_grad(padded, correlate_same(patch, filt))
        for patch, padded in zip(dirt, dirt_padded):
            resp = correlate_same(patch, filt)
            grad_dirt[k] -= coeffs.sigma * _energy_grad(padded, resp)
            grad_dirt[k] += coeffs.zeta * _abs_grad(padded, resp)

    return grad_bone, grad_dirt


def mean_response_energy(bank: np.ndarray, patches: list[np.ndarray]) -> float:
    """Mean over (filter, patch) of the squared response-map norm."""
    if bank.shape[0] == 0 or not patches:
        raise ValueError("need at least one filter and one patch")
    checked = [_check_patch(p) for p in patches]
    total = 0.0
    for filt in bank:
        for patch in checked:
            total += float(np.sum(correlate_same(patch, filt) ** 2))
    return total / (bank.shape[0] * len(checked))
