"""Fully connected Gaussian-kernel CRF: pairwise weights, mean-field
refinement of noisy unaries, and the unsupervised Potts solver that grows
segment structure from the kernel alone.

Pairwise sums are computed exactly (dense or row-blocked); there is no
lattice approximation, which is what keeps the oracle checks honest.
Images are capped at 128x128 for the dense paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    ResourceLimitError,
)
from .optim import AdamState, adam_step
from .probes import ClusterProbe
from .tensorio import FeatureMap, LabelMap, normalize_columns

MAX_DENSE_SIDE = 128
MAX_SOLVER_SIDE = 64
# full kernel matrices above this many pixels are recomputed in row blocks
_PRECOMPUTE_MAX_PIXELS = 8192
_BLOCK_ROWS = 2048


@dataclass
class CrfParams:
    """Gaussian edge-potential parameters.

    ``a``/``b`` weight the appearance and smoothness kernels (these are
    unrelated to the loss's negative-pressure constants); ``negative_shift``
    is the constant subtracted from kernel weights by the unsupervised
    solver so unrelated pixels repel.
    """

    a: float = 4.0
    b: float = 3.0
    theta_alpha: float = 67.0
    theta_beta: float = 3.0
    theta_gamma: float = 1.0
    iterations: int = 10
    negative_shift: float = 0.0

    def validate(self) -> "CrfParams":
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ConfigurationError("kernel widths must be positive")
        if self.iterations < 1:
            raise ConfigurationError("need at least one mean-field iteration")
        return self


@dataclass
class UnaryField:
    """Per-pixel class log-potentials, shape (H, W, K')."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError(f"unary field must be (H,W,K'), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DimensionError("unary field contains non-finite values")


def crf_kernel(pos_i, pos_j, color_i, color_j, params: CrfParams) -> float:
    """Pairwise weight between two pixels; colors are RGB in [0, 1]."""
    params.validate()
    dp2 = float(np.sum((np.asarray(pos_i, float) - np.asarray(pos_j, float)) ** 2))
    dc2 = float(np.sum((np.asarray(color_i, float) - np.asarray(color_j, float)) ** 2))
    appearance = np.exp(-dp2 / (2 * params.theta_alpha**2) - dc2 / (2 * params.theta_beta**2))
    smoothness = np.exp(-dp2 / (2 * params.theta_gamma**2))
    return float(params.a * appearance + params.b * smoothness)


def _check_image(image: np.ndarray, max_side: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be (H,W,3), got {image.shape}")
    if max(image.shape[0], image.shape[1]) > max_side:
        raise ResourceLimitError(
            f"dense CRF is capped at {max_side}x{max_side}, got {image.shape[0]}x{image.shape[1]}"
        )
    return image


def _pixel_features(image: np.ndarray):
    h, w, _ = image.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pos = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)
    col = image.reshape(-1, 3)
    return pos, col


def _kernel_rows(rows, pos, col, params: CrfParams) -> np.ndarray:
    """Kernel weights between the given row pixels and all pixels."""
    dp2 = ((pos[rows, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    dc2 = ((col[rows, None, :] - col[None, :, :]) ** 2).sum(axis=2)
    appearance = np.exp(
        -dp2 / (2 * params.theta_alpha**2) - dc2 / (2 * params.theta_beta**2)
    )
    smoothness = np.exp(-dp2 / (2 * params.theta_gamma**2))
    return params.a * appearance + params.b * smoothness


def kernel_matrix(image: np.ndarray, params: CrfParams, zero_diagonal: bool = True) -> np.ndarray:
    """Dense (N, N) pairwise kernel for a small image."""
    pos, col = _pixel_features(image)
    w = _kernel_rows(np.arange(pos.shape[0]), pos, col, params)
    if zero_diagonal:
        np.fill_diagonal(w, 0.0)
    return w


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def meanfield_distributions(
    unary: UnaryField, image: np.ndarray, params: CrfParams
) -> list[np.ndarray]:
    """Mean-field iterates Q^0..Q^T as (N, K') row distributions.

    Update: Q <- softmax(unary + sum_{j != i} w(i,j) Q_j), the Potts-
    compatibility message with the label-constant term dropped. The
    self-pair is excluded so a pixel's belief never reinforces itself.
    """
    params.validate()
    image = _check_image(image, MAX_DENSE_SIDE)
    h, w, _ = image.shape
    if unary.data.shape[:2] != (h, w):
        raise DimensionError(
            f"unary grid {unary.data.shape[:2]} does not match image {h}x{w}"
        )
    n = h * w
    u = unary.data.reshape(n, -1)
    q = _softmax_rows(u)
    iterates = [q]
    pos, col = _pixel_features(image)
    dense = None
    if n <= _PRECOMPUTE_MAX_PIXELS:
        dense = _kernel_rows(np.arange(n), pos, col, params)
        np.fill_diagonal(dense, 0.0)
    for _ in range(params.iterations):
        if dense is not None:
            msg = dense @ q
        else:
            msg = np.empty_like(q)
            for start in range(0, n, _BLOCK_ROWS):
                rows = np.arange(start, min(start + _BLOCK_ROWS, n))
                block = _kernel_rows(rows, pos, col, params)
                block[np.arange(rows.size), rows] = 0.0
                msg[rows] = block @ q
        q = _softmax_rows(u + msg)
        iterates.append(q)
    return iterates


def meanfield_refine(unary: UnaryField, image: np.ndarray, params: CrfParams) -> LabelMap:
    """Refine unary label beliefs with dense mean-field; returns argmax labels."""
    q = meanfield_distributions(unary, image, params)[-1]
    h, w, _ = np.asarray(image).shape
    return LabelMap(q.argmax(axis=1).astype(np.uint8).reshape(h, w))


def unary_from_probe(
    codes: FeatureMap, probe: ClusterProbe, temperature: float = 0.1
) -> UnaryField:
    """Cluster-probe similarities turned into log-softmax unaries."""
    unit = normalize_columns(codes.data.reshape(codes.channels, -1).astype(np.float64))
    logits = (probe.centroids.astype(np.float64) @ unit).T / temperature  # (N, K')
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return UnaryField(logp.reshape(codes.height, codes.width, -1))


# --- unsupervised Potts solver --------------------------------------------------


@dataclass
class CodeSpace:
    kind: str  # "discrete" | "continuous"
    dim: int

    @staticmethod
    def discrete(n_labels: int) -> "CodeSpace":
        return CodeSpace("discrete", n_labels)

    @staticmethod
    def continuous(dim: int) -> "CodeSpace":
        return CodeSpace("continuous", dim)


@dataclass
class PottsSolution:
    codes: np.ndarray  # (N, dim): label probabilities (discrete) or unit vectors
    labels: LabelMap | None
    energies: np.ndarray  # recorded per-step energy, monotone non-increasing
    shape: tuple[int, int]


def unsupervised_potts_solve(
    image: np.ndarray,
    code_space: CodeSpace,
    params: CrfParams,
    steps: int = 500,
    rng: np.random.Generator | None = None,
    lr: float = 0.01,
) -> PottsSolution:
    """Minimize the shifted-kernel Potts energy over per-pixel codes.

    Weights are kernel minus ``negative_shift`` (self-pairs excluded);
    discrete spaces use softmax-relaxed per-pixel logits with the
    compatibility 1 - <q_i, q_j>, continuous spaces unit vectors with
    cosine distance. Adam drives the descent; a step that would raise the
    energy is reverted and the rate halved, so the recorded trajectory is
    non-increasing by construction.
    """
    params.validate()
    if rng is None:
        rng = np.random.default_rng(0)
    if code_space.kind not in ("discrete", "continuous"):
        raise ConfigurationError(f"unknown code space {code_space.kind!r}")
    if code_space.dim < 2:
        raise ConfigurationError("code space needs dimension >= 2")
    image = _check_image(image, MAX_SOLVER_SIDE)
    h, w, _ = image.shape
    n = h * w
    weights = kernel_matrix(image, params, zero_diagonal=True) - params.negative_shift
    np.fill_diagonal(weights, 0.0)
    row_sum = weights.sum()

    discrete = code_space.kind == "discrete"
    theta = rng.normal(0.0, 0.1, size=(n, code_space.dim))

    def codes_and_energy(th):
        if discrete:
            c = _softmax_rows(th)
        else:
            c = normalize_columns(th.T).T
        coupling = float(np.einsum("ij,ik,jk->", weights, c, c, optimize=True))
        return c, row_sum - coupling

    def gradient(th, c):
        grad_c = -2.0 * (weights @ c)
        if discrete:
            inner = (grad_c * c).sum(axis=1, keepdims=True)
            return c * (grad_c - inner)
        norms = np.linalg.norm(th, axis=1, keepdims=True)
        inner = (grad_c * c).sum(axis=1, keepdims=True)
        return np.where(norms > 1e-8, (grad_c - inner * c) / np.maximum(norms, 1e-8), grad_c / 1e-8)

    codes, energy = codes_and_energy(theta)
    energies = [energy]
    state = AdamState.zeros_like({"theta": theta})
    cur_lr = lr
    for _ in range(steps):
        grad = gradient(theta, codes)
        snapshot = theta.copy()
        adam_step({"theta": theta}, {"theta": grad}, state, cur_lr)
        new_codes, new_energy = codes_and_energy(theta)
        if new_energy <= energy:
            codes, energy = new_codes, new_energy
        else:
            theta[:] = snapshot
            cur_lr *= 0.5
        energies.append(energy)
        if cur_lr < 1e-12:
            break

    labels = None
    if discrete:
        labels = LabelMap(codes.argmax(axis=1).astype(np.uint8).reshape(h, w))
    return PottsSolution(
        codes=codes, labels=labels, energies=np.asarray(energies), shape=(h, w)
    )


def mean_kernel_weight(image: np.ndarray, params: CrfParams) -> float:
    """Average off-diagonal kernel weight; a natural negative-shift choice."""
    w = kernel_matrix(image, params, zero_diagonal=True)
    n = w.shape[0]
    return float(w.sum() / (n * (n - 1)))


def top3_code_image(solution: PottsSolution) -> np.ndarray:
    """Render the three highest-variance code dimensions as an RGB image."""
    codes = solution.codes
    if codes.shape[1] < 3:
        raise DegenerateInputError("need at least 3 code dimensions to render")
    order = np.argsort(-codes.var(axis=0))[:3]
    sel = codes[:, order]
    lo = sel.min(axis=0, keepdims=True)
    hi = sel.max(axis=0, keepdims=True)
    span = np.maximum(hi - lo, 1e-12)
    img = (sel - lo) / span
    h, w = solution.shape
    return img.reshape(h, w, 3)
