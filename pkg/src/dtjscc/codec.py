"""Feature splitting, codebook logits, Gumbel-softmax sampling and dequantization.

All functions accept arbitrary leading batch axes: features are ``(..., d*D)``,
split vectors ``(..., d, D)``, logits / probabilities / relaxed samples
``(..., d, K)`` and indices ``(..., d)``.  Each differentiable step has a
matching ``*_backward`` helper returning vector-Jacobian products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import log_softmax, softmax
from .errors import ParameterError, StructuralError


@dataclass
class Codebook:
    """Matrix of K codewords of dimension D, stored column-wise as M (D x K)."""

    M: np.ndarray

    def __post_init__(self):
        if self.M.ndim != 2 or self.M.shape[0] < 1 or self.M.shape[1] < 2:
            raise StructuralError(f"codebook must be D x K with D >= 1, K >= 2, got {self.M.shape}")

    @property
    def D(self) -> int:
        return self.M.shape[0]

    @property
    def K(self) -> int:
        return self.M.shape[1]

    @classmethod
    def init(cls, D: int, K: int, rng: np.random.Generator, scale: float = 1.0,
             dtype=np.float32) -> "Codebook":
        return cls((scale * rng.standard_normal((D, K)) / np.sqrt(D)).astype(dtype))


@dataclass
class FeatureSplit:
    vectors: np.ndarray  # (..., d, D)

    @property
    def d(self) -> int:
        return self.vectors.shape[-2]

    @property
    def D(self) -> int:
        return self.vectors.shape[-1]


def split_features(feature: np.ndarray, d: int, D: int) -> FeatureSplit:
    feature = np.asarray(feature)
    if d < 1 or D < 1 or feature.shape[-1] != d * D:
        raise StructuralError(f"feature width {feature.shape[-1]} is not d*D = {d}*{D}")
    return FeatureSplit(feature.reshape(feature.shape[:-1] + (d, D)))


def compute_logits(codebook: Codebook, split: FeatureSplit) -> np.ndarray:
    """logits[..., j, k] = <m_k, f_j>."""
    if split.D != codebook.D:
        raise StructuralError(f"feature vectors have length {split.D}, codewords {codebook.D}")
    return split.vectors @ codebook.M


def logits_backward(codebook: Codebook, split: FeatureSplit,
                    dlogits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dM, dfeature) with dfeature flattened back to (..., d*D)."""
    f = split.vectors.reshape(-1, split.D)
    g = dlogits.reshape(-1, codebook.K)
    dM = f.T @ g
    dfeat = dlogits @ codebook.M.T
    return dM, dfeat.reshape(dfeat.shape[:-2] + (-1,))


@dataclass
class EncoderDistribution:
    logits: np.ndarray  # (..., d, K)
    probs: np.ndarray  # (..., d, K)
    entropies: np.ndarray  # (..., d), nats

    def total_entropy(self) -> np.ndarray:
        """H(Z|x) of the factorial encoder: the sum over dimensions."""
        return self.entropies.sum(axis=-1)

    def mode(self) -> np.ndarray:
        return np.argmax(self.logits, axis=-1)


def encoder_distribution(logits: np.ndarray) -> EncoderDistribution:
    logp = log_softmax(logits)
    probs = np.exp(logp)
    # p*log p is exactly 0 where p underflows to 0
    entropies = -np.sum(np.where(probs > 0, probs * logp, 0.0), axis=-1)
    return EncoderDistribution(logits, probs, np.maximum(entropies, 0.0))


def entropy_backward(dist: EncoderDistribution, dentropies: np.ndarray) -> np.ndarray:
    """dH_j/dl_{j,k} = -p_k (log p_k + H_j)."""
    logp = log_softmax(dist.logits)
    local = -dist.probs * (logp + dist.entropies[..., None])
    return local * dentropies[..., None]


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def uniform_open(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    k = rng.integers(1, 2 ** 53, size=shape, dtype=np.int64)
    return k.astype(np.float64) * 2.0 ** -53


@dataclass
class GumbelSample:
    w: np.ndarray  # (..., d, K) relaxed one-hot samples
    z: np.ndarray  # (..., d) hard indices
    tau: float
    noise: np.ndarray  # (..., d, K) Gumbel perturbations


def gumbel_softmax(logits: np.ndarray, noise: np.ndarray, tau: float) -> GumbelSample:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    perturbed = logits + noise.astype(logits.dtype, copy=False)
    w = softmax(perturbed / tau)
    z = np.argmax(perturbed, axis=-1)
    return GumbelSample(w, z, tau, noise)


def gumbel_sample(logits: np.ndarray, tau: float, rng: np.random.Generator) -> GumbelSample:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return gumbel_softmax(logits, gumbel_from_uniform(uniform_open(rng, logits.shape)), tau)


def gumbel_softmax_backward(sample: GumbelSample, dw: np.ndarray) -> np.ndarray:
    w = sample.w
    return w * (dw - np.sum(w * dw, axis=-1, keepdims=True)) / sample.tau


def one_hot(indices: np.ndarray, K: int, dtype=np.float32) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= K):
        raise StructuralError(f"index out of range [0, {K})")
    out = np.zeros(indices.shape + (K,), dtype=dtype)
    np.put_along_axis(out, indices[..., None], 1, axis=-1)
    return out


def straight_through_combine(w: np.ndarray, z_hat: np.ndarray) -> np.ndarray:
    """Forward value one_hot(z_hat); the gradient passes to w unchanged.

    Equivalent to ``one_hot(z_hat) + w - stop_gradient(w)``, so the backward
    pass is the identity (see :func:`straight_through_backward`).
    """
    return one_hot(z_hat, w.shape[-1], dtype=w.dtype)


def straight_through_backward(doutput: np.ndarray) -> np.ndarray:
    return doutput


def receiver_embed(codebook: Codebook, z_hat: np.ndarray,
                   selection: np.ndarray | None = None) -> np.ndarray:
    """Concatenate selected codewords, dimension order j = 1..d.

    With ``selection`` rows (training), each embedded vector is ``M @ row``;
    otherwise columns of M are looked up directly by index.
    """
    z_hat = np.asarray(z_hat)
    if z_hat.size and (z_hat.min() < 0 or z_hat.max() >= codebook.K):
        raise StructuralError(f"received index out of range [0, {codebook.K})")
    if selection is None:
        vecs = codebook.M.T[z_hat]
    else:
        vecs = selection @ codebook.M.T
    return vecs.reshape(vecs.shape[:-2] + (-1,))


def receiver_embed_backward(codebook: Codebook, selection: np.ndarray,
                            dembed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dM, dselection) for ``embed = concat_j(M @ selection_j)``."""
    de = dembed.reshape(selection.shape[:-1] + (codebook.D,))
    dM = de.reshape(-1, codebook.D).T @ selection.reshape(-1, codebook.K)
    return dM, de @ codebook.M
