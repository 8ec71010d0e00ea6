"""Monte Carlo robust-IB loss and information diagnostics.

Internal quantities are in nats; ``*_bits`` fields divide by ln 2.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .codec import EncoderDistribution
from .errors import CapacityError, StructuralError
from .modem import TransitionMatrix, blahut_arimoto, capacity_circulant, entropy_nats

LN2 = math.log(2)
MAX_ENUMERATION = 10 ** 6


@dataclass
class VribTerms:
    distortion: float
    channel_entropy_term: float
    encoder_entropy_term: float
    beta: float
    total: float


def vrib_loss(ce_values: np.ndarray, channel_entropies: np.ndarray,
              encoder_entropies: np.ndarray, beta: float) -> VribTerms:
    """Average the per-sample, per-draw terms.

    ``ce_values`` and ``channel_entropies`` are (N, L); ``encoder_entropies``
    is (N,), each entry already summed over the d dimensions.

    total = mean CE + beta * mean sum_j H(Zhat_j|z_j) - beta * mean sum_j H(Z_j|x)
    """
    ce = np.asarray(ce_values, dtype=np.float64)
    ch = np.asarray(channel_entropies, dtype=np.float64)
    enc = np.asarray(encoder_entropies, dtype=np.float64)
    if ce.size == 0:
        raise StructuralError("empty batch")
    if ce.ndim != 2 or ch.shape != ce.shape or enc.shape != (ce.shape[0],):
        raise StructuralError(f"inconsistent shapes {ce.shape}, {ch.shape}, {enc.shape}")
    distortion = float(ce.mean())
    channel = float(ch.mean())
    encoder = float(enc.mean())
    if beta == 0:
        total = distortion
    else:
        total = distortion + beta * channel - beta * encoder
    return VribTerms(distortion, channel, encoder, float(beta), total)


def vrib_gradient_weights(n: int, draws: int, beta: float) -> tuple[float, float]:
    """d total / d ce_{i,l} and d total / d H_phi(Z|x^(i)).

    The channel term carries no weight: for a circulant channel it is the
    same constant for every transmitted index.
    """
    return 1.0 / (n * draws), -beta / n


def channel_entropy_of_sample(z: np.ndarray, T: TransitionMatrix) -> np.ndarray:
    """sum_j H(Zhat_j | z_j) for index vectors z of shape (..., d)."""
    return T.row_entropies()[np.asarray(z)].sum(axis=-1)


@dataclass
class InfoEstimates:
    i_z_zhat: float  # nats
    h_zhat: float
    h_zhat_given_z: float
    capacity: float  # bits per dimension
    d: int
    coded_redundancy_bound: float | None = None  # bits
    per_dimension: np.ndarray | None = None  # nats

    @property
    def i_z_zhat_bits(self) -> float:
        return self.i_z_zhat / LN2

    @property
    def capacity_total_bits(self) -> float:
        return self.d * self.capacity


def mean_encoder_probs(probs_stream: Iterable) -> np.ndarray:
    total = None
    count = 0
    for item in probs_stream:
        probs = item.probs if isinstance(item, EncoderDistribution) else np.asarray(item)
        probs = probs.reshape(-1, probs.shape[-2], probs.shape[-1]).astype(np.float64)
        s = probs.sum(axis=0)
        total = s if total is None else total + s
        count += probs.shape[0]
    if not count:
        raise StructuralError("empty encoder-probability stream")
    return total / count


def estimate_i_z_zhat(probs_stream: Iterable, T: TransitionMatrix,
                      i_xz_bits: float | None = None) -> InfoEstimates:
    """Factorial I(Z;Zhat) from dataset-averaged per-dimension encoder marginals."""
    pbar = mean_encoder_probs(probs_stream)  # (d, K)
    if pbar.shape[1] != T.K:
        raise StructuralError("encoder alphabet does not match channel")
    q = pbar @ T.entries
    h_zhat = entropy_nats(q, axis=1)
    h_cond = pbar @ T.row_entropies()
    per_dim = np.maximum(h_zhat - h_cond, 0.0)
    d = pbar.shape[0]
    try:
        cap = capacity_circulant(T)
    except Exception:
        cap = blahut_arimoto(T)[0]
    redundancy = None if i_xz_bits is None else d * cap - i_xz_bits
    return InfoEstimates(float(per_dim.sum()), float(h_zhat.sum()), float(h_cond.sum()), cap, d,
                         redundancy, per_dim)


@dataclass
class BruteForceInfo:
    i_y_zhat: float
    i_x_zhat: float
    i_z_zhat: float
    capacity_total: float
    enumeration_size: int


def _mutual_information(joint: np.ndarray) -> float:
    joint = joint / joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    denom = pa * pb
    mask = joint > 0
    return float(max(np.sum(joint[mask] * np.log(joint[mask] / denom[mask])), 0.0))


def brute_force_info(p_xy: np.ndarray, encoder_probs: np.ndarray,
                     T: TransitionMatrix) -> BruteForceInfo:
    """Exact I(Y;Zhat), I(X;Zhat), I(Z;Zhat) along Y - X - Z - Zhat.

    ``p_xy`` is the (|X|, |Y|) joint source law, ``encoder_probs`` the
    (|X|, d, K) factorial encoder and T the per-dimension channel.
    """
    p_xy = np.asarray(p_xy, dtype=np.float64)
    enc = np.asarray(encoder_probs, dtype=np.float64)
    nx, ny = p_xy.shape
    if enc.ndim != 3 or enc.shape[0] != nx or enc.shape[2] != T.K:
        raise StructuralError("encoder table does not match source/channel")
    d, K = enc.shape[1], enc.shape[2]
    size = nx * ny * K ** d
    if size > MAX_ENUMERATION:
        raise CapacityError(f"enumeration of {size} states exceeds {MAX_ENUMERATION}")

    codes = np.array(list(itertools.product(range(K), repeat=d)), dtype=np.int64)  # (K^d, d)
    W = T.entries
    # p(z|x) and p(zhat|z) for every full vector
    p_z_given_x = np.ones((nx, len(codes)))
    p_zhat_given_z = np.ones((len(codes), len(codes)))
    for j in range(d):
        p_z_given_x *= enc[:, j, codes[:, j]]
        p_zhat_given_z *= W[codes[:, j][:, None], codes[:, j][None, :]]
    p_x = p_xy.sum(axis=1)
    p_x_z = p_x[:, None] * p_z_given_x
    p_z = p_x_z.sum(axis=0)
    p_x_zhat = p_x_z @ p_zhat_given_z
    p_y_zhat = p_xy.T @ (p_z_given_x @ p_zhat_given_z)
    p_z_zhat = p_z[:, None] * p_zhat_given_z
    cap_bits = blahut_arimoto(T, tolerance=1e-12)[0]
    return BruteForceInfo(
        i_y_zhat=_mutual_information(p_y_zhat),
        i_x_zhat=_mutual_information(p_x_zhat),
        i_z_zhat=_mutual_information(p_z_zhat),
        capacity_total=d * cap_bits * LN2,
        enumeration_size=size,
    )
