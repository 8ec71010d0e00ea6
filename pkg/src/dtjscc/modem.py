"""K-PSK over AWGN: modulation, sector demodulation and the induced discrete channel."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import ConvergenceError, DomainError, NumericError, ParameterError, StructuralError

QUAD_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Constellation:
    K: int

    def __post_init__(self):
        if self.K < 2:
            raise ParameterError(f"PSK needs K >= 2 points, got {self.K}")

    @property
    def points(self) -> np.ndarray:
        return np.exp(2j * np.pi * np.arange(self.K) / self.K)


@dataclass(frozen=True)
class ChannelSpec:
    psnr_db: float
    p_max: float = 1.0

    @property
    def sigma2(self) -> float:
        return psnr_to_sigma2(self.psnr_db, self.p_max)


def psnr_to_sigma2(psnr_db: float, p_max: float = 1.0) -> float:
    if not p_max > 0:
        raise ParameterError("peak power must be positive")
    return p_max * 10.0 ** (-psnr_db / 10.0)


def _as_constellation(c) -> Constellation:
    return c if isinstance(c, Constellation) else Constellation(int(c))


def modulate(z, constellation) -> np.ndarray | complex:
    """Map indices to unit-modulus symbols exp(i 2 pi z / K)."""
    K = _as_constellation(constellation).K
    zi = np.asarray(z)
    if zi.size and (zi.min() < 0 or zi.max() >= K):
        raise StructuralError(f"symbol index out of range [0, {K})")
    out = np.exp(2j * np.pi * zi / K)
    return complex(out) if out.ndim == 0 else out


def apply_awgn(symbol, sigma2: float, rng: np.random.Generator):
    """Add circularly symmetric complex Gaussian noise of total variance sigma2."""
    if not sigma2 > 0:
        raise ParameterError("noise variance must be positive")
    s = np.asarray(symbol, dtype=np.complex128)
    std = math.sqrt(sigma2 / 2)
    noise = rng.standard_normal(s.shape + (2,)) * std
    out = s + noise[..., 0] + 1j * noise[..., 1]
    return complex(out) if out.ndim == 0 else out


def demodulate(received, constellation) -> np.ndarray | int:
    """Nearest PSK point, i.e. the angular sector of width 2 pi / K around it.

    Exact boundary ties go to the lower index; the origin maps to 0.
    """
    K = _as_constellation(constellation).K
    r = np.asarray(received, dtype=np.complex128)
    if not np.all(np.isfinite(r)):
        raise NumericError("received symbol is not finite")
    s = np.angle(r) * (K / (2 * np.pi)) - 0.5
    idx = np.ceil(s)
    tie = idx == s
    idx = idx.astype(np.int64) % K
    idx = np.where(tie, np.minimum(idx, (idx + 1) % K), idx)
    return int(idx) if idx.ndim == 0 else idx


def extended_channel(z: np.ndarray, K: int, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Indices through modulate -> AWGN -> demodulate."""
    return demodulate(apply_awgn(modulate(z, K), sigma2, rng), K)


def entropy_nats(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return 0.0 - np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=axis)


def binary_entropy(p: float) -> float:
    """H_b(p) in nats."""
    return float(entropy_nats(np.array([p, 1 - p])))


def q_function(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2))


@dataclass
class TransitionMatrix:
    entries: np.ndarray  # T[k, k'] = P(received k' | sent k)
    provenance: str = "quadrature"
    counts: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def row_entropy(self) -> float:
        """Entropy of row 0 in nats; shared by every row when T is circulant."""
        return float(entropy_nats(self.entries[0]))

    def row_entropies(self) -> np.ndarray:
        return entropy_nats(self.entries, axis=1)

    def circulant_deviation(self) -> float:
        T = self.entries
        K = self.K
        shifted = np.stack([np.roll(T[0], k) for k in range(K)])
        return float(np.max(np.abs(T - shifted)))

    def is_circulant(self, tol: float = 1e-9) -> bool:
        return self.circulant_deviation() <= tol


def _phase_density(theta: float, gamma: float) -> float:
    # radial integral of the 2-D Gaussian centred at (1, 0) done in closed form
    c = math.cos(theta)
    sg = math.sqrt(gamma)
    return (math.exp(-gamma)
            + math.sqrt(math.pi * gamma) * c * math.exp(-gamma * math.sin(theta) ** 2)
            * special.erfc(-sg * c)) / (2 * math.pi)


def transition_matrix(K: int, sigma2: float) -> TransitionMatrix:
    """Exact K x K law of the PSK/AWGN/sector-decision channel by polar quadrature.

    Off-diagonal sector masses of row 0 are integrated adaptively over the
    received phase (the radial integral is analytic); the diagonal is the
    complement.  Remaining rows follow by cyclic shift.
    """
    if K < 2:
        raise ParameterError("K must be at least 2")
    if not sigma2 > 0:
        raise ParameterError("noise variance must be positive")
    gamma = 1.0 / sigma2
    width = 2 * math.pi / K
    row = np.zeros(K)
    errors = []
    for m in range(1, K):
        lo, hi = (m - 0.5) * width, (m + 0.5) * width
        val, err = integrate.quad(_phase_density, lo, hi, args=(gamma,), epsabs=1e-13,
                                  epsrel=1e-12, limit=500)
        row[m] = max(val, 0.0)
        errors.append(err)
    if max(errors) > QUAD_TOLERANCE / K or sum(errors) > QUAD_TOLERANCE:
        raise NumericError(f"quadrature error estimate {sum(errors):.3g} exceeds {QUAD_TOLERANCE}")
    row[0] = 1.0 - math.fsum(row[1:])
    if row[0] < -QUAD_TOLERANCE:
        raise NumericError("sector masses exceed 1")
    row[0] = max(row[0], 0.0)
    entries = np.stack([np.roll(row, k) for k in range(K)])
    return TransitionMatrix(entries, "quadrature")


def transition_matrix_mc(K: int, sigma2: float, n: int, rng: np.random.Generator,
                         chunk: int = 1_000_000) -> TransitionMatrix:
    """Empirical channel law from n simulated transmissions of every index."""
    counts = np.zeros((K, K), dtype=np.int64)
    for k in range(K):
        left = n
        while left:
            m = min(left, chunk)
            rx = extended_channel(np.full(m, k), K, sigma2, rng)
            counts[k] += np.bincount(rx, minlength=K)
            left -= m
    return TransitionMatrix(counts / n, "monte_carlo", counts)


def ser(T: TransitionMatrix) -> float:
    """Symbol error rate under uniform input (1 - T[0,0] for circulant T)."""
    return float(1.0 - np.mean(np.diag(T.entries)))


def capacity_circulant(T: TransitionMatrix, tol: float = 1e-9) -> float:
    """Capacity in bits of a symmetric (circulant) channel: log2 K - H(row)."""
    dev = T.circulant_deviation()
    if dev > tol:
        raise DomainError(f"channel is not circulant (deviation {dev:.3g}); use blahut_arimoto")
    return math.log2(T.K) - T.row_entropy / math.log(2)


def _kl_rows(T: np.ndarray, q: np.ndarray) -> np.ndarray:
    ratio = np.where(T > 0, T / np.where(q > 0, q, 1.0), 1.0)
    return np.sum(np.where(T > 0, T * np.log(ratio), 0.0), axis=1)


def blahut_arimoto(T, tolerance: float = 1e-9, max_iter: int = 100_000) -> tuple[float, np.ndarray]:
    """Capacity (bits) and capacity-achieving input law of a discrete memoryless channel.

    Iterates until the standard bracket ``I(p) <= C <= max_k D(T_k || pT)``
    is narrower than ``tolerance`` bits and returns its midpoint.
    """
    W = np.asarray(getattr(T, "entries", T), dtype=np.float64)
    if W.ndim != 2 or np.any(W < 0) or not np.allclose(W.sum(axis=1), 1.0, atol=1e-9):
        raise StructuralError("channel matrix must be row-stochastic")
    if not tolerance > 0:
        raise ParameterError("tolerance must be positive")
    ln2 = math.log(2)
    p = np.full(W.shape[0], 1.0 / W.shape[0])
    lower = upper = 0.0
    for _ in range(max_iter):
        dk = _kl_rows(W, p @ W)
        lower = float(p @ dk) / ln2
        upper = float(dk.max()) / ln2
        if upper - lower <= tolerance:
            return 0.5 * (lower + upper), p
        p = p * np.exp(dk - dk.max())
        p /= p.sum()
    raise ConvergenceError(f"Blahut-Arimoto did not converge in {max_iter} iterations",
                           bracket=(lower, upper))
