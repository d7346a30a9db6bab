"""Gaussian variational-family primitives.

Posteriors over latent vectors come in two covariance structures: a diagonal
covariance, and a diagonal plus rank-k covariance S = diag(softplus(rho)) + B B^T.
Both admit a closed-form KL divergence to the standard normal and
reparametrized sampling, so objectives stay deterministic functions of the
parameters once the noise is fixed.

All math is 64-bit. Randomness never lives here: callers pass noise in as a
``NoiseDraw``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg
import torch

Tensor = torch.Tensor

# ln(1 + exp(x)) - x drops below 1e-13 past this point, so the stable branch
# x + log1p(exp(-x)) is used there to avoid overflowing exp.
_SOFTPLUS_BRANCH = 30.0


class SingularCovarianceError(RuntimeError):
    """The rank-factor inner matrix is numerically singular (rho underflow)."""


def softplus(x: Union[float, Tensor]) -> Union[float, Tensor]:
    """Overflow-safe ln(1 + exp(x)).

    Computed as max(x, 0) + log1p(exp(-|x|)), which equals the naive formula
    below the branch point and x + log1p(exp(-x)) above it, with no overflow
    anywhere on the real line.
    """
    t = torch.as_tensor(x, dtype=torch.float64)
    out = torch.clamp(t, min=0.0) + torch.log1p(torch.exp(-torch.abs(t)))
    if isinstance(x, Tensor):
        return out
    return float(out)


def softplus_inverse(y: float) -> float:
    """x such that softplus(x) = y, for y > 0."""
    if y <= 0:
        raise ValueError("softplus_inverse requires y > 0")
    return float(np.log(np.expm1(y)))


@dataclass
class DiagGaussian:
    """Gaussian with diagonal covariance; variance(i) = softplus(rho(i))."""

    mean: Tensor
    rho: Tensor

    def __post_init__(self) -> None:
        if self.mean.dim() != 1 or self.mean.shape != self.rho.shape:
            raise ValueError("mean and rho must be 1-D vectors of equal length")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def variance(self) -> Tensor:
        return softplus(self.rho)


@dataclass
class LowRankGaussian:
    """Gaussian with covariance diag(softplus(rho)) + factor @ factor.T.

    The diagonal term is strictly positive, so the implied covariance is
    symmetric positive definite by construction.
    """

    mean: Tensor
    rho: Tensor
    factor: Tensor  # h x k

    def __post_init__(self) -> None:
        if self.mean.dim() != 1 or self.mean.shape != self.rho.shape:
            raise ValueError("mean and rho must be 1-D vectors of equal length")
        if self.factor.dim() != 2 or self.factor.shape[0] != self.mean.shape[0]:
            raise ValueError("factor must be h x k with h = len(mean)")
        if self.factor.shape[1] > self.factor.shape[0]:
            raise ValueError("rank k must not exceed the dimension h")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def variance(self) -> Tensor:
        """Diagonal part softplus(rho) only, excluding the factor term."""
        return softplus(self.rho)

    def covariance(self) -> Tensor:
        """Dense h x h covariance. For tests and small h only."""
        return torch.diag(softplus(self.rho)) + self.factor @ self.factor.T


Posterior = Union[DiagGaussian, LowRankGaussian]


@dataclass
class NoiseDraw:
    """Standard-normal draws, stored so objectives replay deterministically."""

    epsilon: Tensor
    zeta: Optional[Tensor] = None


def kl_diag_to_std(q: DiagGaussian) -> Tensor:
    """Closed-form KL(q || N(0, I)) for a diagonal-covariance Gaussian.

    0.5 * [sum_i (m_i^2 + s2_i) - h - sum_i ln(s2_i)], s2 = softplus(rho).
    """
    s2 = softplus(q.rho)
    return 0.5 * (torch.sum(q.mean * q.mean + s2) - q.dim - torch.sum(torch.log(s2)))


def logdet_lowrank(q: LowRankGaussian) -> Tensor:
    """ln det(diag(s2) + B B^T) without materializing the h x h matrix.

    Matrix-determinant lemma: ln det(I_k + B^T diag(1/s2) B) + sum_i ln(s2_i).
    The k x k determinant goes through a pivoted LU factorization.
    """
    s2 = softplus(q.rho)
    b = q.factor
    k = q.rank
    inner = torch.eye(k, dtype=b.dtype) + b.T @ (b / s2.unsqueeze(1))
    sign, logabs = torch.linalg.slogdet(inner)
    if float(sign.detach()) <= 0.0 or not bool(torch.isfinite(logabs.detach())):
        raise SingularCovarianceError(
            "inner k x k matrix is numerically singular; rho has likely underflowed"
        )
    return logabs + torch.sum(torch.log(s2))


def kl_lowrank_to_std(q: LowRankGaussian) -> Tensor:
    """Closed-form KL(q || N(0, I)) for a diagonal plus low-rank covariance.

    0.5 * [sum_i (m_i^2 + s2_i + sum_j b_ij^2) - h - ln det S]. With a zero
    factor this reduces exactly to the diagonal formula.
    """
    s2 = softplus(q.rho)
    row_sq = torch.sum(q.factor * q.factor, dim=1)
    total = torch.sum(q.mean * q.mean + s2 + row_sq)
    return 0.5 * (total - q.dim - logdet_lowrank(q))


def kl_to_std(q: Posterior) -> Tensor:
    """Dispatch to the closed form matching the posterior's structure."""
    if isinstance(q, LowRankGaussian):
        return kl_lowrank_to_std(q)
    return kl_diag_to_std(q)


def kl_general(
    q_mean: np.ndarray,
    q_cov: np.ndarray,
    p_mean: np.ndarray,
    p_cov: np.ndarray,
) -> float:
    """Exact KL( N(q_mean, q_cov) || N(p_mean, p_cov) ) between dense Gaussians.

    0.5 * [ln(|P|/|Q|) - d + tr(P^-1 Q) + (m_q - m_p)^T P^-1 (m_q - m_p)].
    Reference implementation for validating the structured closed forms;
    O(d^3) and never used in training.
    """
    qm = np.asarray(q_mean, dtype=np.float64)
    pm = np.asarray(p_mean, dtype=np.float64)
    qc = np.asarray(q_cov, dtype=np.float64)
    pc = np.asarray(p_cov, dtype=np.float64)
    d = qm.shape[0]
    if pm.shape != qm.shape or qc.shape != (d, d) or pc.shape != (d, d):
        raise ValueError("mean/covariance dimensions do not agree")
    try:
        lq = np.linalg.cholesky(qc)
    except np.linalg.LinAlgError as exc:
        raise ValueError("first covariance is not positive definite") from exc
    try:
        lp = np.linalg.cholesky(pc)
    except np.linalg.LinAlgError as exc:
        raise ValueError("second covariance is not positive definite") from exc

    logdet_q = 2.0 * float(np.sum(np.log(np.diag(lq))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(lp))))
    p_inv_q = scipy.linalg.cho_solve((lp, True), qc)
    diff = qm - pm
    quad = float(diff @ scipy.linalg.cho_solve((lp, True), diff))
    return 0.5 * (logdet_p - logdet_q - d + float(np.trace(p_inv_q)) + quad)


def sample_diag(q: DiagGaussian, noise: NoiseDraw) -> Tensor:
    """Reparametrized draw mean + sqrt(variance) * epsilon."""
    if noise.epsilon.shape != q.mean.shape:
        raise ValueError("epsilon length does not match the posterior dimension")
    return q.mean + torch.sqrt(softplus(q.rho)) * noise.epsilon


def sample_lowrank(q: LowRankGaussian, noise: NoiseDraw) -> Tensor:
    """Reparametrized draw mean + sqrt(diag variance) * epsilon + B @ zeta.

    Over standard-normal (epsilon, zeta) the draw has mean q.mean and
    covariance diag(softplus(rho)) + B B^T.
    """
    if noise.epsilon.shape != q.mean.shape:
        raise ValueError("epsilon length does not match the posterior dimension")
    if noise.zeta is None or noise.zeta.shape != (q.rank,):
        raise ValueError("low-rank sampling needs a zeta draw of length k")
    return q.mean + torch.sqrt(softplus(q.rho)) * noise.epsilon + q.factor @ noise.zeta


def sample(q: Posterior, noise: NoiseDraw) -> Tensor:
    if isinstance(q, LowRankGaussian):
        return sample_lowrank(q, noise)
    return sample_diag(q, noise)
