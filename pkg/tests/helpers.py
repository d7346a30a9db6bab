"""Shared test oracles and builders.

The Monte Carlo KL oracle evaluates the exact sample average of
log q(x) - log p(x) over a shared bank of standard-normal draws. The
average is computed through the draws' sufficient statistics (column means
and second-moment matrices), which equals the naive streaming loop to
floating-point reassociation error but runs in O(h^2) per posterior.
"""

from __future__ import annotations

import numpy as np
import torch

from paramfactor.config import stream
from paramfactor.elbo import NoiseBank
from paramfactor.gauss import (
    DiagGaussian,
    LowRankGaussian,
    softplus,
    softplus_inverse,
)
from paramfactor.hypernet import HyperNet, HyperNetDims, init_hypernet


def tensor(values, requires_grad=False):
    t = torch.as_tensor(np.asarray(values, dtype=np.float64))
    if requires_grad:
        t.requires_grad_(True)
    return t


def diag_posterior(mean, variance) -> DiagGaussian:
    rho = [softplus_inverse(v) for v in np.atleast_1d(np.asarray(variance, dtype=np.float64))]
    return DiagGaussian(tensor(np.atleast_1d(mean)), tensor(rho))


def lowrank_posterior(mean, variance, factor) -> LowRankGaussian:
    rho = [softplus_inverse(v) for v in np.atleast_1d(np.asarray(variance, dtype=np.float64))]
    return LowRankGaussian(tensor(np.atleast_1d(mean)), tensor(rho), tensor(factor))


class MCBank:
    """A shared bank of standard-normal draws with cached moment statistics."""

    def __init__(self, n: int, h_max: int, k_max: int, seed: int = 0) -> None:
        rng = stream(seed, "mc-bank")
        self.n = n
        self.eps = rng.standard_normal((n, h_max))
        self.zeta = rng.standard_normal((n, k_max))
        self.eps_mean = self.eps.mean(axis=0)
        self.zeta_mean = self.zeta.mean(axis=0)
        self.m_ee = self.eps.T @ self.eps / n
        self.m_ez = self.eps.T @ self.zeta / n
        self.m_zz = self.zeta.T @ self.zeta / n


def mc_kl_diag(q: DiagGaussian, bank: MCBank) -> float:
    """Sample average over the bank of log q - log p for x = m + s * eps.

    log q(x) - log p(x) = 0.5 (|x|^2 - |eps|^2) - sum log s; averaging the
    affine-in-(eps, eps^2) terms uses the bank's column statistics.
    """
    h = q.dim
    m = q.mean.detach().numpy()
    s2 = softplus(q.rho).detach().numpy()
    s = np.sqrt(s2)
    e_mean = bank.eps_mean[:h]
    e2_mean = np.diag(bank.m_ee)[:h]
    mean_x2 = float((m * m).sum() + 2 * (m * s * e_mean).sum() + (s2 * e2_mean).sum())
    mean_e2 = float(e2_mean.sum())
    return 0.5 * (mean_x2 - mean_e2) - 0.5 * float(np.log(s2).sum())


def mc_kl_lowrank(q: LowRankGaussian, bank: MCBank) -> float:
    """Sample average of log q - log p for x = m + s * eps + B zeta.

    Quadratic forms in y = x - m average to traces against the bank's
    second-moment matrices.
    """
    h, k = q.dim, q.rank
    m = q.mean.detach().numpy()
    s2 = softplus(q.rho).detach().numpy()
    s = np.sqrt(s2)
    b = q.factor.detach().numpy()

    cov = np.diag(s2) + b @ b.T
    cov_inv = np.linalg.inv(cov)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0

    m_ee = bank.m_ee[:h, :h]
    m_ez = bank.m_ez[:h, :k]
    m_zz = bank.m_zz[:k, :k]
    # M_yy = E[y y^T] over the bank with y = diag(s) eps + B zeta
    sb = s[:, None] * (m_ez @ b.T)
    m_yy = (s[:, None] * s[None, :]) * m_ee + sb + sb.T + b @ m_zz @ b.T
    y_mean = s * bank.eps_mean[:h] + b @ bank.zeta_mean[:k]

    mean_x2 = float((m * m).sum() + 2 * (m * y_mean).sum() + np.trace(m_yy))
    mean_quad = float(np.trace(cov_inv @ m_yy))
    return 0.5 * mean_x2 - 0.5 * mean_quad - 0.5 * float(logdet)


def zero_noise_bank(h: int, k: int | None, d: int, V: int) -> NoiseBank:
    """Replay bank of all-zero draws for V samples of one cell step."""
    record = {}
    for v in range(V):
        record[f"{v}/task.eps"] = torch.zeros(h, dtype=torch.float64)
        record[f"{v}/lang.eps"] = torch.zeros(h, dtype=torch.float64)
        if k is not None:
            record[f"{v}/task.zeta"] = torch.zeros(k, dtype=torch.float64)
            record[f"{v}/lang.zeta"] = torch.zeros(k, dtype=torch.float64)
        record[f"{v}/theta"] = torch.zeros(d, dtype=torch.float64)
    return NoiseBank.replay(record)


def zero_hypernet(dims: HyperNetDims) -> HyperNet:
    """All weights and biases exactly zero."""
    net = init_hypernet(dims, seed=0)
    with torch.no_grad():
        for w, b in net.shared:
            w.zero_()
            b.zero_()
        net.psi_weight.zero_()
        net.psi_bias.zero_()
        net.phi_weight.zero_()
        net.phi_bias.zero_()
    return net


def finite_difference(closure, param: torch.Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar closure w.r.t. every entry."""
    grad = np.zeros(param.numel())
    flat = param.data.view(-1)
    for i in range(param.numel()):
        orig = float(flat[i])
        flat[i] = orig + step
        up = float(closure())
        flat[i] = orig - step
        down = float(closure())
        flat[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad.reshape(tuple(param.shape))


def max_relative_grad_error(
    closure, params: dict[str, torch.Tensor], step: float = 1e-5, threshold: float = 1e-6
) -> float:
    """Largest relative disagreement between autograd and finite differences
    over every coordinate whose analytic gradient exceeds the threshold."""
    from paramfactor.elbo import gradient

    grads = gradient(closure, params)
    worst = 0.0
    for name, p in params.items():
        analytic = grads[name].detach().numpy()
        numeric = finite_difference(closure, p, step)
        mask = np.abs(analytic) > threshold
        if mask.any():
            rel = np.abs(analytic - numeric)[mask] / np.abs(analytic)[mask]
            worst = max(worst, float(rel.max()))
    return worst
