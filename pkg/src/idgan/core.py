"""Distribution arithmetic, likelihood terms and the discrete identity checkers.

Gaussian quantities are computed with torch so they can sit inside training
losses; Frechet distance and the discrete divergences use numpy in float64.
All logarithms are natural (nats).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError

LOG_2PI = math.log(2.0 * math.pi)


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@dataclass
class DiagonalGaussian:
    """Diagonal Gaussian over the last axis; leading axes are batch axes."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.log_variance = _as_tensor(self.log_variance, like=self.mean)
        if self.mean.shape != self.log_variance.shape:
            raise InvalidInputError(
                f"mean shape {tuple(self.mean.shape)} != log_variance shape "
                f"{tuple(self.log_variance.shape)}")
        if self.mean.dim() == 0 or self.mean.shape[-1] < 1:
            raise InvalidInputError("latent dimension must be >= 1")

    @classmethod
    def standard(cls, dim, dtype=torch.float64):
        return cls(torch.zeros(dim, dtype=dtype), torch.zeros(dim, dtype=dtype))

    @classmethod
    def from_stacked(cls, stacked):
        """Split an encoder head of width ``2 * dim`` into mean and log-variance."""
        mean, log_variance = stacked.chunk(2, dim=-1)
        return cls(mean, log_variance)

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def std(self):
        return torch.exp(0.5 * self.log_variance)

    def check_finite(self):
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_variance).all()):
            raise InvalidInputError("DiagonalGaussian has non-finite entries")
        return self

    def detach(self):
        return DiagonalGaussian(self.mean.detach(), self.log_variance.detach())


def gaussian_kl_to_standard(q: DiagonalGaussian) -> torch.Tensor:
    """KL(q || N(0, I)) summed over the latent axis (one value per batch row)."""
    q.check_finite()
    lv = q.log_variance
    return 0.5 * (q.mean.pow(2) + torch.expm1(lv) - lv).sum(-1)


def reparameterize(q: DiagonalGaussian, noise) -> torch.Tensor:
    noise = _as_tensor(noise, like=q.mean)
    if noise.shape[-1] != q.dim:
        raise InvalidInputError(f"noise length {noise.shape[-1]} != latent dim {q.dim}")
    return q.mean + q.std * noise


def log_density(q: DiagonalGaussian, c) -> torch.Tensor:
    c = _as_tensor(c, like=q.mean)
    if c.shape[-1] != q.dim:
        raise InvalidInputError(f"point dimension {c.shape[-1]} != latent dim {q.dim}")
    lv = q.log_variance
    return (-0.5 * LOG_2PI - 0.5 * lv - (c - q.mean).pow(2) / (2.0 * lv.exp())).sum(-1)


def bernoulli_reconstruction_nll(x, logits) -> torch.Tensor:
    """Per-sample summed binary cross-entropy, averaged over the batch axis."""
    x = _as_tensor(x)
    logits = _as_tensor(logits, like=x)
    if x.shape != logits.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x.shape)} vs {tuple(logits.shape)}")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise InvalidInputError("targets must lie in [0, 1]")
    per_pixel = F.binary_cross_entropy_with_logits(logits, x.to(logits.dtype), reduction="none")
    if per_pixel.dim() == 0:
        return per_pixel
    return per_pixel.reshape(per_pixel.shape[0], -1).sum(1).mean()


# --------------------------------------------------------------------------
# Frechet distance

@dataclass(frozen=True)
class DistributionStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise InvalidInputError(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        if self.sample_count < 1:
            raise InvalidInputError("sample_count must be positive")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise InvalidInputError("statistics contain non-finite values")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-8:
            raise InvalidInputError("covariance is not symmetric")
        if mean.size and np.linalg.eigvalsh(cov).min() < -1e-8:
            raise InvalidInputError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def from_samples(cls, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise InvalidInputError("need a (n >= 2, d) feature matrix")
        cov = np.cov(features, rowvar=False)
        cov = np.atleast_2d(0.5 * (cov + cov.T))
        return cls(features.mean(0), cov, features.shape[0])


def _psd_sqrt(matrix, tol=1e-6):
    vals, vecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    if vals.size and vals.min() < -tol * max(1.0, np.abs(vals).max()):
        raise InvalidInputError(f"matrix not PSD (min eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: DistributionStats, b: DistributionStats) -> float:
    """Squared Frechet distance between the Gaussians fitted to ``a`` and ``b``.

    The trace of (Sa Sb)^(1/2) is taken as the trace of the square root of the
    symmetric PSD matrix Sa^(1/2) Sb Sa^(1/2), so only symmetric
    eigendecompositions are needed.
    """
    if a.mean.shape != b.mean.shape:
        raise InvalidInputError(f"dimension mismatch {a.mean.size} vs {b.mean.size}")
    sqrt_a = _psd_sqrt(a.covariance)
    middle = sqrt_a @ b.covariance @ sqrt_a
    vals = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    scale = max(1.0, np.abs(vals).max(initial=0.0))
    if vals.size and vals.min() < -1e-6 * scale:
        raise InvalidInputError(f"product covariance not PSD (min eigenvalue {vals.min():.3e})")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt
    # round-off floor: identical inputs must give exactly zero
    floor = 1e-10 * (1.0 + np.trace(a.covariance) + np.trace(b.covariance) + diff @ diff)
    return float(value) if value > floor else 0.0


# --------------------------------------------------------------------------
# Discrete distributions

@dataclass(frozen=True)
class DiscreteJoint:
    """A normalized probability table over a finite product space."""

    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.size == 0:
            raise InvalidInputError("empty support")
        if (table < 0).any() or not np.isfinite(table).all():
            raise InvalidInputError("probabilities must be finite and nonnegative")
        if abs(table.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"table sums to {table.sum():.15f}, not 1")
        object.__setattr__(self, "table", table)

    @property
    def support_sizes(self):
        return self.table.shape


def _table(p):
    return p.table if isinstance(p, DiscreteJoint) else DiscreteJoint(p).table


def discrete_kl(p, q) -> float:
    """KL(p || q) in nats; ``inf`` when p puts mass where q has none."""
    p, q = _table(p), _table(q)
    if p.shape != q.shape:
        raise InvalidInputError(f"support mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    if (q[mask] == 0).any():
        return math.inf
    return float(max(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))), 0.0))


def discrete_jsd(p, q) -> float:
    """Jensen-Shannon divergence, bounded by ln 2."""
    p, q = _table(p), _table(q)
    if p.shape != q.shape:
        raise InvalidInputError(f"support mismatch {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * (discrete_kl(p, m) + discrete_kl(q, m))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _expected_log(weights, values):
    """sum(weights * values) treating 0 * (-inf) as 0."""
    mask = weights > 0
    return float(np.sum(weights[mask] * values[mask]))


# --------------------------------------------------------------------------
# Toy models for the divergence identities

@dataclass
class DiscreteToy:
    """Finite stand-in for the generator setting.

    ``generator[s, c]`` is the output symbol x of a deterministic G(s, c);
    ``posterior[x, c]`` is q(c | x); ``prior_c`` is p(c); ``data_x`` is p(x).
    """

    prior_s: np.ndarray
    prior_c: np.ndarray
    generator: np.ndarray
    posterior: np.ndarray
    data_x: np.ndarray = field(default=None)

    def __post_init__(self):
        self.prior_s = DiscreteJoint(self.prior_s).table
        self.prior_c = DiscreteJoint(self.prior_c).table
        self.generator = np.asarray(self.generator, dtype=np.int64)
        self.posterior = np.asarray(self.posterior, dtype=np.float64)
        n_s, n_c = self.prior_s.size, self.prior_c.size
        if self.generator.shape != (n_s, n_c):
            raise InvalidInputError(f"generator table must be {(n_s, n_c)}, got {self.generator.shape}")
        n_x = self.posterior.shape[0]
        if self.posterior.ndim != 2 or self.posterior.shape[1] != n_c:
            raise InvalidInputError("posterior must be an |X| x |C| table")
        if self.generator.min() < 0 or self.generator.max() >= n_x:
            raise InvalidInputError("generator emits symbols outside X")
        if (self.posterior < 0).any() or np.abs(self.posterior.sum(1) - 1).max() > 1e-12:
            raise InvalidInputError("posterior rows must be distributions")
        if self.data_x is None:
            self.data_x = np.full(n_x, 1.0 / n_x)
        self.data_x = DiscreteJoint(self.data_x).table
        if self.data_x.size != n_x:
            raise InvalidInputError("data marginal must live on X")

    @classmethod
    def random(cls, rng, max_support=5, min_support=2, sparse=False, covering=False):
        """Draw a toy with supports in [min_support, max_support].

        With ``sparse`` some probabilities are exactly zero, exercising the
        infinite-divergence paths.  With ``covering`` every column G(., c) hits
        every symbol of X, so the model joint has the same support as the data
        joint and all KL terms of the cGAN decomposition are finite.
        """
        n_s, n_c, n_x = (int(rng.integers(min_support, max_support + 1)) for _ in range(3))
        if covering:
            n_x = min(n_x, n_s)

        def simplex(*shape):
            w = rng.gamma(1.0, size=shape)
            if sparse:
                w = w * (rng.random(shape) > 0.3)
                w[..., rng.integers(shape[-1])] += 1e-3
            return w / w.sum(-1, keepdims=True)

        if covering:
            generator = np.stack([rng.permutation(np.resize(np.arange(n_x), n_s))
                                  for _ in range(n_c)], axis=1)
        else:
            generator = rng.integers(n_x, size=(n_s, n_c))
        return cls(prior_s=simplex(n_s), prior_c=simplex(n_c), generator=generator,
                   posterior=simplex(n_x, n_c), data_x=simplex(n_x))

    @property
    def aggregated_posterior(self):
        """q(c) = sum_x p(x) q(c|x)."""
        return self.data_x @ self.posterior

    def posterior_at_outputs(self):
        """q(c' | G(s, c)) as an array indexed [s, c, c']."""
        return self.posterior[self.generator]


@dataclass(frozen=True)
class ForwardKLCheck:
    mutual_information_bound: float
    negative_expected_kl: float
    residual: float
    finite: bool


def verify_infogan_forward_kl(toy: DiscreteToy) -> ForwardKLCheck:
    """Compare E[log q(c|G(s,c))] + H(c) against -E_s KL(p(c) || q(c|G(s,c))).

    Both sides are evaluated by exhaustive enumeration over S x C.  If q puts
    zero mass on a needed code both sides are -inf; the check then reports
    ``finite=False`` and an infinite residual.
    """
    p_s, p_c = toy.prior_s, toy.prior_c
    q_out = toy.posterior_at_outputs()
    with np.errstate(divide="ignore"):
        log_q = np.log(q_out)
    # log q(c | G(s, c)) for the matching code c
    idx = np.arange(p_c.size)
    log_q_diag = log_q[:, idx, idx]
    weights = p_s[:, None] * p_c[None, :]
    if ((weights > 0) & np.isneginf(log_q_diag)).any():
        return ForwardKLCheck(-math.inf, -math.inf, math.inf, False)
    lhs = _expected_log(weights, log_q_diag) + entropy(p_c)
    rhs = 0.0
    for s in range(p_s.size):
        if p_s[s] == 0:
            continue
        # KL(p(c) || q(c | G(s, c))): the conditioning point moves with c, so
        # the sum runs over the diagonal of the [c, c'] table.
        mask = p_c > 0
        terms = p_c[mask] * (np.log(p_c[mask]) - log_q_diag[s][mask])
        rhs -= p_s[s] * terms.sum()
    return ForwardKLCheck(lhs, float(rhs), abs(lhs - rhs), True)


@dataclass(frozen=True)
class CGANCheck:
    """Terms of the joint-JSD decomposition for one toy.

    ``residual`` compares 2*JSD against the decomposed right-hand side, as the
    identity is written; ``expansion_residual`` compares the symmetric KL sum
    KL(pd||pG) + KL(pG||pd) against the same right-hand side.
    """

    two_jsd: float
    kl_data_to_model: float
    kl_model_to_data: float
    conditional_kl: float
    r_id: float
    rhs: float
    residual: float
    expansion_residual: float
    finite: bool


def _joint_tables(toy):
    q_c = toy.aggregated_posterior
    n_x = toy.posterior.shape[0]
    p_data = toy.data_x[:, None] * toy.posterior              # [x, c]
    p_g_x_given_c = np.zeros((n_x, q_c.size))                 # [x, c]
    for s in range(toy.prior_s.size):
        for c in range(q_c.size):
            p_g_x_given_c[toy.generator[s, c], c] += toy.prior_s[s]
    p_model = p_g_x_given_c * q_c[None, :]
    return q_c, p_data, p_g_x_given_c, p_model


def distillation_regularizer(toy: DiscreteToy) -> float:
    """R_ID = E_{s, c~q(c)}[log q(c | G(s,c))] + H(q(c)); -inf when undefined."""
    q_c = toy.aggregated_posterior
    q_out = toy.posterior_at_outputs()
    idx = np.arange(q_c.size)
    with np.errstate(divide="ignore"):
        log_q_diag = np.log(q_out[:, idx, idx])
    weights = toy.prior_s[:, None] * q_c[None, :]
    if ((weights > 0) & np.isneginf(log_q_diag)).any():
        return -math.inf
    return _expected_log(weights, log_q_diag) + entropy(q_c)


def verify_cgan_decomposition(toy: DiscreteToy) -> CGANCheck:
    """Evaluate both sides of the cGAN/R_ID decomposition by enumeration.

    Real joint p_d(x,c) = p(x) q(c|x); model joint p_G(x,c) = q(c) p_G(x|c)
    with p_G(x|c) = sum_s p(s) 1{x = G(s,c)}.
    """
    q_c, p_data, p_g_cond, p_model = _joint_tables(toy)
    two_jsd = 2.0 * discrete_jsd(p_data, p_model)
    kl_dm = discrete_kl(p_data, p_model)
    kl_md = discrete_kl(p_model, p_data)
    cond = 0.0
    for c in range(q_c.size):
        if q_c[c] > 0:
            cond += q_c[c] * discrete_kl(p_g_cond[:, c], toy.data_x)
    r_id = distillation_regularizer(toy)
    rhs = kl_dm + cond - r_id
    finite = all(math.isfinite(v) for v in (kl_dm, kl_md, cond, r_id))
    if finite:
        residual = abs(two_jsd - rhs)
        expansion = abs(kl_dm + kl_md - rhs)
    else:
        residual = expansion = math.inf
    return CGANCheck(two_jsd, kl_dm, kl_md, cond, r_id, rhs, residual, expansion, finite)
