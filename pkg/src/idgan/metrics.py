"""Disentanglement (FVM, MIG), fidelity (FID) and alignment (R_ID, GILBO) metrics."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .core import DistributionStats, frechet_distance, log_density
from .data import DSPRITES_FACTORS, fixed_factor_indices, render_sprites
from .errors import (
    DegenerateEncoderError,
    InvalidInputError,
    TrainingFailureError,
    UnsupportedMetricError,
)
from .nets import build_encoder, build_factor_predictor
from .train import aggregated_posterior_sample, downsample

FVM_VARIANCE_THRESHOLD = 0.05
FVM_VOTES = 800
FVM_BATCH = 100
MIG_BINS = 20


def config_hash(config) -> str:
    """sha256 over the canonical JSON encoding of a config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@torch.no_grad()
def encode_means(encoder, dataset, batch=256) -> np.ndarray:
    """Posterior means for every dataset image, as float64."""
    was_training = encoder.training
    encoder.eval()
    res = encoder.spec.input_shape[-1]
    out = []
    for start in range(0, len(dataset), batch):
        x = torch.from_numpy(dataset.as_float(np.arange(start, min(start + batch, len(dataset)))))
        out.append(encoder(downsample(x, res)).mean.double().numpy())
    encoder.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, encoder.c_dim))


def _require_factors(dataset, metric):
    if dataset is None or not dataset.has_factors:
        raise UnsupportedMetricError(f"{metric} needs a dataset with ground-truth factors")


# --------------------------------------------------------------------------
# FactorVAE metric

@dataclass
class FVMResult:
    score: float
    votes: np.ndarray           # K x D_active vote counts
    active_dims: np.ndarray
    records: list = field(repr=False, default_factory=list)   # (factor, winning dim) pairs


def factor_vae_metric(codes, dataset, seed, n_votes=FVM_VOTES, batch=FVM_BATCH,
                      threshold=FVM_VARIANCE_THRESHOLD) -> FVMResult:
    """Majority-vote FactorVAE metric from per-image codes (row i encodes image i)."""
    _require_factors(dataset, "FVM")
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[0] != len(dataset):
        raise InvalidInputError("need one code per dataset image")
    variance = codes.var(axis=0)
    active = np.flatnonzero(variance >= threshold)
    if active.size == 0:
        raise DegenerateEncoderError(f"every latent dimension has variance < {threshold}")
    space = dataset.space
    rng = np.random.default_rng(seed)
    scale = variance[active]
    votes = np.zeros((space.num_factors, active.size), dtype=np.int64)
    records = []
    for _ in range(n_votes):
        k = int(rng.integers(space.num_factors))
        value = int(rng.integers(space.cardinalities[k]))
        idx = fixed_factor_indices(space, k, value, batch, rng)
        local = codes[idx][:, active].var(axis=0) / scale
        winner = int(np.argmin(local))
        votes[k, winner] += 1
        records.append((k, int(active[winner])))
    score = votes.max(axis=0).sum() / n_votes
    return FVMResult(float(score), votes, active, records)


def fvm_score(encoder, dataset, seed, **kw) -> float:
    _require_factors(dataset, "FVM")
    return factor_vae_metric(encode_means(encoder, dataset), dataset, seed, **kw).score


# --------------------------------------------------------------------------
# Mutual information gap

def equal_count_bins(values, bins=MIG_BINS) -> np.ndarray:
    """Rank-based equal-count discretization; tied values share a bin."""
    values = np.asarray(values)
    ranks = rankdata(values, method="min") - 1
    return np.minimum((ranks * bins) // len(values), bins - 1).astype(np.int64)


def discrete_mutual_information(a, b) -> float:
    """Plug-in MI (nats) from the exhaustive contingency table of two label arrays."""
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1.0)
    p = table / table.sum()
    pa, pb = p.sum(1, keepdims=True), p.sum(0, keepdims=True)
    nz = p > 0
    return float(max((p[nz] * np.log(p[nz] / (pa @ pb)[nz])).sum(), 0.0))


def discrete_entropy(labels) -> float:
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


@dataclass
class MIGResult:
    score: float
    per_factor: np.ndarray
    mutual_information: np.ndarray   # D x K
    entropies: np.ndarray
    gap: str


def mig_from_codes(codes, factors, bins=MIG_BINS, gap="second") -> MIGResult:
    """``gap="second"`` subtracts the runner-up MI; ``gap="min"`` the smallest."""
    if gap not in ("second", "min"):
        raise InvalidInputError(f"unknown gap variant {gap!r}")
    if bins < 2:
        raise InvalidInputError("bins must be >= 2")
    codes = np.asarray(codes)
    factors = np.asarray(factors)
    if codes.shape[1] < 2:
        raise InvalidInputError("MIG needs at least two latent dimensions")
    binned = [equal_count_bins(codes[:, j], bins) for j in range(codes.shape[1])]
    k_count = factors.shape[1]
    mi = np.array([[discrete_mutual_information(binned[j], factors[:, k]) for k in range(k_count)]
                   for j in range(codes.shape[1])])
    entropies = np.array([discrete_entropy(factors[:, k]) for k in range(k_count)])
    per_factor = np.zeros(k_count)
    for k in range(k_count):
        if entropies[k] == 0:
            continue
        column = np.sort(mi[:, k])[::-1]
        other = column[1] if gap == "second" else column[-1]
        per_factor[k] = (column[0] - other) / entropies[k]
    valid = entropies > 0
    score = float(per_factor[valid].mean()) if valid.any() else 0.0
    return MIGResult(score, per_factor, mi, entropies, gap)


def mig_score(encoder, dataset, bins=MIG_BINS, gap="second") -> float:
    _require_factors(dataset, "MIG")
    return mig_from_codes(encode_means(encoder, dataset), dataset.factors, bins, gap).score


# --------------------------------------------------------------------------
# Factor predictor and FID

@torch.no_grad()
def extract_features(extractor, images, batch=256) -> np.ndarray:
    """Penultimate features of unit-range N x C x H x W images (tensor or array)."""
    was_training = extractor.training
    extractor.eval()
    res = extractor.spec.input_shape[-1]
    images = torch.as_tensor(images, dtype=torch.float32)
    out = [extractor.features(downsample(images[i:i + batch], res)).double().numpy()
           for i in range(0, len(images), batch)]
    extractor.train(was_training)
    return np.concatenate(out)


@dataclass
class FIDResult:
    value: float
    real: DistributionStats
    fake: DistributionStats
    meta: dict


def fid_from_features(real_features, fake_features) -> FIDResult:
    real = DistributionStats.from_samples(real_features)
    fake = DistributionStats.from_samples(fake_features)
    dim = real.mean.shape[0]
    meta = {"n_real": real.sample_count, "n_fake": fake.sample_count, "feature_dim": dim}
    if min(real.sample_count, fake.sample_count) < dim:
        warnings.warn(f"fewer samples than feature dimensions ({dim}); covariance is singular",
                      stacklevel=2)
    for name, stats in (("real", real), ("fake", fake)):
        eig = np.linalg.eigvalsh(stats.covariance)
        meta[f"{name}_singular"] = bool(eig.min() <= 1e-10 * max(eig.max(), 1e-300))
    return FIDResult(frechet_distance(real, fake), real, fake, meta)


def fid_score(feature_extractor, real_batch, fake_batch) -> float:
    return fid_from_features(extract_features(feature_extractor, real_batch),
                             extract_features(feature_extractor, fake_batch)).value


def split_half_noise_floor(feature_extractor, dataset, n=10_000, seed=0) -> FIDResult:
    """FID between two disjoint random halves of the dataset (``n`` images each)."""
    n = min(n, len(dataset) // 2)
    order = np.random.default_rng(seed).permutation(len(dataset))
    a = extract_features(feature_extractor, dataset.as_float(np.sort(order[:n])))
    b = extract_features(feature_extractor, dataset.as_float(np.sort(order[n:2 * n])))
    return fid_from_features(a, b)


@torch.no_grad()
def sample_generator(generator, n, seed, code_source=None, batch=256) -> torch.Tensor:
    """Unit-range samples; ``code_source(n, torch_generator)`` supplies c (default prior)."""
    gen = torch.Generator().manual_seed(int(seed))
    was_training = generator.training
    generator.eval()
    out = []
    for start in range(0, n, batch):
        m = min(batch, n - start)
        s = torch.randn(m, generator.s_dim, generator=gen)
        c = code_source(m, gen) if code_source is not None else torch.randn(m, generator.c_dim, generator=gen)
        out.append(generator.to_unit(generator.generate(s, c)).clamp(0, 1))
    generator.train(was_training)
    return torch.cat(out)


def same_rendering(dataset, a, b) -> np.ndarray:
    """Whether flat indices ``a`` and ``b`` render to identical sprites.

    Procedural sprites are compared through their masks, so per-image colour or
    background noise does not separate symmetric poses.
    """
    a, b = np.asarray(a), np.asarray(b)
    if tuple(dataset.space.names) == DSPRITES_FACTORS:
        res = dataset.resolution
        return (render_sprites(dataset.space, a, res) == render_sprites(dataset.space, b, res)).all(axis=(1, 2))
    return (dataset.images[a] == dataset.images[b]).all(axis=(1, 2, 3))


def predictor_accuracy(net, dataset, indices, batch=512):
    """Per-factor (raw, up-to-identical-rendering) accuracies on ``indices``."""
    res = net.spec.input_shape[-1]
    factors = dataset.factors
    raw = np.zeros(dataset.space.num_factors)
    visual = np.zeros(dataset.space.num_factors)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for i in range(0, len(indices), batch):
            idx = indices[i:i + batch]
            logits = net(downsample(torch.from_numpy(dataset.as_float(idx)), res))
            truth = factors[idx]
            for k, l in enumerate(logits):
                pred = l.argmax(1).numpy()
                hit = pred == truth[:, k]
                raw[k] += hit.sum()
                miss = np.flatnonzero(~hit)
                if miss.size:
                    alt = truth[miss].copy()
                    alt[:, k] = pred[miss]
                    hit[miss] = same_rendering(dataset, idx[miss], dataset.space.factors_to_index(alt))
                visual[k] += hit.sum()
    net.train(was_training)
    return raw / len(indices), visual / len(indices)


def train_factor_predictor(dataset, steps=20_000, seed=0, batch_size=64, lr=1e-3, target=0.95,
                           eval_every=500, early_stop=True, resolution=None):
    """Multi-head factor classifier; raises TrainingFailureError below ``target``.

    Accuracy counts a prediction as correct when it renders the same image as
    the true factor value (symmetric shapes make some orientations identical).
    The returned network carries ``accuracies`` and ``raw_accuracies``
    (held-out, per factor) and ``trace`` (list of (step, accuracies)).
    """
    _require_factors(dataset, "factor predictor")
    res = dataset.resolution if resolution is None else resolution
    torch.manual_seed(seed)
    net = build_factor_predictor(dataset.space, dataset.channels, res, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    order = np.random.default_rng([int(seed), 0]).permutation(len(dataset))
    n_held = max(1, len(dataset) // 10)
    held, train_idx = np.sort(order[:n_held]), order[n_held:]
    targets = torch.from_numpy(np.array(dataset.factors))

    trace, raw = [], None
    for step in range(1, steps + 1):
        idx = train_idx[np.random.default_rng([int(seed), 1, step]).integers(len(train_idx), size=batch_size)]
        x = downsample(torch.from_numpy(dataset.as_float(idx)), res)
        y = targets[idx]
        loss = sum(F.cross_entropy(l, y[:, k]) for k, l in enumerate(net(x)))
        if not torch.isfinite(loss):
            raise TrainingFailureError(f"factor predictor diverged at step {step}", {"step": step})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % eval_every == 0 or step == steps:
            raw, acc = predictor_accuracy(net, dataset, held)
            trace.append((step, acc.tolist()))
            if early_stop and acc.min() >= target:
                break
    if not trace:
        raw, acc = predictor_accuracy(net, dataset, held)
    if acc.min() < target:
        named = dict(zip(dataset.space.names, acc.round(4).tolist()))
        raise TrainingFailureError(f"factor predictor below {target} held-out accuracy: {named}", named)
    net.eval()
    net.accuracies = dict(zip(dataset.space.names, acc.tolist()))
    net.raw_accuracies = dict(zip(dataset.space.names, raw.tolist()))
    net.trace = trace
    return net


# --------------------------------------------------------------------------
# Alignment: R_ID estimate and GILBO

@dataclass
class Estimate:
    value: float
    stderr: float
    n: int

    def __iter__(self):
        return iter((self.value, self.stderr))


@torch.no_grad()
def _log_likelihoods(encoder, generator, s, c, batch=256):
    res = encoder.spec.input_shape[-1]
    out = []
    for i in range(0, len(c), batch):
        x = generator.to_unit(generator.generate(s[i:i + batch], c[i:i + batch]))
        out.append(log_density(encoder(downsample(x, res)), c[i:i + batch]).double())
    return torch.cat(out).numpy()


def posterior_code_source(encoder, dataset):
    """``code_source`` drawing c from the aggregated posterior q(c) of ``encoder``."""
    res = encoder.spec.input_shape[-1]

    @torch.no_grad()
    def draw(m, gen):
        idx = torch.randint(len(dataset), (m,), generator=gen).numpy()
        q = encoder(downsample(torch.from_numpy(dataset.as_float(idx)), res))
        return q.mean + q.std * torch.randn(q.mean.shape, generator=gen)

    return draw


def _estimate(values):
    values = np.asarray(values, dtype=np.float64)
    se = values.std(ddof=1) / math.sqrt(len(values)) if len(values) > 1 else float("nan")
    return Estimate(float(values.mean()), float(se), len(values))


def _prepare(*modules):
    states = [m.training for m in modules]
    for m in modules:
        m.eval()
    return states


def estimate_r_id(generator, encoder, dataset, n=10_000, seed=0) -> Estimate:
    """Mean log q(c | downsample(G(s, c))) with c from the aggregated posterior, s from the prior."""
    states = _prepare(generator, encoder)
    c = aggregated_posterior_sample(encoder, dataset, n, seed)
    s = torch.randn(n, generator.s_dim, generator=torch.Generator().manual_seed(int(seed) + 1))
    est = _estimate(_log_likelihoods(encoder, generator, s, c))
    for m, st in zip((generator, encoder), states):
        m.train(st)
    return est


@dataclass
class GILBOResult(Estimate):
    steps_run: int = 0
    history: list = field(default_factory=list, repr=False)


def gilbo(generator, n=10_000, optimization_steps=5000, seed=0, code_source=None, init_encoder=None,
          resolution=None, patience=500, batch_size=64, lr=1e-4, eval_every=100) -> GILBOResult:
    """Generative information lower bound (entropy term excluded).

    A fresh auxiliary encoder (or a copy of ``init_encoder``) is trained to
    maximize mean log e(c | G(s, c)).  Checkpoint selection uses one set of
    ``n`` pairs; the reported value comes from an independent set of ``n``.
    """
    states = _prepare(generator)
    gen = torch.Generator().manual_seed(int(seed))

    def codes(m):
        if code_source is not None:
            return code_source(m, gen)
        return torch.randn(m, generator.c_dim, generator=gen)

    def pairs(m):
        s = torch.randn(m, generator.s_dim, generator=gen)
        c = codes(m)
        return s, c

    with torch.no_grad():
        probe = generator.to_unit(generator.generate(*pairs(1)))
    channels, native = probe.shape[1], probe.shape[-1]
    if init_encoder is not None:
        aux = copy.deepcopy(init_encoder)
        aux.requires_grad_(True)
    else:
        res = resolution if resolution is not None else native
        aux = build_encoder(generator.c_dim, channels, res, seed=int(seed) + 7)
    aux.train()
    res = aux.spec.input_shape[-1]
    opt = torch.optim.Adam(aux.parameters(), lr=lr, betas=(0.9, 0.999))
    select_s, select_c = pairs(n)
    report_s, report_c = pairs(n)

    def select_value():
        aux.eval()
        v = float(_log_likelihoods(aux, generator, select_s, select_c).mean())
        aux.train()
        return v

    best_value, best_state, best_step = select_value(), copy.deepcopy(aux.state_dict()), 0
    history = [(0, best_value)]
    step = 0
    for step in range(1, optimization_steps + 1):
        s, c = pairs(batch_size)
        with torch.no_grad():
            x = downsample(generator.to_unit(generator.generate(s, c)), res)
        loss = -log_density(aux(x), c).mean()
        if not torch.isfinite(loss):
            raise TrainingFailureError(f"auxiliary encoder diverged at step {step}", {"step": step})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % eval_every == 0:
            value = select_value()
            history.append((step, value))
            if not math.isfinite(value):
                raise TrainingFailureError(f"auxiliary encoder diverged at step {step}", {"step": step})
            if value > best_value:
                best_value, best_state, best_step = value, copy.deepcopy(aux.state_dict()), step
            elif step - best_step >= patience:
                break
    aux.load_state_dict(best_state)
    aux.eval()
    est = _estimate(_log_likelihoods(aux, generator, report_s, report_c))
    generator.train(states[0])
    return GILBOResult(est.value, est.stderr, est.n, steps_run=step, history=history)


# --------------------------------------------------------------------------
# Reporting

def _mean(values):
    return math.fsum(values) / len(values)


def _std(values):
    """Population standard deviation by the two-pass formula."""
    m = _mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / len(values))


@dataclass
class MetricReport:
    metric: str
    values: dict                 # seed -> value
    config_hash: str = ""

    def __post_init__(self):
        if not self.values:
            raise InvalidInputError("a metric report needs at least one seed")
        self.values = {int(k): float(v) for k, v in self.values.items()}

    @property
    def seeds(self):
        return sorted(self.values)

    @property
    def mean(self):
        return _mean([self.values[s] for s in self.seeds])

    @property
    def std(self):
        return _std([self.values[s] for s in self.seeds])

    def csv_rows(self):
        return [(self.metric, seed, repr(self.values[seed])) for seed in self.seeds]

    def summary(self):
        return {"metric": self.metric, "mean": self.mean, "std": self.std, "n": len(self.values),
                "seeds": self.seeds, "config_hash": self.config_hash}

    @classmethod
    def from_rows(cls, rows, config_hash=""):
        """Group (metric, seed, value) rows into one report per metric."""
        grouped = {}
        for metric, seed, value in rows:
            grouped.setdefault(metric, {})[int(seed)] = float(value)
        return {m: cls(m, v, config_hash) for m, v in grouped.items()}

    @classmethod
    def merge(cls, reports):
        """Combine single-seed reports of one metric."""
        reports = list(reports)
        values = {}
        for r in reports:
            values.update(r.values)
        return cls(reports[0].metric, values, reports[0].config_hash)
