"""Stage-1 (VAE family) and stage-2 (adversarial) training.

Randomness is index-based: every step draws its data indices and noise from
streams keyed by ``(seed, step, stream)``, so a run resumed from a checkpoint
replays exactly the draws an uninterrupted run would have made.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    bernoulli_reconstruction_nll,
    gaussian_kl_to_standard,
    log_density,
    reparameterize,
)
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    ShapeError,
    TrainingDivergenceError,
)
from .nets import (
    DecoderGenerator,
    Encoder,
    build_decoder,
    build_encoder,
    build_gan_pair,
    build_tc_discriminator,
    freeze,
    load_checkpoint,
    load_module,
    module_tensors,
    parameter_hash,
    save_checkpoint,
)

VAE_OBJECTIVES = ("vae", "beta-vae", "factor-vae")
GAN_MODES = ("idgan", "idgan-e2e", "idgan-no-distill", "gan", "infogan", "cgan", "vaegan")
FROZEN_ENCODER_MODES = ("idgan", "idgan-no-distill", "cgan")

# stream ids for per-step random draws
_DATA, _NOISE, _CODE_DATA, _CODE_NOISE, _PERM = range(5)


# --------------------------------------------------------------------------
# Configuration

def _pair(value, name):
    value = tuple(float(v) for v in value)
    if len(value) != 2 or not all(0 <= v < 1 for v in value):
        raise InvalidConfigError("expected two momentum terms in [0, 1)", name)
    return value


def _positive(value, name, integer=True):
    if integer and (int(value) != value or value < 1):
        raise InvalidConfigError("must be a positive integer", name)
    if not integer and not value > 0:
        raise InvalidConfigError("must be positive", name)


@dataclass
class VAEStageConfig:
    """``beta``/``gamma`` default per objective: vae (1, 0), beta-vae (4, 0), factor-vae (1, 10)."""

    objective: str = "beta-vae"
    beta: float | None = None
    gamma: float | None = None
    c_dim: int = 10
    steps: int = 30_000
    batch_size: int = 64
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    tc_lr: float = 1e-4
    tc_betas: tuple = (0.5, 0.9)
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if self.objective not in VAE_OBJECTIVES:
            raise InvalidConfigError(f"unknown objective {self.objective!r}", "stage1.objective")
        default_beta = 4.0 if self.objective == "beta-vae" else 1.0
        self.beta = default_beta if self.beta is None else float(self.beta)
        if self.objective == "vae" and self.beta != 1.0:
            raise InvalidConfigError("the plain VAE objective fixes beta = 1", "stage1.beta")
        if self.beta < 0:
            raise InvalidConfigError("must be nonnegative", "stage1.beta")
        if self.gamma is None:
            self.gamma = 10.0 if self.objective == "factor-vae" else 0.0
        self.gamma = float(self.gamma)
        if self.gamma < 0:
            raise InvalidConfigError("must be nonnegative", "stage1.gamma")
        if self.gamma and self.objective != "factor-vae":
            raise InvalidConfigError("gamma applies to factor-vae only", "stage1.gamma")
        for name in ("c_dim", "steps", "batch_size", "checkpoint_every", "log_every"):
            _positive(getattr(self, name), f"stage1.{name}")
        if self.objective == "factor-vae" and self.batch_size < 2:
            raise InvalidConfigError("factor-vae needs batches of at least 2", "stage1.batch_size")
        for name in ("lr", "tc_lr"):
            _positive(getattr(self, name), f"stage1.{name}", integer=False)
        self.betas = _pair(self.betas, "stage1.betas")
        self.tc_betas = _pair(self.tc_betas, "stage1.tc_betas")


@dataclass
class GANStageConfig:
    """Stage-2 settings.  ``lam`` is the distillation weight (InfoGAN's
    information weight in infogan mode).  It is held at zero for the first
    ``lam_delay`` steps, then reached linearly over ``lam_warmup`` steps; ``beta`` and ``adv_weight`` apply to the jointly
    trained modes only."""

    mode: str = "idgan"
    lam: float = 0.1
    lam_warmup: int = 0
    lam_delay: int = 0
    s_dim: int = 0
    c_dim: int = 10
    arch: str = "mirror"
    resolution: int | None = None
    steps: int = 50_000
    batch_size: int = 64
    g_lr: float = 1e-4
    d_lr: float = 4e-4
    betas: tuple = (0.5, 0.999)
    enc_lr: float = 1e-4
    enc_betas: tuple = (0.9, 0.999)
    d_steps: int = 1
    r1_gamma: float = 0.0
    g_norm: bool = False
    beta: float = 4.0
    adv_weight: float = 1.0
    encoder_path: str | None = None
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in GAN_MODES:
            raise InvalidConfigError(f"unknown mode {self.mode!r}", "stage2.mode")
        self.lam = float(self.lam)
        if not 0.0 <= self.lam <= 10.0:
            raise InvalidConfigError("lambda must lie in [0, 10]", "stage2.lambda")
        for name in ("lam_warmup", "lam_delay"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise InvalidConfigError("must be a nonnegative integer", f"stage2.{name}")
        if self.arch not in ("mirror", "resnet"):
            raise InvalidConfigError(f"unknown architecture {self.arch!r}", "stage2.arch")
        if self.mode == "vaegan" and self.arch != "mirror":
            raise InvalidConfigError("vaegan uses the mirror architecture", "stage2.arch")
        if int(self.s_dim) != self.s_dim or self.s_dim < 0:
            raise InvalidConfigError("must be a nonnegative integer", "stage2.s_dim")
        for name in ("c_dim", "steps", "batch_size", "d_steps", "checkpoint_every", "log_every"):
            _positive(getattr(self, name), f"stage2.{name}")
        for name in ("g_lr", "d_lr", "enc_lr"):
            _positive(getattr(self, name), f"stage2.{name}", integer=False)
        if not isinstance(self.g_norm, bool):
            raise InvalidConfigError("must be true or false", "stage2.g_norm")
        self.r1_gamma = float(self.r1_gamma)
        if self.r1_gamma < 0:
            raise InvalidConfigError("must be nonnegative", "stage2.r1_gamma")
        if self.beta < 0 or self.adv_weight < 0:
            raise InvalidConfigError("weights must be nonnegative", "stage2.beta")
        self.betas = _pair(self.betas, "stage2.betas")
        self.enc_betas = _pair(self.enc_betas, "stage2.enc_betas")

    @property
    def uses_frozen_encoder(self):
        return self.mode in FROZEN_ENCODER_MODES


class LatentCode(NamedTuple):
    s: torch.Tensor
    c: torch.Tensor

    @property
    def z(self):
        return torch.cat([self.s, self.c], dim=-1)


# --------------------------------------------------------------------------
# Random streams

def step_rng(seed, step, stream) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(step), int(stream)])


def step_generator(seed, step, stream) -> torch.Generator:
    words = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(step), int(stream)]
                                   ).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(words[0]) << 31 ^ int(words[1]))


def _randn(shape, gen, like=None):
    dtype = like.dtype if like is not None else torch.float32
    return torch.randn(shape, generator=gen, dtype=dtype)


# --------------------------------------------------------------------------
# Losses

def _finite(step, **terms):
    for name, value in terms.items():
        v = value.detach() if torch.is_tensor(value) else torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise TrainingDivergenceError("non-finite value", step=step, term=name)


class VAELoss(NamedTuple):
    total: torch.Tensor
    reconstruction: torch.Tensor
    kl: torch.Tensor


def _vae_forward(x, encoder, decoder, beta, noise, step=None):
    q = encoder(x)
    _finite(step, posterior_mean=q.mean, posterior_log_variance=q.log_variance)
    if noise is None:
        noise = torch.randn_like(q.mean)
    c = reparameterize(q, noise)
    rec = bernoulli_reconstruction_nll(x, decoder(c))
    kl = gaussian_kl_to_standard(q).mean()
    total = rec + beta * kl
    _finite(step, reconstruction=rec, kl=kl, total=total)
    return VAELoss(total, rec, kl), q, c


def vae_loss(x, encoder, decoder, beta, noise=None, step=None) -> VAELoss:
    """Reconstruction NLL plus ``beta`` times the KL to the standard prior."""
    return _vae_forward(x, encoder, decoder, beta, noise, step)[0]


def permute_dims(c, generator=None):
    """Shuffle every latent column independently across the batch."""
    if c.shape[0] < 2:
        raise InvalidInputError("permutation needs a batch of at least 2")
    cols = [c[torch.randperm(c.shape[0], generator=generator), j] for j in range(c.shape[1])]
    return torch.stack(cols, dim=1)


def factor_tc_penalty(c, tc_discriminator):
    """Density-ratio estimate of total correlation: mean logit(joint) - logit(product)."""
    if c.shape[0] < 2:
        raise InvalidInputError("total-correlation penalty needs a batch of at least 2")
    logits = tc_discriminator(c)
    return (logits[:, 0] - logits[:, 1]).mean()


def tc_discriminator_loss(c, permuted_c, tc_discriminator):
    """Two-class cross-entropy: class 0 for joint samples, class 1 for permuted."""
    if c.shape[0] < 2 or permuted_c.shape[0] < 2:
        raise InvalidInputError("total-correlation discriminator needs batches of at least 2")
    real = tc_discriminator(c)
    perm = tc_discriminator(permuted_c)
    zeros = torch.zeros(len(real), dtype=torch.long)
    ones = torch.ones(len(perm), dtype=torch.long)
    return 0.5 * (F.cross_entropy(real, zeros) + F.cross_entropy(perm, ones))


def downsample(images, resolution):
    if images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images
    return F.interpolate(images, size=(resolution, resolution), mode="bilinear", align_corners=False)


def _encoder_input(images, encoder):
    channels, res = encoder.spec.input_shape[0], encoder.spec.input_shape[-1]
    if images.shape[1] != channels:
        raise ShapeError(f"encoder expects {channels} channels, got {images.shape[1]}")
    return downsample(images, res)


def r_id_loss(generated, c, encoder, encoder_resolution=None):
    """-mean log q(c | downsample(G(s, c))); ``generated`` is in [0, 1]."""
    channels = encoder.spec.input_shape[0]
    if generated.shape[1] != channels:
        raise ShapeError(f"encoder expects {channels} channels, got {generated.shape[1]}")
    res = encoder.spec.input_shape[-1] if encoder_resolution is None else encoder_resolution
    q = encoder(downsample(generated, res))
    return -log_density(q, c).mean()


def discriminator_loss(real_logits, fake_logits):
    """-[mean log sigma(D(x)) + mean log(1 - sigma(D(G(z))))]."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def generator_loss(fake_logits):
    """Non-saturating form: -mean log sigma(D(G(z)))."""
    return F.softplus(-fake_logits).mean()


# --------------------------------------------------------------------------
# Latent sampling

def _dataset_batch(dataset, indices):
    return torch.from_numpy(dataset.as_float(np.asarray(indices)))


@torch.no_grad()
def _posterior_sample(encoder, x, gen):
    q = encoder(_encoder_input(x, encoder))
    return reparameterize(q, _randn(q.mean.shape, gen, q.mean))


def aggregated_posterior_sample(encoder, dataset, n, seed, chunk=512):
    """c ~ q(c|x) p(x): uniform data draws, one reparameterized sample each."""
    if len(dataset) == 0:
        raise InvalidInputError("dataset is empty")
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    idx = np.random.default_rng([int(seed), _CODE_DATA]).integers(len(dataset), size=n)
    gen = torch.Generator().manual_seed(int(seed))
    was_training = encoder.training
    encoder.eval()
    out = []
    for start in range(0, n, chunk):
        x = _dataset_batch(dataset, idx[start:start + chunk])
        out.append(_posterior_sample(encoder, x, gen))
    encoder.train(was_training)
    return torch.cat(out)


# --------------------------------------------------------------------------
# Adversarial step

class StepLosses(NamedTuple):
    d_loss: torch.Tensor
    g_loss: torch.Tensor
    regularizer: torch.Tensor


def _generate(generator, code: LatentCode):
    if hasattr(generator, "generate"):
        return generator.generate(code.s, code.c)
    return generator(code.z)


def _critic(discriminator, x, c, conditional):
    return discriminator(x, c) if conditional else discriminator(x)


def r1_penalty(real_logits, real):
    """0.5 * mean squared norm of dD(x)/dx on real samples (``real`` must require grad)."""
    (grad,) = torch.autograd.grad(real_logits.sum(), real, create_graph=True)
    return 0.5 * grad.pow(2).flatten(1).sum(1).mean()


def discriminator_update(real, generator, discriminator, code, d_opt=None, real_codes=None,
                         conditional=False, r1_gamma=0.0):
    with torch.no_grad():
        fake = _generate(generator, code)
    if r1_gamma:
        real = real.detach().requires_grad_(True)
    real_logits = _critic(discriminator, real, real_codes, conditional)
    loss = discriminator_loss(real_logits, _critic(discriminator, fake, code.c, conditional))
    if r1_gamma:
        loss = loss + r1_gamma * r1_penalty(real_logits, real)
    if d_opt is not None:
        d_opt.zero_grad(set_to_none=True)
        loss.backward()
        d_opt.step()
    return loss.detach()


def generator_update(generator, discriminator, code, g_opts=(), regularizer=None,
                     conditional=False, extra_loss=None):
    fake = _generate(generator, code)
    adv = generator_loss(_critic(discriminator, fake, code.c, conditional))
    reg = regularizer(fake, code) if regularizer is not None else torch.zeros(())
    total = adv + reg + (extra_loss if extra_loss is not None else 0.0)
    if g_opts:
        for opt in g_opts:
            opt.zero_grad(set_to_none=True)
        discriminator.requires_grad_(False)
        total.backward()
        discriminator.requires_grad_(True)
        for opt in g_opts:
            opt.step()
    return adv.detach(), reg.detach()


def gan_step(real, generator, discriminator, latent_source: Callable[[int], LatentCode],
             d_opt=None, g_opt=None, regularizer=None, real_codes=None, conditional=False):
    """One discriminator update followed by one generator update on the same code."""
    code = latent_source(len(real))
    d_loss = discriminator_update(real, generator, discriminator, code, d_opt, real_codes, conditional)
    g_opts = () if g_opt is None else (g_opt if isinstance(g_opt, (list, tuple)) else (g_opt,))
    g_loss, reg = generator_update(generator, discriminator, code, g_opts, regularizer, conditional)
    _finite(None, d_loss=d_loss, g_loss=g_loss, regularizer=reg)
    return StepLosses(d_loss, g_loss, reg)


# --------------------------------------------------------------------------
# Persistence of training state

def _optimizer_tensors(name, opt):
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            out[f"optim.{name}.{idx}.{key}"] = torch.as_tensor(value, dtype=torch.float32)
    return out


def _load_optimizer(name, opt, tensors):
    prefix = f"optim.{name}."
    state = {}
    for key, value in tensors.items():
        if key.startswith(prefix):
            idx, sub = key[len(prefix):].split(".", 1)
            state.setdefault(int(idx), {})[sub] = value.clone()
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


@dataclass
class TrainState:
    """Networks, optimizers and the step counter of one stage."""

    step: int
    networks: dict
    optimizers: dict
    frozen: dict = field(default_factory=dict)

    def tensors(self):
        out = {"state.step": torch.tensor([float(self.step)])}
        for name, net in self.networks.items():
            out.update(module_tensors(net, f"{name}."))
        for name, opt in self.optimizers.items():
            out.update(_optimizer_tensors(name, opt))
        return out

    def restore(self, tensors):
        self.step = int(tensors["state.step"][0])
        for name, net in self.networks.items():
            load_module(net, tensors, f"{name}.")
        for name, opt in self.optimizers.items():
            _load_optimizer(name, opt, tensors)


@dataclass
class StageResult:
    networks: dict
    checkpoints: list
    curves: list
    final_step: int

    @property
    def final_checkpoint(self):
        return self.checkpoints[-1] if self.checkpoints else None


_CKPT_RE = re.compile(r"^(?P<tag>.+)_step_(?P<step>\d+)\.idgc$")


def list_checkpoints(directory, tag):
    directory = Path(directory)
    if not directory.exists():
        return []
    found = []
    for path in directory.iterdir():
        m = _CKPT_RE.match(path.name)
        if m and m.group("tag") == tag:
            found.append((int(m.group("step")), path))
    return [p for _, p in sorted(found)]


def distill_ramp(step, delay, warmup):
    """Fraction of the distillation weight applied at 1-based ``step``."""
    if step <= delay:
        return 0.0
    return min(1.0, (step - delay) / warmup) if warmup else 1.0


def load_stage_network(path, name):
    """Rebuild one named network (e.g. ``encoder``) from a stage checkpoint."""
    return load_module(None, load_checkpoint(path), f"{name}.")


class _Recorder:
    """Buffers curve rows; flushes them after each checkpoint is durable."""

    def __init__(self, path, tag):
        self.path, self.tag, self.rows, self.all_rows = path, tag, [], []

    def log(self, step, **terms):
        for name, value in terms.items():
            v = float(value.detach()) if torch.is_tensor(value) else float(value)
            row = (int(step), f"{self.tag}/{name}", v)
            self.rows.append(row)
            self.all_rows.append(row)

    def flush(self):
        if self.path is None or not self.rows:
            self.rows = []
            return
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["step", "term", "value"])
            w.writerows((s, t, repr(v)) for s, t, v in self.rows)
        self.rows = []

    def truncate_after(self, step):
        """Drop this stage's rows written past ``step`` (crash between checkpoint and flush)."""
        if self.path is None or not self.path.exists():
            return
        rows = read_curves(self.path)
        keep = [r for r in rows if not (r[1].startswith(self.tag + "/") and r[0] > step)]
        if len(keep) != len(rows):
            with open(self.path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "term", "value"])
                w.writerows((s, t, repr(v)) for s, t, v in keep)


def read_curves(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [(int(s), t, float(v)) for s, t, v in reader]


class _Loop:
    """Shared checkpoint/resume/logging scaffold."""

    def __init__(self, state: TrainState, steps, seed, out_dir, tag, resume, checkpoint_every,
                 log_every, progress=None):
        self.state, self.steps, self.seed, self.tag = state, steps, seed, tag
        self.checkpoint_every, self.log_every, self.progress = checkpoint_every, log_every, progress
        self.ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
        self.recorder = _Recorder(Path(out_dir) / "curves.csv" if out_dir is not None else None, tag)
        self.checkpoints = []
        if resume:
            if self.ckpt_dir is None:
                raise InvalidConfigError("resume needs an output directory", "resume")
            existing = list_checkpoints(self.ckpt_dir, tag)
            if existing:
                state.restore(load_checkpoint(existing[-1]))
                self.checkpoints = existing
                self.recorder.truncate_after(state.step)
        elif self.ckpt_dir is not None and list_checkpoints(self.ckpt_dir, tag):
            raise InvalidStateError(f"{self.ckpt_dir} already holds {tag} checkpoints; pass resume")

    def save(self):
        if self.ckpt_dir is None:
            return
        path = self.ckpt_dir / f"{self.tag}_step_{self.state.step:07d}.idgc"
        save_checkpoint(path, self.state.tensors())
        self.checkpoints.append(path)
        self.recorder.flush()

    def run(self, body):
        while self.state.step < self.steps:
            step = self.state.step + 1
            terms = body(step)
            self.state.step = step
            if step % self.log_every == 0 or step == self.steps:
                self.recorder.log(step, **terms)
                if self.progress is not None:
                    self.progress(self.tag, step, terms)
            if step % self.checkpoint_every == 0 or step == self.steps:
                if not (self.checkpoints and self.checkpoints[-1].name.endswith(f"{step:07d}.idgc")):
                    self.save()
        self.recorder.flush()
        return StageResult(self.state.networks, self.checkpoints, self.recorder.all_rows, self.state.step)


def _adam(module_or_params, lr, betas):
    params = module_or_params.parameters() if isinstance(module_or_params, nn.Module) else module_or_params
    return torch.optim.Adam(params, lr=lr, betas=betas)


# --------------------------------------------------------------------------
# Stage 1

def _run_vae(cfg: VAEStageConfig, dataset, out_dir, resume, progress):
    channels, res = dataset.channels, dataset.resolution
    torch.manual_seed(cfg.seed)
    encoder = build_encoder(cfg.c_dim, channels, res, seed=cfg.seed)
    decoder = build_decoder(cfg.c_dim, channels, res, seed=cfg.seed + 1)
    networks = {"encoder": encoder, "decoder": decoder}
    optimizers = {"vae": _adam(list(encoder.parameters()) + list(decoder.parameters()), cfg.lr, cfg.betas)}
    factor = cfg.objective == "factor-vae"
    if factor:
        networks["tc"] = build_tc_discriminator(cfg.c_dim, seed=cfg.seed + 2)
        optimizers["tc"] = _adam(networks["tc"], cfg.tc_lr, cfg.tc_betas)
    state = TrainState(0, networks, optimizers)
    loop = _Loop(state, cfg.steps, cfg.seed, out_dir, "stage1", resume, cfg.checkpoint_every,
                 cfg.log_every, progress)
    n = len(dataset)

    def body(step):
        x = _dataset_batch(dataset, step_rng(cfg.seed, step, _DATA).integers(n, size=cfg.batch_size))
        noise = _randn((cfg.batch_size, cfg.c_dim), step_generator(cfg.seed, step, _NOISE))
        terms, _, c = _vae_forward(x, encoder, decoder, cfg.beta, noise, step)
        total = terms.total
        out = {"total": terms.total, "reconstruction": terms.reconstruction, "kl": terms.kl}
        if factor:
            tc = networks["tc"]
            penalty = factor_tc_penalty(c, tc)
            total = total + cfg.gamma * penalty
            out["tc_penalty"] = penalty
        _finite(step, objective=total)
        optimizers["vae"].zero_grad(set_to_none=True)
        total.backward()
        optimizers["vae"].step()
        if factor:
            x2 = _dataset_batch(dataset, step_rng(cfg.seed, step, _CODE_DATA).integers(n, size=cfg.batch_size))
            c2 = _posterior_sample(encoder, x2, step_generator(cfg.seed, step, _CODE_NOISE))
            perm = permute_dims(c2, step_generator(cfg.seed, step, _PERM))
            d_tc = tc_discriminator_loss(c.detach(), perm, tc)
            _finite(step, tc_discriminator=d_tc)
            optimizers["tc"].zero_grad(set_to_none=True)
            d_tc.backward()
            optimizers["tc"].step()
            out["tc_discriminator"] = d_tc
        return out

    return loop.run(body)


# --------------------------------------------------------------------------
# Stage 2

def _resolve_encoder(cfg: GANStageConfig, encoder):
    if encoder is None and cfg.encoder_path is not None:
        encoder = load_stage_network(cfg.encoder_path, "encoder")
    if cfg.uses_frozen_encoder and encoder is None:
        raise InvalidConfigError(f"mode {cfg.mode} requires a stage-1 encoder", "stage2.encoder_path")
    return encoder


def _run_gan(cfg: GANStageConfig, dataset, encoder, out_dir, resume, progress):
    channels = dataset.channels
    res = dataset.resolution if cfg.resolution is None else cfg.resolution
    if res != dataset.resolution:
        raise InvalidConfigError(f"generator resolution {res} != dataset resolution "
                                 f"{dataset.resolution}", "stage2.resolution")
    encoder = _resolve_encoder(cfg, encoder)
    mode = cfg.mode
    torch.manual_seed(cfg.seed)

    networks, optimizers, frozen_hash = {}, {}, None
    if mode in FROZEN_ENCODER_MODES:
        if encoder.spec.input_shape[0] != channels:
            raise InvalidConfigError("encoder channels differ from the dataset", "stage2.encoder_path")
        freeze(encoder)
        frozen_hash = parameter_hash(encoder)
        c_dim = encoder.c_dim
    elif mode in ("idgan-e2e", "vaegan"):
        if encoder is None:
            encoder = build_encoder(cfg.c_dim, channels, res, seed=cfg.seed + 10)
        c_dim = encoder.c_dim
        networks["encoder"] = encoder
    else:
        c_dim = cfg.c_dim
    if mode == "infogan":
        networks["q"] = build_encoder(c_dim, channels, res, seed=cfg.seed + 10)

    cond_dim = c_dim if mode == "cgan" else 0
    if mode == "vaegan":
        decoder = build_decoder(c_dim, channels, res, seed=cfg.seed)
        networks["decoder"] = decoder
        generator = DecoderGenerator(decoder)
        discriminator = build_gan_pair("mirror", c_dim, res, channels, seed=cfg.seed)[1]
    else:
        generator, discriminator = build_gan_pair(cfg.arch, cfg.s_dim + c_dim, res, channels,
                                                  c_dim=c_dim, cond_dim=cond_dim, seed=cfg.seed,
                                                  norm=cfg.g_norm)
        networks["generator"] = generator
        if mode == "idgan-e2e":
            networks["decoder"] = build_decoder(c_dim, channels, encoder.spec.input_shape[-1],
                                                seed=cfg.seed + 11)
    networks["discriminator"] = discriminator
    optimizers["d"] = _adam(discriminator, cfg.d_lr, cfg.betas)
    if mode != "vaegan":
        optimizers["g"] = _adam(generator, cfg.g_lr, cfg.betas)
    for name in ("encoder", "decoder", "q"):
        if name in networks:
            optimizers[name] = _adam(networks[name], cfg.enc_lr, cfg.enc_betas)

    state = TrainState(0, networks, optimizers)
    loop = _Loop(state, cfg.steps, cfg.seed, out_dir, "stage2", resume, cfg.checkpoint_every,
                 cfg.log_every, progress)
    n, bs, lam = len(dataset), cfg.batch_size, cfg.lam
    posterior_codes = mode in ("idgan", "idgan-no-distill", "cgan", "idgan-e2e")
    conditional = mode == "cgan"
    g_opt_names = [k for k in ("g", "encoder", "decoder", "q") if k in optimizers]

    def real_batch(step, sub):
        return _dataset_batch(dataset, step_rng(cfg.seed, step, _DATA * 16 + sub).integers(n, size=bs))

    def latent(step, sub):
        gen = step_generator(cfg.seed, step, _NOISE * 16 + sub)
        s = _randn((bs, cfg.s_dim), gen)
        if posterior_codes:
            idx = step_rng(cfg.seed, step, _CODE_DATA * 16 + sub).integers(n, size=bs)
            c = _posterior_sample(encoder, _dataset_batch(dataset, idx),
                                  step_generator(cfg.seed, step, _CODE_NOISE * 16 + sub))
        else:
            c = _randn((bs, c_dim), gen)
        return LatentCode(s, c)

    weight, raw = [lam], [None]

    def distill(fake, code):
        if lam == 0 or mode in ("idgan-no-distill", "gan", "cgan"):
            return torch.zeros(())
        critic = networks["q"] if mode == "infogan" else encoder
        raw[0] = r_id_loss(generator.to_unit(fake), code.c, critic)
        return weight[0] * raw[0]

    def body(step):
        out = {}
        # a pure function of step, so resume is exact
        weight[0] = lam * distill_ramp(step, cfg.lam_delay, cfg.lam_warmup)
        for k in range(cfg.d_steps):
            x = real_batch(step, k)
            if mode == "vaegan":
                d_loss = _vaegan_d_step(x, step, k)
            else:
                code = latent(step, k)
                real_codes = None
                if conditional:
                    real_codes = _posterior_sample(encoder, x, step_generator(cfg.seed, step, _PERM * 16 + k))
                d_loss = discriminator_update(generator.from_unit(x), generator, discriminator, code,
                                              optimizers["d"], real_codes, conditional, cfg.r1_gamma)
            _finite(step, d_loss=d_loss)
        out["d_loss"] = d_loss
        if mode == "vaegan":
            out.update(_vaegan_g_step(step))
            return out
        code = latent(step, cfg.d_steps)
        extra = None
        if mode == "idgan-e2e":
            x = real_batch(step, cfg.d_steps)
            noise = _randn((bs, c_dim), step_generator(cfg.seed, step, _PERM * 16 + cfg.d_steps))
            terms, _, _ = _vae_forward(_encoder_input(x, encoder), encoder, networks["decoder"],
                                       cfg.beta, noise, step)
            extra = terms.total
            out["vae_total"] = terms.total.detach()
        g_loss, reg = generator_update(generator, discriminator, code,
                                       [optimizers[k] for k in g_opt_names], distill, conditional, extra)
        _finite(step, g_loss=g_loss, r_id=reg)
        out["g_loss"] = g_loss
        # logged unweighted so curves stay comparable across lambda and its schedule
        out["r_id"] = raw[0].detach() if raw[0] is not None else reg
        return out

    def _vaegan_recon(x, step, sub):
        noise = _randn((bs, c_dim), step_generator(cfg.seed, step, _NOISE * 16 + sub))
        terms, _, c = _vae_forward(x, encoder, decoder, cfg.beta, noise, step)
        return terms, torch.sigmoid(decoder(c))

    def _vaegan_d_step(x, step, sub):
        with torch.no_grad():
            _, recon = _vaegan_recon(x, step, sub)
        if cfg.r1_gamma:
            x = x.detach().requires_grad_(True)
        real_logits = discriminator(x)
        loss = discriminator_loss(real_logits, discriminator(recon))
        if cfg.r1_gamma:
            loss = loss + cfg.r1_gamma * r1_penalty(real_logits, x)
        optimizers["d"].zero_grad(set_to_none=True)
        loss.backward()
        optimizers["d"].step()
        return loss.detach()

    def _vaegan_g_step(step):
        x = real_batch(step, cfg.d_steps)
        terms, recon = _vaegan_recon(x, step, cfg.d_steps)
        adv = generator_loss(discriminator(recon))
        total = terms.total + cfg.adv_weight * adv
        _finite(step, g_loss=adv, vae_total=terms.total)
        for k in ("encoder", "decoder"):
            optimizers[k].zero_grad(set_to_none=True)
        discriminator.requires_grad_(False)
        total.backward()
        discriminator.requires_grad_(True)
        for k in ("encoder", "decoder"):
            optimizers[k].step()
        return {"g_loss": adv.detach(), "vae_total": terms.total.detach()}

    result = loop.run(body)
    if frozen_hash is not None:
        if parameter_hash(encoder) != frozen_hash:
            raise InvalidStateError("frozen encoder changed during stage 2")
        result.networks = dict(result.networks, encoder=encoder)
    if mode == "vaegan":
        result.networks = dict(result.networks, generator=generator)
    return result


def run_stage(config, dataset, encoder: Encoder | None = None, out_dir=None, resume=False,
              progress=None) -> StageResult:
    """Train one stage.

    Checkpoints go to ``out_dir/checkpoints/<stage>_step_NNNNNNN.idgc`` and curve
    rows to ``out_dir/curves.csv``; with ``out_dir=None`` nothing is written.
    """
    if isinstance(config, VAEStageConfig):
        return _run_vae(config, dataset, out_dir, resume, progress)
    if isinstance(config, GANStageConfig):
        return _run_gan(config, dataset, encoder, out_dir, resume, progress)
    raise InvalidConfigError(f"unsupported stage config {type(config).__name__}", "stage")


def stage_generator(path):
    """Load the sampling network of a stage checkpoint (generator or decoder)."""
    tensors = load_checkpoint(path)
    if any(k.startswith("generator.") for k in tensors):
        return load_module(None, tensors, "generator.")
    if any(k.startswith("decoder.") for k in tensors):
        return DecoderGenerator(load_module(None, tensors, "decoder."))
    raise InvalidConfigError(f"{path} holds no generator or decoder", "checkpoint")
