import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy import stats
from torch import nn

from idgan.core import DistributionStats, frechet_distance, log_density
from idgan.data import DatasetHandle, FactorSpace, generate_dsprites
from idgan.errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    ShapeError,
    TrainingDivergenceError,
)
from idgan.nets import build_decoder, build_encoder, build_gan_pair, build_tc_discriminator, parameter_hash
from idgan.train import (
    GANStageConfig,
    LatentCode,
    VAEStageConfig,
    aggregated_posterior_sample,
    discriminator_loss,
    downsample,
    factor_tc_penalty,
    gan_step,
    generator_loss,
    list_checkpoints,
    load_stage_network,
    discriminator_update,
    distill_ramp,
    permute_dims,
    r1_penalty,
    r_id_loss,
    read_curves,
    run_stage,
    stage_generator,
    tc_discriminator_loss,
    vae_loss,
)


@pytest.fixture(scope="module")
def sprites64():
    return generate_dsprites(FactorSpace.dsprites((3, 2, 4, 4, 4)), resolution=64)


@pytest.fixture(scope="module")
def sprites32():
    return generate_dsprites(FactorSpace.dsprites((3, 2, 4, 4, 4)), resolution=32)


@pytest.fixture(scope="module")
def stage1(sprites64):
    cfg = VAEStageConfig(objective="beta-vae", c_dim=4, steps=10, log_every=5, checkpoint_every=10)
    return run_stage(cfg, sprites64)


def short(mode, **kw):
    base = dict(mode=mode, c_dim=4, steps=4, log_every=2, checkpoint_every=2, batch_size=16)
    base.update(kw)
    return GANStageConfig(**base)


def zero_last_linear(module):
    last = [m for m in module.modules() if isinstance(m, nn.Linear)][-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    return module


class TestConfigs:
    def test_vae_defaults(self):
        assert VAEStageConfig("vae").beta == 1.0
        assert VAEStageConfig("beta-vae").beta == 4.0
        assert VAEStageConfig("factor-vae").gamma > 0

    def test_vae_invariants(self):
        with pytest.raises(InvalidConfigError, match="beta"):
            VAEStageConfig("vae", beta=4.0)
        with pytest.raises(InvalidConfigError, match="gamma"):
            VAEStageConfig("beta-vae", gamma=1.0)
        with pytest.raises(InvalidConfigError):
            VAEStageConfig("wae")

    @pytest.mark.parametrize("lam", [-0.1, 10.5])
    def test_lambda_range(self, lam):
        with pytest.raises(InvalidConfigError, match="lambda"):
            GANStageConfig(lam=lam)

    def test_gan_defaults(self):
        cfg = GANStageConfig()
        assert (cfg.lam, cfg.g_lr, cfg.d_lr, cfg.betas, cfg.batch_size, cfg.d_steps) == \
            (0.1, 1e-4, 4e-4, (0.5, 0.999), 64, 1)

    @pytest.mark.parametrize("mode", ["idgan", "idgan-no-distill", "cgan"])
    def test_missing_encoder(self, mode, sprites64):
        with pytest.raises(InvalidConfigError, match="encoder"):
            run_stage(short(mode), sprites64)


class TestVAELoss:
    def test_beta_one_is_plain_vae(self):
        torch.manual_seed(0)
        enc, dec = build_encoder(3, 1, 16), build_decoder(3, 1, 16)
        x = (torch.rand(8, 1, 16, 16) > 0.5).float()
        noise = torch.randn(8, 3)
        terms = vae_loss(x, enc, dec, 1.0, noise)
        assert (terms.total - (terms.reconstruction + terms.kl)).item() == 0.0

    def test_perfect_reconstruction_limit(self):
        x = (torch.rand(4, 1, 16, 16, generator=torch.Generator().manual_seed(1)) > 0.5).float()

        class Enc(nn.Module):
            def forward(self, x):
                from idgan.core import DiagonalGaussian
                return DiagonalGaussian(torch.zeros(len(x), 2), torch.zeros(len(x), 2))

        class Dec(nn.Module):
            def forward(self, c):
                return (2 * x - 1) * 60.0

        assert vae_loss(x, Enc(), Dec(), 0.0).total.item() < 1e-20

    def test_nan_raises_divergence(self):
        enc, dec = build_encoder(2, 1, 16), build_decoder(2, 1, 16)
        with torch.no_grad():
            next(enc.parameters()).fill_(float("nan"))
        with pytest.raises(TrainingDivergenceError) as err:
            vae_loss(torch.rand(2, 1, 16, 16), enc, dec, 1.0, step=7)
        assert err.value.step == 7

    def test_gradient_finite_differences(self):
        torch.manual_seed(0)
        enc = build_encoder(2, 1, 16).double()
        dec = build_decoder(2, 1, 16).double()
        x = torch.rand(3, 1, 16, 16, dtype=torch.float64)
        noise = torch.randn(3, 2, dtype=torch.float64)
        params = list(enc.parameters()) + list(dec.parameters())
        flat = torch.nn.utils.parameters_to_vector(params).detach()

        def f():
            return vae_loss(x, enc, dec, 4.0, noise).total

        grads = torch.cat([g.reshape(-1) for g in torch.autograd.grad(f(), params)])
        rng = np.random.default_rng(0)
        for i in rng.choice(flat.numel(), 20, replace=False):
            vals = []
            for sign in (1, -1):
                v = flat.clone()
                v[i] += sign * 1e-5
                torch.nn.utils.vector_to_parameters(v, params)
                vals.append(f().item())
            torch.nn.utils.vector_to_parameters(flat, params)
            fd = (vals[0] - vals[1]) / 2e-5
            assert abs(fd - grads[i].item()) <= 1e-4 * max(abs(fd), abs(grads[i].item()), 1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_fixed_batch_loss_decreases(self, sprites32, seed):
        torch.manual_seed(seed)
        enc, dec = build_encoder(4, 1, 32, seed=seed), build_decoder(4, 1, 32, seed=seed + 1)
        opt = torch.optim.Adam(list(enc.parameters()) + list(dec.parameters()), 1e-4, betas=(0.9, 0.999))
        idx = np.random.default_rng(seed).integers(len(sprites32), size=64)
        x = torch.from_numpy(sprites32.as_float(idx))
        g = torch.Generator().manual_seed(seed)
        history = []
        for _ in range(200):
            loss = vae_loss(x, enc, dec, 4.0, torch.randn(64, 4, generator=g)).total
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
        assert np.mean(history[-20:]) < 0.5 * np.mean(history[:20])


class TestTotalCorrelation:
    def test_permute_preserves_marginals(self):
        c = torch.randn(50, 3)
        p = permute_dims(c, torch.Generator().manual_seed(0))
        for j in range(3):
            assert torch.equal(torch.sort(p[:, j]).values, torch.sort(c[:, j]).values)
        assert not torch.equal(p, c)

    def test_small_batch(self):
        tc = build_tc_discriminator(2)
        with pytest.raises(InvalidInputError):
            factor_tc_penalty(torch.zeros(1, 2), tc)
        with pytest.raises(InvalidInputError):
            tc_discriminator_loss(torch.zeros(1, 2), torch.zeros(4, 2), tc)
        with pytest.raises(InvalidInputError):
            permute_dims(torch.zeros(1, 2))

    def test_untrained_penalty_zero(self):
        tc = zero_last_linear(build_tc_discriminator(3))
        assert factor_tc_penalty(torch.randn(32, 3), tc).item() == 0.0
        loss = tc_discriminator_loss(torch.randn(8, 3), torch.randn(8, 3), tc)
        assert loss.item() == pytest.approx(math.log(2))

    @staticmethod
    def trained_accuracy(rho, seed, steps=800):
        # reduced hidden width keeps this simulation fast; the loss is unchanged
        tc = build_tc_discriminator(2, seed=seed, hidden=128)
        opt = torch.optim.Adam(tc.parameters(), 1e-3, betas=(0.5, 0.9))
        g = torch.Generator().manual_seed(seed)
        chol = torch.linalg.cholesky(torch.tensor([[1.0, rho], [rho, 1.0]]))

        def sample(n):
            return torch.randn(n, 2, generator=g) @ chol.T

        for _ in range(steps):
            loss = tc_discriminator_loss(sample(256), permute_dims(sample(256), g), tc)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            joint, perm = sample(40_000), permute_dims(sample(40_000), g)
            return 0.5 * ((tc(joint).argmax(1) == 0).float().mean()
                          + (tc(perm).argmax(1) == 1).float().mean()).item()

    def test_factorized_near_half(self):
        assert abs(self.trained_accuracy(0.0, seed=0) - 0.5) <= 0.05

    def test_correlated_detected(self):
        # the Bayes-optimal accuracy here is about 0.812
        assert self.trained_accuracy(0.95, seed=0) > 0.8


class TestAggregatedPosterior:
    def test_prior_encoder_moments(self, sprites64):
        enc = zero_last_linear(build_encoder(3, 1))
        c = aggregated_posterior_sample(enc, sprites64, 10_000, seed=0).double()
        assert (c.mean(0).abs() < 4 / math.sqrt(10_000)).all()
        var = c.var(0)
        assert ((var > 0.9) & (var < 1.1)).all()

    def test_single_and_deterministic(self, sprites64, stage1):
        enc = stage1.networks["encoder"]
        assert aggregated_posterior_sample(enc, sprites64, 1, seed=3).shape == (1, 4)
        a = aggregated_posterior_sample(enc, sprites64, 100, seed=3)
        b = aggregated_posterior_sample(enc, sprites64, 100, seed=3)
        assert torch.equal(a, b)

    def test_empty_dataset(self, stage1):
        empty = DatasetHandle(np.zeros((0, 64, 64, 1), np.uint8), None, None)
        with pytest.raises(InvalidInputError):
            aggregated_posterior_sample(stage1.networks["encoder"], empty, 5, seed=0)

    def test_resolution_bridge(self, sprites64):
        enc = build_encoder(3, 1, resolution=32)
        assert aggregated_posterior_sample(enc, sprites64, 8, seed=0).shape == (8, 3)


class TestDistillation:
    def test_downsample_is_box_average(self):
        x = torch.rand(2, 3, 64, 64)
        assert torch.allclose(downsample(x, 32), nn.functional.avg_pool2d(x, 2), atol=1e-6)
        assert downsample(x, 64) is x

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            r_id_loss(torch.rand(2, 3, 64, 64), torch.zeros(2, 4), build_encoder(4, 1))

    def test_density_at_mean(self, sprites64, stage1):
        enc = stage1.networks["encoder"].eval()
        x = torch.from_numpy(sprites64.as_float(np.arange(32)))
        with torch.no_grad():
            q = enc(x)
            at_mean = r_id_loss(x, q.mean, enc)
            shifted = r_id_loss(x, q.mean + 0.3, enc)
        assert at_mean.item() == pytest.approx(-log_density(q, q.mean).mean().item(), rel=1e-6)
        assert shifted > at_mean

    def test_generator_ignoring_c_permutation(self, sprites64, stage1):
        enc = stage1.networks["encoder"].eval()
        c = aggregated_posterior_sample(enc, sprites64, 400, seed=1)
        images = torch.from_numpy(sprites64.as_float(np.random.default_rng(2).integers(len(sprites64),
                                                                                      size=400)))
        with torch.no_grad():
            q = enc(images)
            paired = log_density(q, c).numpy()
            shuffled = log_density(q, c[torch.randperm(400, generator=torch.Generator().manual_seed(0))])
        assert stats.ttest_ind(paired, shuffled.numpy()).pvalue > 0.05

    def test_gradient_flows_to_generator_only(self):
        enc = build_encoder(3, 1)
        enc.requires_grad_(False)
        gen, _ = build_gan_pair("mirror", 3, 64)
        c = torch.randn(4, 3)
        loss = r_id_loss(gen(c), c, enc)
        loss.backward()
        assert sum(p.grad.abs().sum() for p in gen.parameters() if p.grad is not None) > 0
        assert all(p.grad is None for p in enc.parameters())

    def test_gradcheck_wrt_images(self):
        torch.manual_seed(0)
        enc = build_encoder(2, 1, 16).double()
        x = torch.rand(2, 1, 32, 32, dtype=torch.float64, requires_grad=True)
        c = torch.randn(2, 2, dtype=torch.float64)
        assert torch.autograd.gradcheck(lambda t: r_id_loss(t, c, enc), (x,), eps=1e-6, atol=1e-7,
                                        rtol=1e-4)


class TestGANLosses:
    def test_zero_logits(self):
        z = torch.zeros(10, 1)
        assert discriminator_loss(z, z).item() == pytest.approx(2 * math.log(2))
        assert generator_loss(z).item() == pytest.approx(math.log(2))

    def test_gradcheck(self):
        r = torch.randn(5, 1, dtype=torch.float64, requires_grad=True)
        f = torch.randn(5, 1, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(discriminator_loss, (r, f), rtol=1e-4)
        assert torch.autograd.gradcheck(generator_loss, (f,), rtol=1e-4)

    def test_matches_log_sigmoid_form(self):
        r, f = torch.randn(100, 1), torch.randn(100, 1)
        literal = -(torch.log(torch.sigmoid(r)).mean() + torch.log(1 - torch.sigmoid(f)).mean())
        assert discriminator_loss(r, f).item() == pytest.approx(literal.item(), rel=1e-5)

    def test_perfect_discriminator(self):
        torch.manual_seed(0)
        d = nn.Sequential(nn.Linear(1, 16), nn.ReLU(), nn.Linear(16, 1))
        opt = torch.optim.Adam(d.parameters(), 1e-2)
        g = torch.Generator().manual_seed(0)
        for _ in range(500):
            real = 3 + 0.1 * torch.randn(64, 1, generator=g)
            fake = -3 + 0.1 * torch.randn(64, 1, generator=g)
            loss = discriminator_loss(d(real), d(fake))
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert loss.item() < 0.01

    def test_step_updates_generator(self):
        gen, disc = build_gan_pair("mirror", 4, 64, seed=0)
        before = parameter_hash(gen)
        g_opt = torch.optim.Adam(gen.parameters(), 1e-4, betas=(0.5, 0.999))
        d_opt = torch.optim.Adam(disc.parameters(), 4e-4, betas=(0.5, 0.999))
        src = lambda n: LatentCode(torch.zeros(n, 0), torch.randn(n, 4))
        out = gan_step(torch.rand(8, 1, 64, 64), gen, disc, src, d_opt, g_opt)
        assert parameter_hash(gen) != before
        assert math.isfinite(out.d_loss.item()) and math.isfinite(out.g_loss.item())

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gaussian_mixture_toy(self, seed):
        torch.manual_seed(seed)

        def mlp(i, o):
            return nn.Sequential(nn.Linear(i, 64), nn.LeakyReLU(0.2), nn.Linear(64, 64),
                                 nn.LeakyReLU(0.2), nn.Linear(64, o))

        centers = torch.tensor([[2.0, 2.0], [-2.0, 2.0], [2.0, -2.0], [-2.0, -2.0]])

        def real(n, g):
            return centers[torch.randint(4, (n,), generator=g)] + 0.2 * torch.randn(n, 2, generator=g)

        gen, disc = mlp(4, 2), mlp(2, 1)
        g_opt = torch.optim.Adam(gen.parameters(), 1e-3, betas=(0.5, 0.999))
        d_opt = torch.optim.Adam(disc.parameters(), 1e-3, betas=(0.5, 0.999))
        g = torch.Generator().manual_seed(seed)
        src = lambda n: LatentCode(torch.randn(n, 2, generator=g), torch.randn(n, 2, generator=g))
        target = DistributionStats.from_samples(real(5000, torch.Generator().manual_seed(99)).double().numpy())

        def distance():
            with torch.no_grad():
                return frechet_distance(target, DistributionStats.from_samples(
                    gen(src(5000).z).double().numpy()))

        start = distance()
        for _ in range(1500):
            gan_step(real(128, g), gen, disc, src, d_opt, g_opt)
        assert distance() * 5 <= start


class TestR1Penalty:
    def test_linear_critic_oracle(self):
        # D(x) = w.x + b has dD/dx = w for every sample
        w = torch.randn(1, 12, dtype=torch.float64)
        x = torch.randn(7, 12, dtype=torch.float64, requires_grad=True)
        logits = x @ w.T + 0.3
        assert r1_penalty(logits, x).item() == pytest.approx(0.5 * w.pow(2).sum().item(), rel=1e-12)

    def test_quadratic_critic_oracle(self):
        # D(x) = 0.5 |x|^2: gradient x, penalty 0.5 * mean |x|^2
        x = torch.randn(9, 5, dtype=torch.float64, requires_grad=True)
        logits = 0.5 * x.pow(2).sum(1, keepdim=True)
        expected = 0.5 * x.detach().pow(2).sum(1).mean().item()
        assert r1_penalty(logits, x).item() == pytest.approx(expected, rel=1e-12)

    def test_penalty_is_differentiable(self):
        lin = nn.Linear(6, 1).double()
        x = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
        r1_penalty(lin(x), x).backward()
        assert torch.allclose(lin.weight.grad, lin.weight.detach(), atol=1e-12)

    def test_added_to_discriminator_loss(self):
        gen, disc = build_gan_pair("mirror", 4, 64, seed=0)
        code = LatentCode(torch.zeros(6, 0), torch.randn(6, 4))
        real = torch.rand(6, 1, 64, 64)
        plain = discriminator_update(real, gen, disc, code)
        x = real.clone().requires_grad_(True)
        expected = plain + 10.0 * r1_penalty(disc(x), x).detach()
        with_r1 = discriminator_update(real, gen, disc, code, r1_gamma=10.0)
        assert with_r1.item() == pytest.approx(expected.item(), rel=1e-6)
        assert not real.requires_grad

    def test_config(self, stage1, sprites64):
        assert GANStageConfig().r1_gamma == 0.0
        with pytest.raises(InvalidConfigError, match="r1_gamma"):
            GANStageConfig(r1_gamma=-1)
        enc = stage1.networks["encoder"]
        with pytest.raises(InvalidConfigError, match="g_norm"):
            GANStageConfig(g_norm="yes")
        r = run_stage(short("idgan", g_norm=True), sprites64, encoder=stage1.networks["encoder"])
        assert any(isinstance(m, nn.BatchNorm2d) for m in r.networks["generator"].modules())
        for mode in ("idgan", "cgan", "vaegan"):
            r = run_stage(short(mode, r1_gamma=10.0), sprites64, encoder=enc if mode != "vaegan" else None)
            assert r.final_step == 4


class TestLambdaWarmup:
    def test_config(self):
        assert GANStageConfig().lam_warmup == GANStageConfig().lam_delay == 0
        for name in ("lam_warmup", "lam_delay"):
            for bad in (-1, 2.5, "10", True):
                with pytest.raises(InvalidConfigError, match=name):
                    GANStageConfig(**{name: bad})

    def test_ramp(self):
        assert [distill_ramp(s, 0, 0) for s in (1, 5)] == [1.0, 1.0]
        assert [distill_ramp(s, 0, 4) for s in (1, 2, 4, 9)] == [0.25, 0.5, 1.0, 1.0]
        assert [distill_ramp(s, 3, 0) for s in (1, 3, 4)] == [0.0, 0.0, 1.0]
        assert [distill_ramp(s, 2, 2) for s in (2, 3, 4, 5)] == [0.0, 0.5, 1.0, 1.0]

    @given(st.integers(1, 10_000), st.integers(0, 500), st.integers(0, 500))
    def test_ramp_bounded_monotone(self, step, delay, warmup):
        a, b = distill_ramp(step, delay, warmup), distill_ramp(step + 1, delay, warmup)
        assert 0.0 <= a <= b <= 1.0

    def test_delay_logs_finite_r_id(self, sprites64, stage1):
        enc = stage1.networks["encoder"]
        r = run_stage(short("idgan", steps=2, log_every=1, lam_delay=5), sprites64, encoder=enc)
        vals = [v for s, t, v in r.curves if t == "stage2/r_id"]
        assert len(vals) == 2 and all(math.isfinite(v) and v != 0.0 for v in vals)

    def test_logged_r_id_unweighted(self, sprites64, stage1):
        # first logged value precedes any generator update, so the ramp must not show in it
        enc = stage1.networks["encoder"]
        a = run_stage(short("idgan", steps=1, log_every=1), sprites64, encoder=enc)
        b = run_stage(short("idgan", steps=1, log_every=1, lam_warmup=100), sprites64, encoder=enc)
        ra = [v for s, t, v in a.curves if t == "stage2/r_id"]
        rb = [v for s, t, v in b.curves if t == "stage2/r_id"]
        assert ra == pytest.approx(rb, rel=1e-6)

    def test_changes_training(self, sprites64, stage1):
        enc = stage1.networks["encoder"]
        a = run_stage(short("idgan", steps=2), sprites64, encoder=enc)
        b = run_stage(short("idgan", steps=2, lam_warmup=100), sprites64, encoder=enc)
        assert parameter_hash(a.networks["generator"]) != parameter_hash(b.networks["generator"])

    def test_resume_mid_ramp(self, sprites64, stage1, tmp_path):
        enc = stage1.networks["encoder"]
        cfg = lambda n: short("idgan", steps=n, log_every=1, lam_warmup=5)
        full = run_stage(cfg(6), sprites64, encoder=enc, out_dir=tmp_path / "full")
        run_stage(cfg(4), sprites64, encoder=enc, out_dir=tmp_path / "part")
        resumed = run_stage(cfg(6), sprites64, encoder=enc, out_dir=tmp_path / "part", resume=True)
        assert full.final_checkpoint.read_bytes() == resumed.final_checkpoint.read_bytes()


class TestLambda:
    def _setup(self):
        torch.manual_seed(0)
        enc = build_encoder(3, 1)
        enc.requires_grad_(False)
        gen, disc = build_gan_pair("mirror", 3, 64, seed=1)
        code = LatentCode(torch.zeros(8, 0), torch.randn(8, 3))
        return enc, gen, disc, code

    def _grad(self, gen, disc, code, reg):
        gen.zero_grad()
        fake = gen.generate(code.s, code.c)
        total = generator_loss(disc(fake)) + reg(fake, code)
        total.backward()
        return torch.cat([p.grad.reshape(-1) for p in gen.parameters()])

    def test_zero_lambda_contributes_nothing(self):
        enc, gen, disc, code = self._setup()
        plain = self._grad(gen, disc, code, lambda f, z: torch.zeros(()))
        reg = lambda f, z: 0.0 * r_id_loss(f, z.c, enc)
        assert torch.equal(self._grad(gen, disc, code, reg), plain)

    def test_zero_lambda_in_training(self, sprites64, stage1):
        enc = stage1.networks["encoder"]
        a = run_stage(short("idgan", lam=0.0), sprites64, encoder=enc)
        b = run_stage(short("idgan-no-distill"), sprites64, encoder=enc)
        assert all(v == 0.0 for s, t, v in a.curves if t == "stage2/r_id")
        assert parameter_hash(a.networks["generator"]) == parameter_hash(b.networks["generator"])

    def test_distillation_weight_monotone(self):
        enc, gen, disc, code = self._setup()
        plain = self._grad(gen, disc, code, lambda f, z: torch.zeros(()))
        prev_norm, prev_cos = -1.0, -2.0
        distill_only = self._grad(gen, disc, code, lambda f, z: r_id_loss(f, z.c, enc)) - plain
        for lam in (0.001, 0.01, 0.1, 1.0):
            total = self._grad(gen, disc, code, lambda f, z: lam * r_id_loss(f, z.c, enc))
            norm = (total - plain).norm().item()
            cos = torch.nn.functional.cosine_similarity(total, distill_only, dim=0).item()
            assert norm > prev_norm and cos > prev_cos
            prev_norm, prev_cos = norm, cos


class TestRunStage:
    def test_stage1_outputs(self, sprites64, tmp_path):
        cfg = VAEStageConfig(objective="factor-vae", c_dim=3, steps=4, log_every=2, checkpoint_every=2,
                             batch_size=8)
        res = run_stage(cfg, sprites64, out_dir=tmp_path)
        assert [p.name for p in res.checkpoints] == ["stage1_step_0000002.idgc", "stage1_step_0000004.idgc"]
        rows = read_curves(tmp_path / "curves.csv")
        assert {t for _, t, _ in rows} >= {"stage1/total", "stage1/tc_penalty", "stage1/tc_discriminator"}
        enc = load_stage_network(res.final_checkpoint, "encoder")
        assert parameter_hash(enc) == parameter_hash(res.networks["encoder"])

    def test_idgan_encoder_frozen(self, sprites64, stage1, tmp_path):
        enc = stage1.networks["encoder"]
        path = stage1_path = tmp_path / "stage1.idgc"
        from idgan.nets import save_checkpoint, module_tensors
        save_checkpoint(stage1_path, module_tensors(enc, "encoder."))
        before_file = path.read_bytes()
        res = run_stage(short("idgan", encoder_path=str(path)), sprites64, out_dir=tmp_path / "run")
        assert path.read_bytes() == before_file
        assert parameter_hash(res.networks["encoder"]) == parameter_hash(enc)

    def test_infogan_trains_its_encoder(self, sprites64):
        from idgan.nets import build_encoder as be
        res = run_stage(short("infogan"), sprites64)
        assert parameter_hash(res.networks["q"]) != parameter_hash(be(4, 1, 64, seed=10))

    @pytest.mark.parametrize("mode", ["idgan-e2e", "vaegan"])
    def test_joint_modes_update_encoder(self, sprites64, mode):
        res = run_stage(short(mode, steps=2), sprites64)
        assert parameter_hash(res.networks["encoder"]) != parameter_hash(build_encoder(4, 1, 64, seed=10))
        assert res.networks["generator"](torch.randn(2, 4)).shape == (2, 1, 64, 64)

    def test_cgan_conditional(self, sprites64, stage1):
        res = run_stage(short("cgan", steps=2), sprites64, encoder=stage1.networks["encoder"])
        assert res.networks["discriminator"].spec.c_dim == 4

    def test_seed_determinism(self, sprites64, stage1):
        enc = stage1.networks["encoder"]
        a = run_stage(short("idgan", steps=3), sprites64, encoder=enc)
        b = run_stage(short("idgan", steps=3), sprites64, encoder=enc)
        c = run_stage(short("idgan", steps=3, seed=1), sprites64, encoder=enc)
        assert parameter_hash(a.networks["generator"]) == parameter_hash(b.networks["generator"])
        assert parameter_hash(a.networks["generator"]) != parameter_hash(c.networks["generator"])

    @pytest.mark.parametrize("mode", ["stage1", "idgan"])
    def test_resume_bit_identical(self, sprites64, stage1, tmp_path, mode):
        enc = stage1.networks["encoder"]

        def cfg(steps):
            if mode == "stage1":
                return VAEStageConfig(c_dim=3, steps=steps, log_every=1, checkpoint_every=2, batch_size=8)
            return short("idgan", steps=steps, log_every=1)

        full = run_stage(cfg(6), sprites64, encoder=enc, out_dir=tmp_path / "full")
        run_stage(cfg(4), sprites64, encoder=enc, out_dir=tmp_path / "part")
        resumed = run_stage(cfg(6), sprites64, encoder=enc, out_dir=tmp_path / "part", resume=True)
        for name, net in full.networks.items():
            assert parameter_hash(net) == parameter_hash(resumed.networks[name]), name
        assert full.final_checkpoint.read_bytes() == resumed.final_checkpoint.read_bytes()
        assert read_curves(tmp_path / "full" / "curves.csv") == read_curves(tmp_path / "part" / "curves.csv")

    def test_refuses_to_overwrite(self, sprites64, tmp_path):
        cfg = VAEStageConfig(c_dim=2, steps=1, batch_size=4)
        run_stage(cfg, sprites64, out_dir=tmp_path)
        with pytest.raises(InvalidStateError):
            run_stage(cfg, sprites64, out_dir=tmp_path)

    def test_divergence_reports_step(self, sprites64):
        enc = build_encoder(4, 1)
        with torch.no_grad():
            next(enc.parameters()).fill_(float("nan"))
        with pytest.raises(TrainingDivergenceError) as err:
            run_stage(short("idgan"), sprites64, encoder=enc)
        assert err.value.step == 1

    def test_resolution_bridging(self, sprites64, sprites32):
        s1 = run_stage(VAEStageConfig(c_dim=3, steps=2, batch_size=8), sprites32)
        res = run_stage(short("idgan", steps=2), sprites64, encoder=s1.networks["encoder"])
        assert res.networks["generator"].spec.output_shape() == (1, 64, 64)

    def test_resnet_generator(self, sprites64, stage1):
        res = run_stage(short("idgan", arch="resnet", s_dim=2, steps=1, batch_size=4), sprites64,
                        encoder=stage1.networks["encoder"])
        gen = res.networks["generator"]
        assert (gen.s_dim, gen.c_dim) == (2, 4)

    def test_stage_generator_loader(self, sprites64, tmp_path):
        res = run_stage(short("vaegan", steps=2), sprites64, out_dir=tmp_path)
        gen = stage_generator(res.final_checkpoint)
        assert gen.generate(None, torch.zeros(1, 4)).shape == (1, 1, 64, 64)
        assert list_checkpoints(tmp_path / "checkpoints", "stage2")
