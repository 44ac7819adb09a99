from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from simcond import datagen as G
from simcond import train as T
from simcond.diffusion import NULL_COND, default_schedule
from simcond.errors import ParameterError, TrainingError, UsageError
from simcond.model import BackboneConfig, Denoiser

torch.set_num_threads(1)

SMALL = BackboneConfig(d=16, layers=1, heads=2, ff=32)


@pytest.fixture(scope="module")
def corpus():
    recs, _ = G.build_corpus(30, G.RandomizationSpec(), math.inf, seed=1)
    return G.select(recs, G.REFERENCE), G.select(recs, G.TRACKED)


def quick(**kw):
    base = dict(batch_size=8, lr=1e-3, iterations=12, seed=3)
    return T.TrainConfig(**{**base, **kw})


class TestLoss:
    def test_zero_model_loss_is_unit(self):
        sched = default_schedule()
        rng = np.random.default_rng(0)
        x0 = torch.randn(100, 10, 12, dtype=torch.float64)
        zero = lambda eps, xt, t: torch.zeros_like(eps)
        vals = [T.diffusion_loss(None, x0, np.zeros(100, dtype=int), None, sched, rng, eps_hook=zero).item()
                for _ in range(10)]
        assert np.mean(vals) == pytest.approx(1.0, rel=0.02)

    def test_cheating_model_has_zero_loss(self):
        rng = np.random.default_rng(0)
        x0 = torch.randn(4, 6, 12)
        cheat = lambda eps, xt, t: eps
        loss = T.diffusion_loss(None, x0, np.zeros(4, dtype=int), None, default_schedule(), rng, eps_hook=cheat)
        assert loss.item() == 0.0

    def test_empty_batch(self):
        with pytest.raises(ParameterError):
            T.diffusion_loss(None, torch.zeros(0, 6, 12), np.zeros(0, dtype=int), None,
                             default_schedule(), np.random.default_rng(0))

    def test_full_masking_touches_only_null_token(self):
        cfg = BackboneConfig(d=16, layers=1, heads=2, ff=32, max_frames=6)
        m = Denoiser(cfg, seed=0)
        x0 = torch.randn(16, 6, 12)
        loss = T.diffusion_loss(m, x0, np.arange(16) % 3, None, default_schedule(),
                                np.random.default_rng(1), cond_mask_prob=1.0)
        loss.backward()
        g = m.cls.weight.grad
        assert torch.count_nonzero(g[: cfg.n_classes]) == 0
        assert torch.count_nonzero(g[cfg.n_classes]) > 0

    def test_mask_rate(self):
        rng = np.random.default_rng(5)
        masked = T.mask_conditions(np.ones(100_000, dtype=int), 0.1, rng) == NULL_COND
        assert abs(masked.mean() - 0.1) <= 0.01

    def test_phi_never_masked(self, corpus):
        _, trk = corpus
        seen = []

        class Spy(Denoiser):
            def forward(self, x, t, cond, phi=None, alpha=1.0, use_adapters=True):
                seen.append(phi is not None and use_adapters)
                return super().forward(x, t, cond, phi, alpha, use_adapters)

        ck, _ = T.train_backbone(corpus[0], quick(iterations=1), SMALL)
        spy = Spy(ck.model.cfg)
        spy.load_state_dict(ck.model.state_dict())
        ck.model = spy
        T.train_adapters(ck, trk, quick(phase=T.ADAPTER, iterations=5, cond_mask_prob=0.5))
        assert len(seen) == 5 and all(seen)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"cond_mask_prob": 1.0}, {"cond_mask_prob": -0.1}, {"phase": "joint"},
        {"batch_size": 0}, {"lr": -1.0}, {"iterations": -1}, {"lr_schedule": "cosine"},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ParameterError):
            T.TrainConfig(**kw)

    def test_linear_decay_keeps_first_step_then_shrinks(self, corpus):
        def weights(**kw):
            ck, _ = T.train_backbone(corpus[0], quick(**kw), SMALL)
            return torch.cat([p.detach().flatten() for p in ck.model.backbone_parameters()])

        assert torch.equal(weights(iterations=1), weights(iterations=1, lr_schedule="linear"))
        assert not torch.equal(weights(iterations=4), weights(iterations=4, lr_schedule="linear"))

    def test_phase_mismatch(self, corpus):
        with pytest.raises(ParameterError):
            T.train_backbone(corpus[0], quick(phase=T.ADAPTER), SMALL)
        with pytest.raises(UsageError):
            T.train_adapters(None, corpus[1], quick(phase=T.ADAPTER))


def scalar_adam(grad_fn, x, lr, b1, b2, eps, steps):
    m = v = 0.0
    for k in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**k)
        vhat = v / (1 - b2**k)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
    return x


class TestOptimizer:
    def test_adam_matches_scalar_reference(self):
        cfg = T.TrainConfig(lr=0.05)
        p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
        opt = T.make_optimizer([p], cfg)
        for _ in range(100):
            opt.zero_grad()
            loss = (p - 0.5).pow(4).sum() + torch.sin(3 * p).sum()
            loss.backward()
            opt.step()
        grad = lambda x: 4 * (x - 0.5) ** 3 + 3 * math.cos(3 * x)
        ref = scalar_adam(grad, 2.0, 0.05, cfg.beta1, cfg.beta2, cfg.adam_eps, 100)
        assert p.item() == pytest.approx(ref, abs=1e-12)

    def test_zero_lr_leaves_parameters(self, corpus):
        ck0, _ = T.train_backbone(corpus[0], quick(iterations=0), SMALL)
        ck1, curve = T.train_backbone(corpus[0], quick(lr=0.0), SMALL)
        assert len(curve.losses) == 12
        for a, b in zip(ck0.model.parameters(), ck1.model.parameters()):
            assert torch.equal(a, b)


class TestTraining:
    def test_backbone_determinism(self, corpus):
        a, ca = T.train_backbone(corpus[0], quick(), SMALL)
        b, cb = T.train_backbone(corpus[0], quick(), SMALL)
        assert ca.losses == cb.losses
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(pa, pb)
        c, cc = T.train_backbone(corpus[0], quick(seed=4), SMALL)
        assert cc.losses != ca.losses

    def test_backbone_leaves_adapters_at_init(self, corpus):
        ck, _ = T.train_backbone(corpus[0], quick(), SMALL)
        for ad in ck.model.adapters:
            assert torch.count_nonzero(ad.up.weight) == 0

    def test_adapter_phase_freezes_backbone(self, corpus):
        ck, _ = T.train_backbone(corpus[0], quick(), SMALL)
        ad, curve = T.train_adapters(ck, corpus[1], quick(phase=T.ADAPTER))
        before = dict(ck.model.named_parameters())
        assert T.backbone_delta({n: before[n].detach() for n in ck.model.backbone_names()}, ad.model) == 0.0
        assert ad.meta["backbone_delta_l2"] == 0.0
        moved = [not torch.equal(p, ad.model.state_dict()[n]) for n, p in ck.model.state_dict().items()]
        assert any(moved)
        assert curve.phase == T.ADAPTER and len(curve.losses) == 12
        a2, c2 = T.train_adapters(ck, corpus[1], quick(phase=T.ADAPTER))
        assert c2.losses == curve.losses

    def test_divergence_reports_iteration(self, corpus):
        with pytest.raises(TrainingError) as info:
            T.train_backbone(corpus[0], quick(lr=1e12, iterations=50), SMALL)
        assert info.value.step is not None and 0 < info.value.step < 50

    def test_loss_csv(self, corpus, tmp_path):
        _, c = T.train_backbone(corpus[0], quick(iterations=3), SMALL)
        T.write_loss_csv([c], tmp_path / "l.csv")
        lines = (tmp_path / "l.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss,phase"
        assert [float(l.split(",")[1]) for l in lines[1:]] == c.losses

    def test_moving_average(self):
        c = T.LossCurve("backbone", list(range(200)))
        ma = c.moving_average(100)
        assert ma[0] == pytest.approx(49.5) and ma[-1] == pytest.approx(149.5)
        assert T.LossCurve("backbone", [2.0, 4.0]).moving_average().tolist() == [3.0]
