"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The trained-model criteria share one module-scoped pipeline: an Earth corpus,
a backbone trained on its artifact-laden references, Earth adapters trained on
its tracked clips, and adapters trained on a single-axis randomized corpus.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from simcond import cli, config
from simcond import datagen as G
from simcond import eval as E
from simcond import physics as P
from simcond import train as T
from simcond.diffusion import GuidedSampleConfig, StepSpacing, default_schedule, sample
from simcond.model import BackboneConfig, Denoiser, MotionCodec, Predictor, backward
from simcond.sampling import MotionSampler
from helpers import TINY, directional_check, random_inputs, randomize_adapters

torch.set_num_threads(1)

# shared training recipe
EARTH_CLIPS, RANDOM_CLIPS = 3000, 6000
BACKBONE_ITERS, EARTH_ITERS, RANDOM_ITERS = 12000, 16000, 8000
BATCH, LR = 64, 1e-3

EARTH_PHI = G.FIXED_EARTH_PHI
GRAVITIES = (-2.0, -5.0, -9.81, -15.0, -19.0)


def recipe(phase, iterations, seed, lr=LR):
    return T.TrainConfig(phase=phase, lr=lr, iterations=iterations, seed=seed, batch_size=BATCH,
                         lr_schedule="linear")


class Timer:
    def __init__(self):
        self.seconds = 0.0

    def __enter__(self):
        self._t0 = time.process_time()
        return self

    def __exit__(self, *exc):
        self.seconds += time.process_time() - self._t0


@pytest.fixture(scope="module")
def earth_corpus():
    with Timer() as clock:
        recs, _ = G.build_corpus(EARTH_CLIPS, G.RandomizationSpec(mode=G.FIXED_EARTH),
                                 config.CALIBRATED_THRESHOLDS["earth"], seed=7)
    return G.select(recs, G.REFERENCE), G.select(recs, G.TRACKED), clock.seconds


@pytest.fixture(scope="module")
def backbone(earth_corpus):
    refs, _, _ = earth_corpus
    with Timer() as clock:
        ckpt, curve = T.train_backbone(refs, recipe(T.BACKBONE, BACKBONE_ITERS, 0))
    return ckpt, curve, clock.seconds


@pytest.fixture(scope="module")
def earth_adapters(backbone, earth_corpus):
    _, tracked, _ = earth_corpus
    with Timer() as clock:
        ckpt, curve = T.train_adapters(backbone[0], tracked, recipe(T.ADAPTER, EARTH_ITERS, 1, lr=5 * LR))
    return ckpt, clock.seconds


@pytest.fixture(scope="module")
def random_adapters(backbone):
    recs, _ = G.build_corpus(RANDOM_CLIPS, G.RandomizationSpec(), config.CALIBRATED_THRESHOLDS["randomized"],
                             seed=8, include_references=False)
    ckpt, _ = T.train_adapters(backbone[0], recs, recipe(T.ADAPTER, RANDOM_ITERS, 2))
    return MotionSampler(ckpt)


def balanced(sampler, phi, n, seed):
    return sampler.sample(np.arange(n) % G.N_CLASSES, phi, n, seed)


def test_gradient_correctness(verdicts):
    t0 = time.perf_counter()
    worst = 0.0
    for inst in range(20):
        m = Denoiser(TINY, seed=inst)
        randomize_adapters(m, 1000 + inst)
        x, t, c, phi = random_inputs(TINY, 2, inst)
        gen = torch.Generator().manual_seed(2000 + inst)
        proj = torch.randn(x.shape, generator=gen, dtype=torch.float64)
        f = lambda: (m(x, t, c, phi, 0.7) * proj).sum()
        grads = backward(f(), m, freeze_backbone=False)
        worst = max(worst, directional_check(f, list(m.named_parameters()), grads, gen))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and secs < 60
    verdicts.record(1, "gradient correctness", ok, f"max rel err {worst:.2e} (<= 1e-5), {secs:.1f} s (< 60 s)")
    assert ok


def test_zero_init_and_bypass(verdicts):
    cfg = BackboneConfig(d=16, layers=2, heads=2, ff=32, max_frames=12)
    fresh = Denoiser(cfg, seed=0)
    trained = Denoiser(cfg, seed=0)
    randomize_adapters(trained, 7)
    mismatches = 0
    for k in range(100):
        x, t, c, phi = random_inputs(cfg, 1, k, frames=1 + k % cfg.max_frames)
        with torch.no_grad():
            base = fresh(x, t, c, None, use_adapters=False)
            mismatches += not torch.equal(fresh(x, t, c, phi, 1.0), base)
            mismatches += not torch.equal(trained(x, t, c, phi, 0.0), trained(x, t, c, None, use_adapters=False))
    ok = mismatches == 0
    verdicts.record(2, "zero-init and alpha=0 bypass", ok, f"{mismatches} of 200 outputs differ from backbone-only")
    assert ok


def test_sampler_recovers_gaussian(verdicts):
    t0 = time.process_time()
    mu, sd, n = 1.5, 0.5, 1000
    cfg = BackboneConfig(frame_dim=1, max_frames=1, d=32, layers=1, heads=2, ff=64)
    model = Denoiser(cfg, seed=0)
    sched = default_schedule()
    iters, batch = 3000, 256
    tc = T.TrainConfig(lr=1e-3, iterations=iters, batch_size=batch, lr_schedule="linear")
    opt = T.make_optimizer(model.backbone_parameters(), tc)
    decay = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 1.0 - k / iters)
    rng = np.random.default_rng(0)
    # the model works in standardized units, as every motion corpus does through its codec
    codec = MotionCodec(np.array([[mu]]), np.array([[sd]]))
    for _ in range(iters):
        x0 = torch.as_tensor(rng.standard_normal((batch, 1, 1)), dtype=torch.float32)
        loss = T.diffusion_loss(model, x0, np.zeros(batch, dtype=np.int64), None, sched, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        decay.step()
    eps = Predictor(model, use_adapters=False)
    cond, phi = np.zeros(n, dtype=np.int64), np.zeros((n, 3))

    def draw(**kw):
        z = sample(eps, cond, phi, GuidedSampleConfig(s_cfg=1.0, seed=1, **kw), sched, (1, 1), n)
        return z * codec.std + codec.mean

    ddpm = draw(sampler="ddpm").ravel()
    ddim = draw(sampler="ddim", spacing=StepSpacing.uniform(sched.T, 20), clip_x0=5.0).ravel()
    err = lambda x: (abs(x.mean() - mu) / mu, abs(x.std() - sd) / sd)
    (pm, ps), (im, is_) = err(ddpm), err(ddim)
    secs = time.process_time() - t0
    ok = pm <= 0.05 and ps <= 0.10 and im <= 0.10 and is_ <= 0.15 and secs < 300
    verdicts.record(3, "sampler sanity", ok,
                    f"DDPM mean/std err {pm:.1%}/{ps:.1%} (5%/10%), DDIM-20 {im:.1%}/{is_:.1%} (10%/15%), "
                    f"{secs:.0f} s")
    assert ok


def _free_flight(phi, vz, seconds):
    cfg = P.WorldConfig(kp=0.0, kd=0.0)
    frame = np.array([0, 0, 10.0, 0, 0.1, 9.1, 0, -0.1, 9.1, 0, 0, 10.65])
    state = P.SimState(np.array([0.0, 0.0, 10.0]), np.array([0.0, 0.0, vz]), np.array(False))
    top = 10.0
    for _ in range(int(round(seconds / cfg.dt_control))):
        state = P.step(state, frame, phi, cfg)
        top = max(top, state.root_pos[2])
    return top - 10.0, state.root_pos


def test_simulator_physics(verdicts):
    v, g, w = 3.0, 9.81, 5.0
    gain, _ = _free_flight(P.SimParams(-g, 0, 0), v, 1.0)
    apex_err = abs(gain - v**2 / (2 * g)) / (v**2 / (2 * g))
    _, pos = _free_flight(P.SimParams(-g, w, 0), 0.0, 1.0)
    wind_err = abs(pos[0] - 0.5 * w * 1.0**2) / (0.5 * w)
    worst = 0.0
    for label in (G.JUMP, G.WALK, G.HOP):
        for seed in range(5):
            ref = G.gen_reference(label, seed)
            for phi in (P.EARTH, P.SimParams(-2, 8, -8), P.SimParams(-19, -8, 8)):
                worst = max(worst, float(P.penetration(P.project(ref, phi))))
    tol_mm = P.WorldConfig().contact_tol * 1000
    ok = apex_err <= 0.01 and wind_err <= 0.02 and worst <= tol_mm
    verdicts.record(4, "simulator physics", ok,
                    f"apex err {apex_err:.2%} (1%), wind err {wind_err:.2%} (2%), "
                    f"projected penetration {worst:.1e} mm (<= {tol_mm:.0e})")
    assert ok


def test_backbone_training_reduces_loss(backbone):
    ma = backbone[1].moving_average()
    assert ma[-1] * 2 <= ma[0]


def test_plausibility_improves(verdicts, earth_corpus, backbone, earth_adapters):
    with Timer() as clock:
        per_seed = {"backbone": [], "adapters": []}
        frozen = MotionSampler(backbone[0], use_adapters=False)
        adapted = MotionSampler(earth_adapters[0])
        for seed in range(3):
            per_seed["backbone"].append(balanced(frozen, EARTH_PHI, 67, seed))
            per_seed["adapters"].append(balanced(adapted, EARTH_PHI, 67, seed))
    m = {k: {n: float(v.mean()) for n, v in E.plausibility(np.concatenate(s)).items()} for k, s in per_seed.items()}
    clean = np.stack([G.gen_reference(k % G.N_CLASSES, k, G.ArtifactConfig.clean()) for k in range(201)])
    clean_float = float(P.floating(clean).mean())
    bb, ad = m["backbone"], m["adapters"]
    pen_cut = 1 - ad["penetration_mm"] / bb["penetration_mm"]
    slide_cut = 1 - ad["sliding_mm"] / bb["sliding_mm"]
    closer = abs(ad["floating_mm"] - clean_float) < abs(bb["floating_mm"] - clean_float)
    secs = earth_corpus[2] + backbone[2] + earth_adapters[1] + clock.seconds
    ok = pen_cut >= 0.5 and slide_cut >= 0.5 and closer and secs < 1800
    verdicts.record(5, "plausibility improvement", ok,
                    f"penetration {bb['penetration_mm']:.2f}->{ad['penetration_mm']:.2f} mm (-{pen_cut:.0%}), "
                    f"sliding {bb['sliding_mm']:.2f}->{ad['sliding_mm']:.2f} mm (-{slide_cut:.0%}), "
                    f"floating {bb['floating_mm']:.1f}->{ad['floating_mm']:.1f} mm (clean {clean_float:.1f}), "
                    f"{secs / 60:.1f} CPU min")
    assert ok


def test_gravity_compliance(verdicts, random_adapters):
    curve = E.compliance_sweep(lambda phi, n, seed: random_adapters.sample(G.JUMP, phi, n, seed),
                               E.GRAVITY, GRAVITIES, 100, seed=3)
    ok = curve.spearman <= -0.8
    verdicts.record(6, "gravity compliance", ok,
                    f"Spearman {curve.spearman:.2f} (<= -0.8), apex {np.round(curve.responses, 3).tolist()}")
    assert ok


def test_wind_compliance(verdicts, random_adapters):
    agree = {}
    for axis in (E.WIND_X, E.WIND_Y):
        curve = E.compliance_sweep(lambda phi, n, seed: random_adapters.sample(G.JUMP, phi, n, seed),
                                   axis, (-8.0, 8.0), 100, seed=4)
        for v, a in zip(curve.values, curve.sign_agreement()):
            agree[f"{axis}={v:+g}"] = a
    ok = min(agree.values()) >= 0.9
    verdicts.record(7, "wind compliance", ok, ", ".join(f"{k} {v:.0%}" for k, v in agree.items()) + " (>= 90%)")
    assert ok


def test_compositional_generalization(verdicts, random_adapters):
    earth = P.apex_height(random_adapters.sample(G.JUMP, P.EARTH, 100, 8))
    motions = random_adapters.sample(G.JUMP, P.SimParams(-3.0, 5.0, 5.0), 100, 7)
    high = P.apex_height(motions) > np.median(earth)
    drift = P.horizontal_displacement(motions)
    joint = float(np.mean(high & (drift[:, 0] > 0) & (drift[:, 1] > 0)))
    ok = joint >= 0.8
    verdicts.record(8, "compositional generalization", ok,
                    f"{joint:.0%} elevated with +x and +y drift (>= 80%); "
                    f"apex {high.mean():.0%}, x {np.mean(drift[:, 0] > 0):.0%}, y {np.mean(drift[:, 1] > 0):.0%}")
    assert ok


def test_projection_vs_conditioning_speed(verdicts, backbone, random_adapters):
    phi = P.EARTH
    variants = {
        "projection": MotionSampler(backbone[0], use_adapters=False, project=True),
        "conditioned": random_adapters,
        "conditioned_ddim": MotionSampler(random_adapters.ckpt, sampler="ddim"),
    }
    table = E.timing_bench({k: (lambda seed, s=s: s.sample(G.JUMP, phi, 1, seed)) for k, s in variants.items()}, 20)
    med = {row["variant"]: row["median_s"] for row in table}
    proj_ratio = med["projection"] / med["conditioned"]
    ddim_ratio = med["conditioned"] / med["conditioned_ddim"]
    ok = proj_ratio >= 1.5 and ddim_ratio >= 5
    verdicts.record(9, "projection vs conditioning speed", ok,
                    f"projection-guided/conditioned {proj_ratio:.2f}x (>= 1.5), DDPM/DDIM {ddim_ratio:.1f}x (>= 5); "
                    + ", ".join(f"{k} {v * 1000:.0f} ms" for k, v in med.items()))
    assert ok


def test_projection_guided_samples_rest_on_ground(backbone):
    out = MotionSampler(backbone[0], use_adapters=False, project=True).sample(np.arange(6) % 3, P.EARTH, 6, 0)
    assert float(P.penetration(out).max()) <= P.WorldConfig().contact_tol * 1000


def test_adapter_scale_trend(verdicts, earth_corpus, earth_adapters):
    refs = np.stack([r.motion for r in earth_corpus[0]])
    rows = []
    for a in (0.1, 0.5, 1.0):
        motions = balanced(MotionSampler(earth_adapters[0], adapter_scale=a), EARTH_PHI, 200, 5)
        rows.append(E.summarize(f"alpha={a}", motions, refs, adapter_scale=a))
    slide = [r.sliding_mm for r in rows]
    ffd = [r.ffd for r in rows]
    ok = bool(np.all(np.diff(slide) <= 0) and np.all(np.diff(ffd) >= 0))
    verdicts.record(10, "adapter-scale trend", ok,
                    f"sliding {np.round(slide, 2).tolist()} non-increasing, FFD {np.round(ffd, 3).tolist()} "
                    "non-decreasing")
    assert ok


def _pipeline(root, monkeypatch):
    root.mkdir()
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(root))
    tiny = ["--d", "16", "--layers", "1", "--heads", "2", "--ff", "32", "--iterations", "30", "--batch-size", "8"]
    steps = [
        ["gen-data", "--mode", "earth", "--n", "24", "--seed", "3", "--jobs", "2", "--out", "earth.jsonl"],
        ["gen-data", "--mode", "randomized", "--n", "24", "--seed", "4", "--jobs", "2", "--out", "rand.jsonl"],
        ["train", "--data", "earth.jsonl", "--ckpt", "bb.ckpt", *tiny],
        ["train", "--phase", "adapter", "--data", "rand.jsonl", "--backbone", "bb.ckpt", "--ckpt", "ad.ckpt",
         *tiny, "--seed", "1"],
        ["sample", "--ckpt", "ad.ckpt", "--n", "8", "--phi", "-3,5,5", "--seed", "5", "--out", "s.jsonl"],
        ["sample", "--ckpt", "ad.ckpt", "--n", "8", "--sampler", "ddim", "--seed", "6", "--out", "d.jsonl"],
        ["eval", "--samples", "s.jsonl", "d.jsonl", "--ref", "earth.jsonl", "--out", "ev"],
    ]
    codes = [cli.main(s) for s in steps]
    names = ["earth.jsonl", "rand.jsonl", "bb.ckpt.loss.csv", "ad.ckpt.loss.csv", "s.jsonl", "d.jsonl",
             "ev/report.json", "ev/report.csv"]
    return codes, {n: (root / n).read_bytes() for n in names}


def test_pipeline_determinism(verdicts, tmp_path, monkeypatch):
    codes_a, a = _pipeline(tmp_path / "a", monkeypatch)
    codes_b, b = _pipeline(tmp_path / "b", monkeypatch)
    differ = [n for n in a if a[n] != b[n]]
    ok = codes_a == codes_b == [0] * len(codes_a) and not differ
    verdicts.record(11, "pipeline determinism", ok,
                    f"{len(a) - len(differ)} of {len(a)} artifacts byte-identical" + (f", differ: {differ}" if differ else ""))
    assert ok
