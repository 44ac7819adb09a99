"""Random tiny denoiser instances and a directional finite-difference check."""

from __future__ import annotations

import torch

from simcond import model as M

TINY = M.BackboneConfig(d=8, layers=1, heads=2, ff=16, max_frames=4, dtype="float64")


def randomize_adapters(model, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.adapter_parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def random_inputs(cfg, n, seed, frames=None):
    g = torch.Generator().manual_seed(seed)
    frames = frames or cfg.max_frames
    x = torch.randn(n, frames, cfg.frame_dim, generator=g, dtype=cfg.torch_dtype)
    t = torch.randint(0, 200, (n,), generator=g)
    c = torch.randint(-1, cfg.n_classes, (n,), generator=g)
    phi = torch.stack([
        -1 - 19 * torch.rand(n, generator=g, dtype=torch.float64),
        20 * torch.rand(n, generator=g, dtype=torch.float64) - 10,
        20 * torch.rand(n, generator=g, dtype=torch.float64) - 10,
    ], dim=1).to(cfg.torch_dtype)
    return x, t, c, phi


def directional_check(f, params, grads, gen, h=1e-5, directions=3):
    worst = 0.0
    with torch.no_grad():
        for name, p in params:
            for _ in range(directions):
                v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
                base = p.clone()
                p.copy_(base + h * v)
                fp = f().item()
                p.copy_(base - h * v)
                fm = f().item()
                p.copy_(base)
                num = (fp - fm) / (2 * h)
                ana = (grads[name] * v).sum().item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num)))
    return worst
