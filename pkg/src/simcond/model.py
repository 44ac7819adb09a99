"""Transformer denoiser with a frozen-able backbone, an environment encoder and
zero-initialised residual adapters, plus the motion codec and checkpoint IO."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ModeError, NumericDivergenceError, ParameterError, UsageError
from .physics import FEET, FRAME_DIM, HEAD, N_JOINTS, ROOT, EARTH_G

CONTINUOUS, CATEGORICAL = "continuous", "categorical"

# scaling applied to (g_z, w_x, w_y) before the encoder
PHI_CENTER = (EARTH_G, 0.0, 0.0)
PHI_SCALE = (10.0, 10.0, 10.0)


@dataclass(frozen=True)
class BackboneConfig:
    frame_dim: int = FRAME_DIM
    max_frames: int = 60
    n_classes: int = 3
    d: int = 64
    layers: int = 2
    heads: int = 4
    ff: int = 128
    adapter_rank: int | None = None
    sim_hidden: int = 16
    sim_mode: str = CONTINUOUS
    sim_categories: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        if self.d % self.heads:
            raise ParameterError(f"d={self.d} not divisible by heads={self.heads}")
        if self.sim_mode not in (CONTINUOUS, CATEGORICAL):
            raise ParameterError(f"unknown sim encoder mode {self.sim_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def rank(self) -> int:
        return self.adapter_rank or self.d // 2

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x):
        B, N, D = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ff)
        self.ff2 = nn.Linear(ff, d)

    def attend(self, h):
        return h + self.attn(self.ln1(h))

    def feed_forward(self, h):
        return h + self.ff2(F.silu(self.ff1(self.ln2(h))))


class SimEncoder(nn.Module):
    """Embeds the environment triple (or a categorical environment index) into ``d``."""

    def __init__(self, d: int, hidden: int = 16, mode: str = CONTINUOUS, categories: int = 32):
        super().__init__()
        self.mode = mode
        if mode == CONTINUOUS:
            self.inp = nn.Linear(3, hidden)
            self.register_buffer("center", torch.tensor(PHI_CENTER), persistent=False)
            self.register_buffer("scale", torch.tensor(PHI_SCALE), persistent=False)
        else:
            self.inp = nn.Embedding(categories, hidden)
        self.out = nn.Linear(hidden, d)

    def forward(self, phi):
        if self.mode == CONTINUOUS:
            if not torch.is_floating_point(phi):
                raise ModeError("continuous sim encoder expects real-valued phi")
            x = (phi - self.center.to(phi.dtype)) / self.scale.to(phi.dtype)
        else:
            if torch.is_floating_point(phi):
                raise ModeError("categorical sim encoder expects integer environment indices")
            x = self.inp(phi)
            return self.out(F.silu(x))
        return self.out(F.silu(self.inp(x)))


class Adapter(nn.Module):
    """h + alpha * up(SiLU(down(h + sim(e_sim)))), with ``up`` zero-initialised."""

    def __init__(self, d: int, rank: int):
        super().__init__()
        self.sim = nn.Linear(d, d, bias=False)
        self.down = nn.Linear(d, rank)
        self.up = nn.Linear(rank, d)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, h, e_sim, alpha):
        z = h + self.sim(e_sim)[:, None, :]
        return h + alpha * self.up(F.silu(self.down(z)))


def adapter_forward(h, e_sim, alpha, adapter: Adapter):
    """Tokenwise adapter refinement; ``h`` is (B, N, d), ``e_sim`` is (B, d)."""
    return adapter(h, e_sim, alpha)


def sim_encode(phi, encoder: SimEncoder):
    return encoder(phi)


class Denoiser(nn.Module):
    """Noise predictor over ``(B, F, frame_dim)`` inputs.

    A prepended condition token carries the timestep embedding plus a class
    embedding (row ``n_classes`` is the learned null token). Each layer runs
    attention, an adapter, the feed-forward block and a second adapter.
    """

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
            d = cfg.d
            self.inp = nn.Linear(cfg.frame_dim, d)
            self.pos = nn.Parameter(0.02 * torch.randn(cfg.max_frames + 1, d))
            self.time1 = nn.Linear(d, d)
            self.time2 = nn.Linear(d, d)
            self.cls = nn.Embedding(cfg.n_classes + 1, d)
            nn.init.normal_(self.cls.weight, std=0.02)
            self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.ff) for _ in range(cfg.layers))
            self.ln_out = nn.LayerNorm(d)
            self.outp = nn.Linear(d, cfg.frame_dim)
            self.sim_encoder = SimEncoder(d, cfg.sim_hidden, cfg.sim_mode, cfg.sim_categories)
            self.adapters = nn.ModuleList(Adapter(d, cfg.rank) for _ in range(2 * cfg.layers))
        self.to(cfg.torch_dtype)

    @property
    def null_class(self) -> int:
        return self.cfg.n_classes

    def adapter_modules(self) -> list[nn.Module]:
        return [self.sim_encoder, self.adapters]

    def adapter_parameters(self):
        return [p for m in self.adapter_modules() for p in m.parameters()]

    def backbone_parameters(self):
        ids = {id(p) for p in self.adapter_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def backbone_names(self) -> list[str]:
        ids = {id(p) for p in self.adapter_parameters()}
        return [n for n, p in self.named_parameters() if id(p) not in ids]

    def forward(self, x, t, cond, phi=None, alpha: float = 1.0, use_adapters: bool = True):
        B, Fr, _ = x.shape
        if Fr > self.cfg.max_frames:
            raise ParameterError(f"{Fr} frames exceed max_frames={self.cfg.max_frames}")
        cond = torch.where(cond < 0, torch.full_like(cond, self.null_class), cond)
        temb = timestep_embedding(t, self.cfg.d).to(x.dtype)
        ctok = self.time2(F.silu(self.time1(temb))) + self.cls(cond)
        h = torch.cat([ctok[:, None, :], self.inp(x)], dim=1) + self.pos[: Fr + 1]
        adapt = use_adapters and phi is not None
        e_sim = self.sim_encoder(phi) if adapt else None
        for k, blk in enumerate(self.blocks):
            h = blk.attend(h)
            if adapt:
                h = self.adapters[2 * k](h, e_sim, alpha)
            h = blk.feed_forward(h)
            if adapt:
                h = self.adapters[2 * k + 1](h, e_sim, alpha)
        out = self.outp(self.ln_out(h[:, 1:]))
        if not torch.isfinite(out).all():
            raise NumericDivergenceError("non-finite denoiser activations")
        return out

    def freeze_backbone(self, frozen: bool = True) -> None:
        for p in self.backbone_parameters():
            p.requires_grad_(not frozen)


def backward(loss: torch.Tensor, model: Denoiser, freeze_backbone: bool) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients for every named parameter.

    Backbone entries are exact zeros when ``freeze_backbone`` is set.
    """
    if loss.grad_fn is None:
        raise UsageError("loss carries no graph; run a forward pass with gradients enabled")
    frozen = set(model.backbone_names()) if freeze_backbone else set()
    names, params = [], []
    for n, p in model.named_parameters():
        if n not in frozen:
            names.append(n)
            params.append(p)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    got = dict(zip(names, grads))
    for n, p in model.named_parameters():
        g = got.get(n)
        out[n] = torch.zeros_like(p) if g is None else g
    return out


# --- motion codec ----------------------------------------------------------

REST_XY = np.zeros((N_JOINTS, 2))
REST_XY[FEET[0], 1] = 0.1
REST_XY[FEET[1], 1] = -0.1


def _to_features(motion: np.ndarray) -> np.ndarray:
    j = np.asarray(motion, dtype=np.float64).reshape(motion.shape[:-1] + (N_JOINTS, 3))
    out = j.copy()
    feet = list(FEET)
    xy = j[..., feet, :2]
    prev = np.concatenate([np.broadcast_to(REST_XY[feet], xy[..., :1, :, :].shape), xy[..., :-1, :, :]], axis=-3)
    out[..., feet, :2] = xy - prev
    out[..., HEAD, :2] = j[..., HEAD, :2] - j[..., ROOT, :2]
    return out.reshape(motion.shape)


def _from_features(feat: np.ndarray) -> np.ndarray:
    j = np.asarray(feat, dtype=np.float64).reshape(feat.shape[:-1] + (N_JOINTS, 3)).copy()
    feet = list(FEET)
    j[..., feet, :2] = np.cumsum(j[..., feet, :2], axis=-3) + REST_XY[feet]
    j[..., HEAD, :2] = j[..., HEAD, :2] + j[..., ROOT, :2]
    return j.reshape(feat.shape)


@dataclass
class MotionCodec:
    """Invertible linear map between joint positions and normalised features.

    Foot horizontal coordinates become frame-to-frame displacements, the head
    is expressed relative to the root, root and heights stay absolute; every
    (frame, feature) entry is then standardised.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, motions: np.ndarray, std_floor: float = 1e-4) -> "MotionCodec":
        feats = _to_features(np.asarray(motions, dtype=np.float64))
        return cls(feats.mean(axis=0), np.maximum(feats.std(axis=0), std_floor))

    @classmethod
    def identity(cls, n_frames: int, frame_dim: int = FRAME_DIM) -> "MotionCodec":
        return cls(np.zeros((n_frames, frame_dim)), np.ones((n_frames, frame_dim)))

    def encode(self, motions: np.ndarray) -> np.ndarray:
        return (_to_features(motions) - self.mean) / self.std

    def decode(self, z: np.ndarray) -> np.ndarray:
        return _from_features(np.asarray(z, dtype=np.float64) * self.std + self.mean)


class Predictor:
    """Numpy-facing noise predictor used by the samplers."""

    def __init__(self, model: Denoiser, use_adapters: bool = True):
        self.model = model
        self.use_adapters = use_adapters
        self.dtype = model.cfg.torch_dtype

    def __call__(self, x, t, cond, phi, alpha):
        with torch.no_grad():
            xt = torch.as_tensor(np.asarray(x), dtype=self.dtype)
            tt = torch.as_tensor(np.asarray(t), dtype=torch.long)
            ct = torch.as_tensor(np.asarray(cond), dtype=torch.long)
            if self.model.cfg.sim_mode == CATEGORICAL:
                pt = torch.as_tensor(np.asarray(phi), dtype=torch.long)
            else:
                pt = torch.as_tensor(np.asarray(phi), dtype=self.dtype)
            out = self.model(xt, tt, ct, pt, float(alpha), use_adapters=self.use_adapters)
        return out.numpy().astype(np.float64)


# --- checkpoint ------------------------------------------------------------

MAGIC = b"SIMCKPT\x01"
CHECKPOINT_SCHEMA = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class Checkpoint:
    model: Denoiser
    codec: MotionCodec
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: Denoiser, codec: MotionCodec, meta: dict | None = None) -> None:
    tensors = [(n, p.detach().cpu().numpy()) for n, p in model.state_dict().items()]
    tensors += [("codec.mean", codec.mean), ("codec.std", codec.std)]
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        dt = "float64" if arr.dtype == np.float64 else "float32"
        raw = arr.astype(_DTYPES[dt]).astype("<" + np.dtype(_DTYPES[dt]).str[1:]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "config": asdict(model.cfg),
        "meta": meta or {},
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise UsageError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + hlen])
    if header.get("schema") != CHECKPOINT_SCHEMA:
        raise UsageError(f"{path}: unsupported checkpoint schema {header.get('schema')!r}")
    body = data[start + hlen:]
    arrays = {}
    for e in header["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
        buf = body[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(_DTYPES[e["dtype"]])
    cfg = BackboneConfig(**header["config"])
    model = Denoiser(cfg)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items() if not k.startswith("codec.")}
    model.load_state_dict(state)
    codec = MotionCodec(arrays["codec.mean"], arrays["codec.std"])
    return Checkpoint(model, codec, header.get("meta", {}))
