"""Conditional U-Net predictor, checkpoints and reduced-precision execution.

The network sees the noisy target and the conditioning patch concatenated on
the channel axis and returns a single-channel prediction (noise or velocity,
depending on how the checkpoint was trained).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, NumericError, ParameterError, ShapeError

CKPT_MAGIC = b"NFCK"
CKPT_VERSION = 1
DTYPE_F32, DTYPE_F16, DTYPE_I8 = 0, 1, 2


class PrecisionMode(str, Enum):
    FULL32 = "full32"
    HALF16 = "half16"
    WEIGHTS_INT8 = "weights_int8"


@dataclass(frozen=True)
class NetConfig:
    patch: int = 32
    in_channels: int = 2
    out_channels: int = 1
    base_width: int = 64
    level_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_resolution: int = 16
    t_embed_dim: int = 128
    norm_groups: int = 8
    blocks_per_level: int = 2

    def __post_init__(self):
        object.__setattr__(self, "level_multipliers", tuple(self.level_multipliers))
        if self.patch % (2 ** (len(self.level_multipliers) - 1)):
            raise ParameterError("patch must halve cleanly at every level")
        if self.t_embed_dim % 2:
            raise ParameterError("t_embed_dim must be even")
        for c in self.channels:
            if c % self.norm_groups:
                raise ParameterError(f"width {c} not divisible by norm_groups={self.norm_groups}")
        if self.blocks_per_level < 1:
            raise ParameterError("blocks_per_level must be >= 1")

    @property
    def channels(self) -> list[int]:
        return [self.base_width * m for m in self.level_multipliers]

    @property
    def resolutions(self) -> list[int]:
        return [self.patch >> i for i in range(len(self.level_multipliers))]

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) * 2.0 / dim)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, c: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, c)
        self.qkv = nn.Conv2d(c, 3 * c, 1)
        self.proj = nn.Conv2d(c, c, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).transpose(2, 3)
        out = F.scaled_dot_product_attention(qkv[:, 0:1], qkv[:, 1:2], qkv[:, 2:3])
        return x + self.proj(out[:, 0].transpose(1, 2).reshape(b, c, h, w))


class Level(nn.Module):
    def __init__(self, cin: int, cout: int, cfg: NetConfig, attend: bool):
        super().__init__()
        self.blocks = nn.ModuleList(
            ResBlock(cin if i == 0 else cout, cout, cfg.t_embed_dim, cfg.norm_groups)
            for i in range(cfg.blocks_per_level)
        )
        self.attn = nn.ModuleList(SelfAttention(cout, cfg.norm_groups) for _ in self.blocks) if attend else None

    def forward(self, x, emb):
        for i, block in enumerate(self.blocks):
            x = block(x, emb)
            if self.attn is not None:
                x = self.attn[i](x)
        return x


class UNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        chs, res = cfg.channels, cfg.resolutions
        d = cfg.t_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.conv_in = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cur = chs[0]
        for i, c in enumerate(chs):
            self.down.append(Level(cur, c, cfg, res[i] == cfg.attention_resolution))
            cur = c
            if i < len(chs) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = nn.ModuleList([
            ResBlock(cur, cur, d, cfg.norm_groups),
            ResBlock(cur, cur, d, cfg.norm_groups),
        ])
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chs))):
            self.up.append(Level(cur + chs[i], chs[i], cfg, res[i] == cfg.attention_resolution))
            cur = chs[i]
            if i > 0:
                self.upsample.append(nn.Conv2d(cur, cur, 3, padding=1))
        self.norm_out = nn.GroupNorm(cfg.norm_groups, cur)
        self.conv_out = nn.Conv2d(cur, cfg.out_channels, 3, padding=1)

    def forward(self, x_t, y, t):
        emb = self.time_mlp(timestep_embedding(t, self.cfg.t_embed_dim).to(x_t.dtype))
        h = self.conv_in(torch.cat([x_t, y], dim=1))
        skips = []
        for i, level in enumerate(self.down):
            h = level(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        for block in self.mid:
            h = block(h, emb)
        for j, level in enumerate(self.up):
            h = level(torch.cat([h, skips.pop()], dim=1), emb)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def param_count(cfg: NetConfig) -> int:
    """Closed-form parameter count, derived layer by layer from the config."""
    d = cfg.t_embed_dim

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    def res(cin, cout):
        n = 2 * cin + conv(cin, cout, 3) + d * cout + cout + 2 * cout + conv(cout, cout, 3)
        return n + (conv(cin, cout, 1) if cin != cout else 0)

    def attn(c):
        return 2 * c + conv(c, 3 * c, 1) + conv(c, c, 1)

    def level(cin, cout, attend):
        n, cur = 0, cin
        for _ in range(cfg.blocks_per_level):
            n += res(cur, cout) + (attn(cout) if attend else 0)
            cur = cout
        return n

    chs, rs = cfg.channels, cfg.resolutions
    total = 2 * (d * d + d) + conv(cfg.in_channels, chs[0], 3)
    cur = chs[0]
    for i, c in enumerate(chs):
        total += level(cur, c, rs[i] == cfg.attention_resolution)
        cur = c
        if i < len(chs) - 1:
            total += conv(c, c, 3)
    total += 2 * res(cur, cur)
    for i in reversed(range(len(chs))):
        total += level(cur + chs[i], chs[i], rs[i] == cfg.attention_resolution)
        cur = chs[i]
        if i > 0:
            total += conv(cur, cur, 3)
    return total + 2 * cur + conv(cur, cfg.out_channels, 3)


@dataclass(eq=False)
class Checkpoint:
    config: NetConfig
    params: dict[str, np.ndarray]
    schedule: dict = field(default_factory=lambda: {"kind": "linear", "T": 1000})
    objective: str = "noise"
    meta: dict = field(default_factory=dict)
    qparams: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    _modules: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.objective not in ("noise", "velocity"):
            raise ParameterError(f"unknown objective {self.objective!r}")

    @property
    def precision(self) -> PrecisionMode:
        return PrecisionMode.WEIGHTS_INT8 if self.qparams else PrecisionMode.FULL32

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values()) + sum(c.size for c, _ in self.qparams.values())

    def with_params(self, params: dict[str, np.ndarray], **meta) -> "Checkpoint":
        return Checkpoint(self.config, params, dict(self.schedule), self.objective, {**self.meta, **meta})


def expected_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    with torch.device("meta"):
        net = UNet(cfg)
    return {k: tuple(v.shape) for k, v in net.state_dict().items()}


def state_to_numpy(net: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in net.state_dict().items()}


def init(cfg: NetConfig, seed: int = 0, schedule: dict | None = None, objective: str = "noise") -> Checkpoint:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(cfg)
    nn.init.zeros_(net.conv_out.weight)
    nn.init.zeros_(net.conv_out.bias)
    return Checkpoint(
        cfg, state_to_numpy(net), dict(schedule or {"kind": "linear", "T": 1000}), objective, {"seed": seed}
    )


def module_from_params(cfg: NetConfig, params: dict[str, np.ndarray], dtype=torch.float32) -> UNet:
    net = UNet(cfg)
    net.load_state_dict({k: torch.from_numpy(np.asarray(v, dtype=np.float32).copy()) for k, v in params.items()})
    return net.to(dtype).eval().requires_grad_(False)


def quantize_int8(ckpt: Checkpoint) -> Checkpoint:
    """Per-output-channel symmetric 8-bit codes for every conv/linear weight."""
    if ckpt.qparams:
        return ckpt
    params, qparams = {}, {}
    for name, w in ckpt.params.items():
        if name.endswith(".weight") and w.ndim >= 2:
            qparams[name] = quantize_array(w)
        else:
            params[name] = w
    out = Checkpoint(ckpt.config, params, dict(ckpt.schedule), ckpt.objective, dict(ckpt.meta), qparams)
    return out


def quantize_array(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = w.reshape(w.shape[0], -1).astype(np.float64)
    amax = np.abs(flat).max(axis=1)
    scale = np.where(amax > 0, amax / 127.0, 1.0).astype(np.float32)
    codes = np.clip(np.rint(flat / scale.astype(np.float64)[:, None]), -127, 127).astype(np.int8)
    return codes.reshape(w.shape), scale


def dequantize_array(codes: np.ndarray, scale: np.ndarray) -> np.ndarray:
    shape = (-1,) + (1,) * (codes.ndim - 1)
    return (codes.astype(np.float32) * scale.reshape(shape)).astype(np.float32)


def dequantize(ckpt: Checkpoint) -> Checkpoint:
    """Full-precision checkpoint whose weights equal the dequantized int8 codes."""
    params = dict(ckpt.params)
    for name, (codes, scale) in ckpt.qparams.items():
        params[name] = dequantize_array(codes, scale)
    ordered = {k: params[k] for k in expected_shapes(ckpt.config)}
    return Checkpoint(ckpt.config, ordered, dict(ckpt.schedule), ckpt.objective, dict(ckpt.meta))


def get_module(ckpt: Checkpoint, mode: PrecisionMode | str = PrecisionMode.FULL32) -> UNet:
    mode = PrecisionMode(mode)
    net = ckpt._modules.get(mode)
    if net is not None:
        return net
    if mode == PrecisionMode.WEIGHTS_INT8:
        net = module_from_params(ckpt.config, dequantize(quantize_int8(ckpt)).params)
    else:
        source = dequantize(ckpt).params if ckpt.qparams else ckpt.params
        dtype = torch.float16 if mode == PrecisionMode.HALF16 else torch.float32
        net = module_from_params(ckpt.config, source, dtype)
    ckpt._modules[mode] = net
    return net


def _as_batch(a) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(a, dtype=np.float32)) if not isinstance(a, torch.Tensor) else a
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    return t.to(torch.float32)


def run_module(net: UNet, x_t: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net(x_t.to(dtype), y.to(dtype), t)
    out = out.to(torch.float32)
    if not torch.isfinite(out).all():
        raise NumericError("network produced non-finite output")
    return out


def forward(ckpt: Checkpoint, x_t, y, t, mode: PrecisionMode | str = PrecisionMode.FULL32):
    """Predict for a single 32x32 patch (or a batch); returns the input's array type."""
    cfg = ckpt.config
    as_numpy = not isinstance(x_t, torch.Tensor)
    xb, yb = _as_batch(x_t), _as_batch(y)
    p = cfg.patch
    if xb.shape[-2:] != (p, p) or yb.shape != xb.shape:
        raise ShapeError(f"expected {p}x{p} patches, got {tuple(xb.shape)} and {tuple(yb.shape)}")
    tb = torch.as_tensor(t, dtype=torch.float64).reshape(-1).expand(xb.shape[0])
    out = run_module(get_module(ckpt, mode), xb, yb, tb)
    if np.ndim(x_t) == 2:
        out = out[0, 0]
    return out.numpy() if as_numpy else out


def save(ckpt: Checkpoint) -> bytes:
    doc = json.dumps({
        "net": asdict(ckpt.config),
        "schedule": ckpt.schedule,
        "objective": ckpt.objective,
        "meta": ckpt.meta,
        "zero_point": 0,
    }, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(doc)), doc]
    names = list(expected_shapes(ckpt.config))
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        if name in ckpt.qparams:
            codes, scale = ckpt.qparams[name]
            dtype, shape = DTYPE_I8, codes.shape
            payload = codes.astype("<i1").tobytes() + scale.astype("<f4").tobytes()
        else:
            arr = ckpt.params[name]
            if arr.dtype == np.float16:
                dtype, payload = DTYPE_F16, arr.astype("<f2").tobytes()
            else:
                dtype, payload = DTYPE_F32, arr.astype("<f4").tobytes()
            shape = arr.shape
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", dtype, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape) + payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, doc_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        doc = json.loads(r.take(doc_len).decode("utf-8"))
        cfg = NetConfig.from_dict(doc["net"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    expected = expected_shapes(cfg)
    (count,) = r.unpack("<I")
    params, qparams = {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dtype, rank = r.unpack("<BB")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        if expected.get(name) != tuple(shape):
            raise FormatError(f"tensor {name!r} shape {shape} disagrees with config ({expected.get(name)})")
        if dtype == DTYPE_F32:
            params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
        elif dtype == DTYPE_F16:
            params[name] = np.frombuffer(r.take(2 * n), dtype="<f2").reshape(shape).copy()
        elif dtype == DTYPE_I8:
            codes = np.frombuffer(r.take(n), dtype="<i1").reshape(shape).copy()
            scale = np.frombuffer(r.take(4 * shape[0]), dtype="<f4").copy()
            qparams[name] = (codes, scale)
        else:
            raise FormatError(f"unknown dtype tag {dtype}")
    if r.pos != len(data):
        raise FormatError("trailing bytes after tensor table")
    if set(params) | set(qparams) != set(expected):
        raise FormatError("tensor table does not cover the configured network")
    return Checkpoint(cfg, params, doc["schedule"], doc["objective"], doc["meta"], qparams)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(save(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return load(Path(path).read_bytes())


def to_half_storage(ckpt: Checkpoint) -> Checkpoint:
    """Checkpoint with every float array stored at 16 bits."""
    params = {k: v.astype(np.float16) for k, v in ckpt.params.items()}
    return replace(ckpt, params=params)
