"""Mask prediction network, robust inpainting network and critic at toy scale.

The mask predictor (MPN) maps a degraded image to a soft damage map and
exposes its bottleneck; the inpainting network (RIN) consumes the image, the
soft map (at every contextual block) and the MPN bottleneck (concatenated into
its own bottleneck, then mixed by a 1x1 conv).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError
from .numerics import DEFAULT
from .pcn import PCB


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    in_channels: int = 3
    base_channels: int = 16
    n_down: int = 3
    mpn_bottleneck_blocks: int = 2
    rin_blocks: int = 4
    disc_layers: int = 4
    se_reduction: int = 4
    eps: float = DEFAULT.epsilon
    slope: float = 0.2

    def validate(self) -> None:
        if self.image_size % (2**self.n_down):
            raise ConfigError(f"image size {self.image_size} not divisible by 2**{self.n_down}")
        if self.image_size % (2**self.disc_layers):
            raise ConfigError(f"image size {self.image_size} not divisible by 2**{self.disc_layers}")
        if min(self.base_channels, self.n_down, self.disc_layers) < 1:
            raise ConfigError("channel and depth settings must be positive")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.n_down


# 16x16 toy used for end-to-end finite-difference checks.
TINY = NetConfig(image_size=16, base_channels=4, n_down=2, mpn_bottleneck_blocks=1, rin_blocks=2, disc_layers=2)


def _init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            nn.init.normal_(m.weight, 0.0, (2.0 / fan_in) ** 0.5)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _check_input(x: Tensor, cfg: NetConfig) -> None:
    if x.dim() != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (N, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
    stride = 2**cfg.n_down
    if x.shape[-2] % stride or x.shape[-1] % stride:
        raise ValueError(f"input size {tuple(x.shape[-2:])} not divisible by total stride {stride}")


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, slope: float = 0.2):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, stride=stride) if (cin != cout or stride != 1) else None
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(F.leaky_relu(self.conv1(x), self.slope))
        s = x if self.skip is None else self.skip(x)
        return F.leaky_relu(s + y, self.slope)


class UpBlock(nn.Module):
    """Nearest 2x upsample followed by a residual block."""

    def __init__(self, cin: int, cout: int, slope: float = 0.2):
        super().__init__()
        self.block = ResBlock(cin, cout, 1, slope)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(F.interpolate(x, scale_factor=2, mode="nearest"))


class UpConv(nn.Module):
    def __init__(self, cin: int, cout: int, slope: float = 0.2):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")), self.slope)


class MPN(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        b, s = cfg.base_channels, cfg.slope
        widths = [b * 2**i for i in range(cfg.n_down + 1)]
        self.stem = nn.Conv2d(cfg.in_channels, b, 3, padding=1)
        self.down = nn.ModuleList(ResBlock(widths[i], widths[i + 1], 2, s) for i in range(cfg.n_down))
        self.middle = nn.ModuleList(ResBlock(widths[-1], widths[-1], 1, s) for _ in range(cfg.mpn_bottleneck_blocks))
        self.up = nn.ModuleList(UpBlock(widths[i + 1], widths[i], s) for i in reversed(range(cfg.n_down)))
        self.head = nn.Conv2d(b, 1, 3, padding=1)
        _init_weights(self)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        _check_input(x, self.cfg)
        y = F.leaky_relu(self.stem(x), self.cfg.slope)
        for block in self.down:
            y = block(y)
        for block in self.middle:
            y = block(y)
        bottleneck = y
        for block in self.up:
            y = block(y)
        return torch.sigmoid(self.head(y)), bottleneck


class RIN(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        b, s = cfg.base_channels, cfg.slope
        widths = [b * 2**i for i in range(cfg.n_down + 1)]
        self.stem = nn.Conv2d(cfg.in_channels, b, 3, padding=1)
        self.down = nn.ModuleList(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(cfg.n_down))
        self.fuse = nn.Conv2d(2 * widths[-1], widths[-1], 1)
        self.blocks = nn.ModuleList(PCB(widths[-1], cfg.se_reduction, cfg.eps, s) for _ in range(cfg.rin_blocks))
        self.up = nn.ModuleList(UpConv(widths[i + 1], widths[i], s) for i in reversed(range(cfg.n_down)))
        self.head = nn.Conv2d(b, cfg.in_channels, 3, padding=1)
        _init_weights(self)

    def forward(self, x: Tensor, mask: Tensor, bottleneck: Tensor) -> Tensor:
        _check_input(x, self.cfg)
        if mask.shape[0] != x.shape[0] or mask.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"mask {tuple(mask.shape)} does not match image {tuple(x.shape)}")
        s = self.cfg.slope
        y = F.leaky_relu(self.stem(x), s)
        for conv in self.down:
            y = F.leaky_relu(conv(y), s)
        if bottleneck.shape[0] != y.shape[0] or bottleneck.shape[1] != y.shape[1]:
            raise ValueError(f"bottleneck {tuple(bottleneck.shape)} incompatible with {tuple(y.shape)}")
        if bottleneck.shape[-2:] != y.shape[-2:]:
            bottleneck = F.interpolate(bottleneck, size=y.shape[-2:], mode="nearest")
        y = F.leaky_relu(self.fuse(torch.cat([y, bottleneck], dim=1)), s)
        for block in self.blocks:
            y = block(y, mask)
        for block in self.up:
            y = block(y)
        return torch.tanh(self.head(y))


class Discriminator(nn.Module):
    """Strided conv stack and a linear read-out; one unbounded score per image."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.in_channels] + [cfg.base_channels * 2**i for i in range(cfg.disc_layers)]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(cfg.disc_layers)
        )
        side = cfg.image_size // 2**cfg.disc_layers
        self.fc = nn.Linear(widths[-1] * side * side, 1)
        _init_weights(self)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"critic expects {self.cfg.image_size}px inputs, got {tuple(x.shape[-2:])}")
        y = x
        for conv in self.convs:
            y = F.leaky_relu(conv(y), self.cfg.slope)
        return self.fc(y.flatten(1)).squeeze(1)


def mpn_forward(model: MPN, image: Tensor) -> tuple[Tensor, Tensor]:
    return model(image)


def rin_forward(model: RIN, image: Tensor, mask: Tensor, bottleneck: Tensor) -> Tensor:
    return model(image, mask, bottleneck)


def vcn_forward(mpn: MPN, rin: RIN, image: Tensor) -> tuple[Tensor, Tensor]:
    """Blind inpainting: predict the damage map, then repair conditioned on it."""
    mask, bottleneck = mpn(image)
    return rin(image, mask, bottleneck), mask


def disc_forward(model: nn.Module, image: Tensor) -> Tensor:
    return model(image)


def build_models(cfg: NetConfig = NetConfig(), seed: int = 0, dtype: torch.dtype = torch.float32):
    """Seeded (MPN, RIN, critic) triple."""
    torch.manual_seed(seed)
    mpn, rin, disc = MPN(cfg), RIN(cfg), Discriminator(cfg)
    return mpn.to(dtype), rin.to(dtype), disc.to(dtype)


# ---------------------------------------------------------------------------
# Parameter-count audit
# ---------------------------------------------------------------------------


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _conv(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def _res(cin: int, cout: int, stride: int = 1) -> int:
    n = _conv(cin, cout, 3) + _conv(cout, cout, 3)
    return n + (_conv(cin, cout, 1) if (cin != cout or stride != 1) else 0)


def expected_parameter_counts(cfg: NetConfig) -> dict[str, int]:
    """Parameter totals derived from the layer arithmetic alone."""
    b, c = cfg.base_channels, cfg.in_channels
    w = [b * 2**i for i in range(cfg.n_down + 1)]
    mpn = _conv(c, b, 3) + _conv(b, 1, 3)
    mpn += sum(_res(w[i], w[i + 1], 2) for i in range(cfg.n_down))
    mpn += cfg.mpn_bottleneck_blocks * _res(w[-1], w[-1])
    mpn += sum(_res(w[i + 1], w[i]) for i in range(cfg.n_down))

    hidden = max(1, w[-1] // cfg.se_reduction)
    gate = 2 * w[-1] * hidden
    pcb = 2 * _conv(w[-1], w[-1], 3) + 2 * gate
    rin = _conv(c, b, 3) + _conv(b, c, 3) + _conv(2 * w[-1], w[-1], 1)
    rin += sum(_conv(w[i], w[i + 1], 3) for i in range(cfg.n_down))
    rin += cfg.rin_blocks * pcb
    rin += sum(_conv(w[i + 1], w[i], 3) for i in range(cfg.n_down))

    dw = [c] + [b * 2**i for i in range(cfg.disc_layers)]
    side = cfg.image_size // 2**cfg.disc_layers
    disc = sum(_conv(dw[i], dw[i + 1], 3) for i in range(cfg.disc_layers)) + dw[-1] * side * side + 1
    return {"mpn": mpn, "rin": rin, "disc": disc}


# ---------------------------------------------------------------------------
# Checkpoint format
#
#   b"VCNCKPT1" | u32 count | count * record
#   record = u32 name_len | utf8 name | u8 dtype tag | u32 rank | u32 dims[rank] | data
#
# All integers and tensor data are little-endian, data row-major.
# ---------------------------------------------------------------------------

MAGIC = b"VCNCKPT1"
_DTYPES: dict[int, tuple[torch.dtype, str]] = {
    1: (torch.float32, "<f4"),
    2: (torch.float64, "<f8"),
    3: (torch.int64, "<i8"),
    4: (torch.int32, "<i4"),
    5: (torch.uint8, "u1"),
}
_TAGS = {dt: tag for tag, (dt, _) in _DTYPES.items()}


def encode_checkpoint(tensors: Mapping[str, Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TAGS:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        tag = _TAGS[t.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", tag, t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype(_DTYPES[tag][1], copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, Tensor]:
    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    (count,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        tag, rank = struct.unpack_from("<BI", blob, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        dtype, np_dtype = _DTYPES[tag]
        count_items = int(np.prod(dims, dtype=np.int64))
        nbytes = count_items * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(blob, dtype=np_dtype, count=count_items, offset=pos).reshape(dims)
        pos += nbytes
        out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if pos != len(blob):
        raise ValueError(f"{len(blob) - pos} trailing bytes in checkpoint")
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    return decode_checkpoint(Path(path).read_bytes())


def json_tensor(obj) -> Tensor:
    return torch.tensor(list(json.dumps(obj, sort_keys=True).encode("utf-8")), dtype=torch.uint8)


def tensor_json(t: Tensor):
    return json.loads(bytes(t.tolist()).decode("utf-8"))


def model_tensors(mpn: MPN, rin: RIN, disc: Discriminator | None = None) -> dict[str, Tensor]:
    tensors = {"meta.net": json_tensor(asdict(mpn.cfg))}
    for prefix, model in (("mpn", mpn), ("rin", rin), ("disc", disc)):
        if model is not None:
            tensors.update({f"{prefix}.{k}": v for k, v in model.state_dict().items()})
    return tensors


def models_from_tensors(tensors: Mapping[str, Tensor], dtype: torch.dtype = torch.float32):
    cfg = NetConfig(**tensor_json(tensors["meta.net"]))
    mpn, rin, disc = build_models(cfg, dtype=dtype)
    for prefix, model in (("mpn", mpn), ("rin", rin), ("disc", disc)):
        state = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        if state:
            model.load_state_dict(state)
    return mpn, rin, disc
