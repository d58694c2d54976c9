"""Reconstruction and localization networks plus their losses.

The reconstruction net is a plain convolutional autoencoder (no skip
connections, so the bottleneck has to model normal appearance). The
localization net is U-shaped with skip connections; at every encoder
level the frozen reconstruction encoder's activations can be concatenated
channel-wise with the localization activations, and the combined map
feeds both the next encoder level and the decoder skip at that level.

Blocks are normalization-free: two 3x3 convolutions with ReLU per level,
2x max-pool downsampling, nearest-neighbor upsampling, sigmoid heads.
Initialization is fan-in-scaled uniform from an explicit seed, so a
fixed config yields bit-identical parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn


class CheckpointError(Exception):
    """Checkpoint file is malformed or from a mismatched configuration."""


STAGE_RECON = "reconstruction"
STAGE_LOC = "localization"


@dataclass(frozen=True)
class NetConfig:
    levels: int = 4
    base_channels: int = 32
    input_size: int = 768
    seed: int = 0

    def validate(self) -> "NetConfig":
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        stride = 2 ** (self.levels - 1)
        if self.input_size % stride != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^(levels-1) = {stride}"
            )
        return self

    def channels(self) -> list[int]:
        """Encoder output channels per level: base, 2*base, 4*base, ..."""
        return [self.base_channels * (2 ** i) for i in range(self.levels)]


@dataclass(frozen=True)
class LossConfig:
    tau: float = 2.0
    eps: float = 1e-7

    def validate(self) -> "LossConfig":
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if not (0 < self.eps < 0.5):
            raise ValueError(f"eps must be in (0, 0.5), got {self.eps}")
        return self


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with ReLU, no normalization."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


def _init_params(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled uniform weights, zero biases, from an explicit seed."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.dim() > 1:
                fan_in = int(np.prod(p.shape[1:]))
                bound = float(np.sqrt(1.0 / fan_in))
                values = torch.empty(p.shape, dtype=torch.float64)
                values.uniform_(-bound, bound, generator=gen)
                p.copy_(values.to(p.dtype))
            else:
                p.zero_()


class ReconstructionNet(nn.Module):
    """Autoencoder without skips, sigmoid-bounded output."""

    def __init__(self, cfg: NetConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = cfg.channels()
        self.enc = nn.ModuleList()
        prev = 3
        for c in chans:
            self.enc.append(ConvBlock(prev, c))
            prev = c
        self.dec = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.dec.append(ConvBlock(prev, c))
            prev = c
        self.head = nn.Conv2d(prev, 3, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        _init_params(self, cfg.seed)
        self.to(dtype)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Activations after each encoder level; level i is input/2^i."""
        feats = []
        for i, block in enumerate(self.enc):
            x = block(x if i == 0 else self.pool(x))
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.encode(x)
        y = feats[-1]
        for block in self.dec:
            y = block(self.up(y))
        return torch.sigmoid(self.head(y))


class LocalizationNet(nn.Module):
    """U-shaped segmentation net with optional extra skip channels.

    `extra_channels[i]` is the width of an externally supplied feature
    map concatenated at encoder level i (zero to disable). Skips carry
    the concatenated maps, so the decoder consumes exactly the combined
    width at every level. Output is a per-pixel probability map.
    """

    def __init__(self, cfg: NetConfig, extra_channels: tuple[int, ...] | None = None,
                 in_channels: int = 3, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        chans = cfg.channels()
        if extra_channels is None:
            extra_channels = tuple(0 for _ in chans)
        if len(extra_channels) != cfg.levels:
            raise ValueError(
                f"extra_channels has {len(extra_channels)} entries for {cfg.levels} levels"
            )
        self.extra_channels = tuple(int(c) for c in extra_channels)

        self.enc = nn.ModuleList()
        prev = in_channels
        skip_widths = []
        for i, c in enumerate(chans):
            self.enc.append(ConvBlock(prev, c))
            width = c + self.extra_channels[i]
            skip_widths.append(width)
            prev = width
        self.dec = nn.ModuleList()
        prev = skip_widths[-1]
        for i in range(cfg.levels - 2, -1, -1):
            self.dec.append(ConvBlock(prev + skip_widths[i], chans[i]))
            prev = chans[i]
        self.head = nn.Conv2d(prev, 1, 1)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        _init_params(self, cfg.seed)
        self.to(dtype)

    def forward(self, x: torch.Tensor,
                extra_feats: list[torch.Tensor] | None = None) -> torch.Tensor:
        if any(self.extra_channels):
            if extra_feats is None or len(extra_feats) != self.cfg.levels:
                raise ValueError(
                    f"expected {self.cfg.levels} external feature maps, "
                    f"got {0 if extra_feats is None else len(extra_feats)}"
                )
            for i, (f, c) in enumerate(zip(extra_feats, self.extra_channels)):
                if f.shape[1] != c:
                    raise ValueError(
                        f"level {i}: external features have {f.shape[1]} channels, expected {c}"
                    )
        elif extra_feats:
            raise ValueError("this net takes no external features, but some were supplied")
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x if i == 0 else self.pool(x))
            if self.extra_channels[i]:
                x = torch.cat([extra_feats[i], x], dim=1)
            skips.append(x)
        y = skips[-1]
        for j, block in enumerate(self.dec):
            level = self.cfg.levels - 2 - j
            y = block(torch.cat([self.up(y), skips[level]], dim=1))
        return torch.sigmoid(self.head(y))


def recon_loss(recon, target) -> torch.Tensor:
    """Mean squared difference over all pixels and channels."""
    recon = torch.as_tensor(recon)
    target = torch.as_tensor(target, dtype=recon.dtype)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(target.shape)}")
    return torch.mean((recon - target) ** 2)


def focal_loss(pred, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean focal loss for a probability map against a binary mask.

    Per pixel: -(1-p)^tau * log(p) on mask pixels and -p^tau * log(1-p)
    elsewhere. Probabilities are clamped away from {0, 1} before the
    logs; tau = 0 reduces to plain binary cross-entropy.
    """
    cfg.validate()
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = torch.clamp(pred, cfg.eps, 1.0 - cfg.eps)
    m = target.to(p.dtype)
    loss_pos = -((1.0 - p) ** cfg.tau) * torch.log(p)
    loss_neg = -(p ** cfg.tau) * torch.log(1.0 - p)
    return torch.mean(m * loss_pos + (1.0 - m) * loss_neg)


def to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) numpy image to a (1, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))[None]).to(dtype)


def recon_forward(net: ReconstructionNet, img: np.ndarray) -> np.ndarray:
    """Single-image reconstruction, numpy in / numpy out."""
    _check_input_size(net.cfg, img)
    with torch.no_grad():
        out = net(to_tensor(img, _net_dtype(net)))
    return out[0].numpy().transpose(1, 2, 0).astype(np.float64)


def extract_recon_features(net: ReconstructionNet, img: np.ndarray) -> list[torch.Tensor]:
    """Per-level encoder activations for one image; parameters untouched."""
    _check_input_size(net.cfg, img)
    with torch.no_grad():
        return net.encode(to_tensor(img, _net_dtype(net)))


def loc_forward(net: LocalizationNet, img: np.ndarray,
                recon_feats: list[torch.Tensor] | None = None) -> np.ndarray:
    """Single-image probability map, numpy in / numpy out."""
    _check_input_size(net.cfg, img)
    x = to_tensor(img, _net_dtype(net))
    if net.in_channels == 6:
        raise ValueError("image-concat net needs a 6-channel input; use the pipeline")
    with torch.no_grad():
        out = net(x, recon_feats)
    return out[0, 0].numpy().astype(np.float64)


def _check_input_size(cfg: NetConfig, img: np.ndarray) -> None:
    h, w = img.shape[:2]
    if h != cfg.input_size or w != cfg.input_size:
        raise ValueError(f"expected {cfg.input_size}x{cfg.input_size} input, got {h}x{w}")


def _net_dtype(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def param_hash(net: nn.Module) -> str:
    """SHA-256 over all parameter bytes, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in net.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_params: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn, net: nn.Module, h: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic parameter gradients against central differences.

    ``loss_fn()`` must recompute the scalar loss from the net's current
    parameters. Intended for small double-precision nets (<= 1e4
    parameters); relative error uses a 1e-6 floor so near-zero gradient
    pairs do not blow up the ratio.
    """
    params = [p for p in net.parameters() if p.requires_grad]
    n = sum(p.numel() for p in params)
    if n > 10_000:
        raise ValueError(f"net has {n} parameters; grad_check is for <= 10000")
    net.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = np.concatenate([
        (p.grad if p.grad is not None else torch.zeros_like(p)).detach().numpy().ravel()
        for p in params
    ])
    fd = np.empty(n, dtype=np.float64)
    idx = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                fd[idx] = (up - down) / (2.0 * h)
                idx += 1
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    max_rel = float(np.max(np.abs(analytic - fd) / denom)) if n else 0.0
    return GradCheckReport(max_rel_error=max_rel, n_params=n, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Checkpoint container: versioned binary file with a JSON header followed by
# raw little-endian tensor buffers. Writing is deterministic, and a
# save/load round trip reproduces every tensor bit-exactly.

_CKPT_MAGIC = b"FADCKPT1"


@dataclass
class Checkpoint:
    stage: str
    net_config: NetConfig
    state: dict[str, np.ndarray]
    meta: dict

    def build_recon(self, dtype: torch.dtype = torch.float32) -> ReconstructionNet:
        if self.stage != STAGE_RECON:
            raise CheckpointError(f"expected a {STAGE_RECON} checkpoint, got {self.stage!r}")
        net = ReconstructionNet(self.net_config, dtype=dtype)
        _load_state(net, self.state, dtype)
        return net

    def build_loc(self, dtype: torch.dtype = torch.float32) -> LocalizationNet:
        if self.stage != STAGE_LOC:
            raise CheckpointError(f"expected a {STAGE_LOC} checkpoint, got {self.stage!r}")
        extra = self.meta.get("extra_channels")
        net = LocalizationNet(
            self.net_config,
            extra_channels=None if extra is None else tuple(extra),
            in_channels=int(self.meta.get("in_channels", 3)),
            dtype=dtype,
        )
        _load_state(net, self.state, dtype)
        return net


def _load_state(net: nn.Module, state: dict[str, np.ndarray], dtype: torch.dtype) -> None:
    tensors = {k: torch.from_numpy(v.copy()).to(dtype) for k, v in state.items()}
    missing = set(net.state_dict()) ^ set(tensors)
    if missing:
        raise CheckpointError(f"parameter names do not match the architecture: {sorted(missing)}")
    net.load_state_dict(tensors)


def checkpoint_from_net(net: nn.Module, stage: str, meta: dict | None = None) -> Checkpoint:
    state = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
    meta = dict(meta or {})
    if isinstance(net, LocalizationNet):
        meta.setdefault("extra_channels", list(net.extra_channels))
        meta.setdefault("in_channels", net.in_channels)
    return Checkpoint(stage=stage, net_config=net.cfg, state=state, meta=meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    offset = 0
    buffers = []
    for name in sorted(ckpt.state):
        arr = np.ascontiguousarray(ckpt.state[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps({
        "version": 1,
        "stage": ckpt.stage,
        "net_config": asdict(ckpt.net_config),
        "meta": ckpt.meta,
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    hlen = int.from_bytes(blob[len(_CKPT_MAGIC): len(_CKPT_MAGIC) + 8], "little")
    start = len(_CKPT_MAGIC) + 8
    try:
        header = json.loads(blob[start: start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    body = start + hlen
    state = {}
    for entry in header["tensors"]:
        lo = body + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"]))
        state[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        stage=header["stage"],
        net_config=NetConfig(**header["net_config"]),
        state=state,
        meta=header.get("meta", {}),
    )
