"""Frozen feature-producing stack: latent encoder, conditioning encoder, tapped UNet.

The toy networks keep the structure of a conditional latent diffusion model
(×8 latent autoencoder, UNet with a middle block and upsampling blocks,
cross-attention to the conditioning embedding in every block) at a size that
runs on a laptop CPU.  Real pre-trained weights would plug in through an
adapter that produces the same :class:`BlockActivation` list; see README.

Checkpoint container
--------------------
A checkpoint is an ASCII header of ``key=value`` lines, starting with the
magic line ``DIFFSEG-BACKBONE 1`` and terminated by an empty line, followed by
a ``torch.save`` payload of the state dict::

    DIFFSEG-BACKBONE 1
    block_ids=middle,up_1,up_2,up_3,up_4
    block_channels=32,16,16,8,8
    latent_downsample_factor=8
    ...
    <blank line>
    <torch.save bytes>
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LoadError, ParameterError, ShapeError, TimestepError, ValidationError
from .schedule import Latent

MAGIC = "DIFFSEG-BACKBONE 1"
REQUIRED_HEADER_KEYS = (
    "block_ids",
    "block_channels",
    "latent_downsample_factor",
    "latent_channels",
    "d_cond",
)


@dataclass
class BackboneDescriptor:
    block_ids: list[str] = field(
        default_factory=lambda: ["middle", "up_1", "up_2", "up_3", "up_4"]
    )
    block_channels: list[int] = field(default_factory=lambda: [32, 16, 16, 8, 8])
    latent_downsample_factor: int = 8
    latent_channels: int = 4
    d_cond: int = 64
    patch_size: int = 256
    down_levels: int = 2
    context_tokens: int = 4
    latent_scale: float = 1.0
    cross_attention: str = "per-block"
    conditioning: str = "ssl"
    frozen: bool = True

    def validate(self) -> None:
        if not self.block_ids:
            raise ValidationError("descriptor declares no blocks")
        if self.block_ids[0] != "middle":
            raise ValidationError("first block must be 'middle'")
        if len(set(self.block_ids)) != len(self.block_ids):
            raise ValidationError("duplicate block ids")
        if len(self.block_channels) != len(self.block_ids):
            raise ValidationError(
                f"{len(self.block_channels)} channel counts for {len(self.block_ids)} blocks"
            )
        if any(int(c) < 1 for c in self.block_channels):
            raise ValidationError("block channels must be positive")
        n_up = len(self.block_ids) - 1
        if n_up < self.down_levels:
            raise ValidationError(
                f"{n_up} upsampling blocks cannot cover {self.down_levels} resolution levels"
            )
        if self.latent_downsample_factor != 8:
            # the toy autoencoder is hard-wired to three stride-2 stages
            raise ValidationError("toy autoencoder supports latent_downsample_factor=8 only")
        if self.patch_size % (self.latent_downsample_factor * 2**self.down_levels):
            raise ValidationError("patch_size must be divisible by 8 * 2**down_levels")
        if self.conditioning not in ("ssl", "none"):
            raise ValidationError(f"unknown conditioning mode {self.conditioning!r}")

    def up_groups(self) -> list[list[int]]:
        """Indices (into block_ids) of up blocks per resolution level, coarse to fine."""
        ups = np.arange(1, len(self.block_ids))
        return [g.tolist() for g in np.array_split(ups, self.down_levels)]

    def block_strides(self) -> dict[str, int]:
        """Spatial stride of each block relative to the latent grid."""
        strides = {"middle": 2**self.down_levels}
        for g, group in enumerate(self.up_groups()):
            for i in group:
                strides[self.block_ids[i]] = 2 ** (self.down_levels - 1 - g)
        return strides

    def channels_of(self, block_id: str) -> int:
        return int(self.block_channels[self.block_ids.index(block_id)])

    def to_header(self) -> dict[str, str]:
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            out[key] = str(value)
        return out

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "BackboneDescriptor":
        missing = [k for k in REQUIRED_HEADER_KEYS if k not in header]
        if missing:
            raise ValidationError(f"checkpoint header missing {missing}")
        kw = {}
        try:
            for key, default in asdict(cls()).items():
                if key not in header:
                    continue
                raw = header[key]
                if key == "block_ids":
                    kw[key] = [s for s in raw.split(",") if s]
                elif key == "block_channels":
                    kw[key] = [int(s) for s in raw.split(",") if s]
                elif isinstance(default, bool):
                    kw[key] = raw.lower() == "true"
                elif isinstance(default, int):
                    kw[key] = int(raw)
                elif isinstance(default, float):
                    kw[key] = float(raw)
                else:
                    kw[key] = raw
        except ValueError as exc:
            raise ValidationError(f"malformed checkpoint header: {exc}") from exc
        desc = cls(**kw)
        desc.validate()
        return desc


def full_scale_descriptor(**overrides) -> BackboneDescriptor:
    """Middle block plus 12 upsampling blocks, four resolution levels of three."""
    channels = [1280] + [1280] * 3 + [1280] * 3 + [640] * 3 + [320] * 3
    kw = dict(
        block_ids=["middle"] + [f"up_{i}" for i in range(1, 13)],
        block_channels=channels,
        down_levels=4,
        d_cond=384,
    )
    kw.update(overrides)
    return BackboneDescriptor(**kw)


@dataclass
class ConditioningVector:
    values: torch.Tensor
    source: str


@dataclass
class BlockActivation:
    block_id: str
    values: torch.Tensor  # (c, h, w)
    timestep: int


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        # zero-initialised branch output, as in latent diffusion UNets
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head attention from spatial positions to conditioning tokens."""

    def __init__(self, ch: int, ctx_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(ctx_dim, ch, bias=False)
        self.v = nn.Linear(ctx_dim, ch, bias=False)
        self.out = nn.Linear(ch, ch)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (b, hw, c)
        q, k, v = self.q(tokens), self.k(ctx), self.v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class UNetBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, ctx_dim: int):
        super().__init__()
        self.res = ResBlock(cin, cout, temb_dim)
        self.attn = CrossAttention(cout, ctx_dim)

    def forward(self, x, temb, ctx):
        return self.attn(self.res(x, temb), ctx)


class ToyUNet(nn.Module):
    """Denoiser whose middle and upsampling block outputs are exposed as taps."""

    temb_dim = 64
    ctx_dim = 32

    def __init__(self, desc: BackboneDescriptor):
        super().__init__()
        self.desc = desc
        L = desc.down_levels
        groups = desc.up_groups()
        ch = desc.block_channels
        # down channels at latent/2**lvl mirror the first up block at that resolution
        down_ch = [ch[groups[L - 1 - lvl][0]] for lvl in range(L)]
        self.time_mlp = nn.Sequential(
            nn.Linear(32, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim)
        )
        self.context = nn.Linear(desc.d_cond, desc.context_tokens * self.ctx_dim)
        self.conv_in = nn.Conv2d(desc.latent_channels, down_ch[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for lvl in range(L):
            self.down_blocks.append(ResBlock(down_ch[lvl], down_ch[lvl], self.temb_dim))
            nxt = down_ch[lvl + 1] if lvl + 1 < L else ch[0]
            self.downsamplers.append(nn.Conv2d(down_ch[lvl], nxt, 3, stride=2, padding=1))
        self.middle = UNetBlock(ch[0], ch[0], self.temb_dim, self.ctx_dim)
        self.upsamplers = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        prev = ch[0]
        for g, group in enumerate(groups):
            self.upsamplers.append(nn.Conv2d(prev, prev, 3, padding=1))
            skip_ch = down_ch[L - 1 - g]
            for j, idx in enumerate(group):
                cin = prev + skip_ch if j == 0 else prev
                self.up_blocks.append(UNetBlock(cin, ch[idx], self.temb_dim, self.ctx_dim))
                prev = ch[idx]
        # noise prediction; only used when pre-training the denoiser
        self.conv_out = nn.Sequential(nn.GroupNorm(_groups(prev), prev), nn.SiLU(),
                                      nn.Conv2d(prev, desc.latent_channels, 3, padding=1))

    def forward(self, z, t, y) -> list[torch.Tensor]:
        """Return block outputs in descriptor order (middle first)."""
        temb = self.time_mlp(timestep_embedding(t, 32))
        ctx = self.context(y).view(y.shape[0], self.desc.context_tokens, self.ctx_dim)
        h = self.conv_in(z)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamplers):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.middle(h, temb, ctx)
        taps = [h]
        blocks = iter(self.up_blocks)
        for g, group in enumerate(self.desc.up_groups()):
            h = self.upsamplers[g](F.interpolate(h, scale_factor=2.0, mode="nearest"))
            skip = skips[len(skips) - 1 - g]
            for j, _ in enumerate(group):
                if j == 0:
                    h = torch.cat([h, skip], dim=1)
                h = next(blocks)(h, temb, ctx)
                taps.append(h)
        return taps


class ToyAutoencoder(nn.Module):
    """×8 convolutional autoencoder; only the encoder is used for features."""

    def __init__(self, latent_channels: int = 4, width: int = 32):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2.0), nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2.0), nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2.0), nn.Conv2d(width, width // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width // 2, 3, 1),
        )


class ToySSLEncoder(nn.Module):
    """Strided convolutions + global average pool standing in for a patch ViT."""

    def __init__(self, d_cond: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=4), nn.GELU(),
            nn.Conv2d(16, 32, 4, stride=4), nn.GELU(),
            nn.Conv2d(32, d_cond, 2, stride=2),
        )

    def forward(self, x):
        return self.net(x).mean(dim=(2, 3))


def as_image_batch(x) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) image in [0, 1] (or uint8) -> float32 (B, 3, H, W)."""
    if isinstance(x, np.ndarray):
        if x.dtype == np.uint8:
            x = x.astype(np.float32) / 255.0
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    x = x.float()
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) image(s), got {tuple(x.shape)}")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ParameterError("pixel values must lie in [0, 1]")
    return x.permute(0, 3, 1, 2).contiguous()


class Backbone(nn.Module):
    def __init__(self, desc: BackboneDescriptor | None = None):
        super().__init__()
        desc = desc or BackboneDescriptor()
        desc.validate()
        self.descriptor = desc
        self.autoencoder = ToyAutoencoder(desc.latent_channels)
        self.ssl = ToySSLEncoder(desc.d_cond)
        self.unet = ToyUNet(desc)
        # learned unconditional token, used when conditioning == "none"
        self.null_cond = nn.Parameter(0.02 * torch.randn(desc.d_cond))
        self.unet_calls = 0
        if desc.frozen:
            self.freeze()

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.descriptor.frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self.descriptor.frozen and not any(p.requires_grad for p in self.parameters())

    # Image -> latent -------------------------------------------------------
    def encode_images(self, x: torch.Tensor) -> torch.Tensor:
        f = self.descriptor.latent_downsample_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ShapeError(f"image dims {tuple(x.shape[-2:])} not divisible by {f}")
        with torch.no_grad():
            return self.autoencoder.encoder(x) * self.descriptor.latent_scale

    def encode_image(self, x) -> Latent:
        """(H, W, 3) image -> clean latent of shape (latent_channels, H/8, W/8)."""
        batch = as_image_batch(x)
        if batch.shape[0] != 1:
            raise ShapeError("encode_image takes a single image")
        return Latent(self.encode_images(batch)[0], timestep=0)

    # Conditioning ----------------------------------------------------------
    def encode_conditions(self, x: torch.Tensor) -> torch.Tensor:
        p = self.descriptor.patch_size
        if tuple(x.shape[-2:]) != (p, p):
            raise ShapeError(f"conditioning encoder expects {p}x{p} patches, got {tuple(x.shape[-2:])}")
        if self.descriptor.conditioning == "none":
            return self.null_cond.detach().expand(x.shape[0], -1).clone()
        with torch.no_grad():
            return self.ssl(x)

    def encode_condition(self, x) -> ConditioningVector:
        batch = as_image_batch(x)
        if batch.shape[0] != 1:
            raise ShapeError("encode_condition takes a single image")
        source = "none" if self.descriptor.conditioning == "none" else "toy-ssl"
        return ConditioningVector(self.encode_conditions(batch)[0], source)

    # Tapped UNet -----------------------------------------------------------
    def unet_taps(self, z: torch.Tensor, t: int, y: torch.Tensor) -> list[torch.Tensor]:
        """Single denoiser forward pass on a batch; returns per-block tensors."""
        if y.shape[-1] != self.descriptor.d_cond:
            raise ShapeError(f"conditioning dim {y.shape[-1]} != d_cond {self.descriptor.d_cond}")
        if z.shape[1] != self.descriptor.latent_channels:
            raise ShapeError(f"latent has {z.shape[1]} channels, expected {self.descriptor.latent_channels}")
        tt = torch.full((z.shape[0],), int(t), dtype=torch.long)
        self.unet_calls += 1
        with torch.no_grad():
            return self.unet(z, tt, y)

    def run_unet_with_taps(self, z_t: Latent, y: ConditioningVector) -> list[BlockActivation]:
        """One activation per descriptor block, in descriptor order.

        ``z_t.timestep == 0`` is accepted and means the clean latent is fed as-is.
        """
        if z_t.timestep < 0:
            raise TimestepError(f"negative timestep {z_t.timestep}")
        if y.values.ndim != 1:
            raise ShapeError("conditioning vector must be 1-D")
        taps = self.unet_taps(z_t.values[None], z_t.timestep, y.values[None])
        return [
            BlockActivation(bid, a[0], z_t.timestep)
            for bid, a in zip(self.descriptor.block_ids, taps)
        ]

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_toy_backbone(seed: int = 0, desc: BackboneDescriptor | None = None, **overrides) -> Backbone:
    """Deterministically initialised toy backbone (frozen)."""
    desc = desc or BackboneDescriptor(**overrides)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Backbone(desc)


def pretrain_autoencoder(
    backbone: Backbone,
    images,
    steps: int = 50,
    lr: float = 2e-3,
    crop: int = 64,
    batch_size: int = 8,
    seed: int = 0,
) -> list[float]:
    """Brief reconstruction pre-training of the toy autoencoder, then re-freeze.

    Also sets ``latent_scale`` so encoded latents have unit standard deviation.
    Returns the per-step reconstruction losses.
    """
    batch = torch.cat([as_image_batch(im) for im in images])
    n, _, H, W = batch.shape
    if H < crop or W < crop:
        raise ParameterError("images smaller than the pre-training crop")
    ae = backbone.autoencoder
    for p in ae.parameters():
        p.requires_grad_(True)
    ae.train()
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(n, (batch_size,), generator=gen)
        ys = torch.randint(H - crop + 1, (batch_size,), generator=gen)
        xs = torch.randint(W - crop + 1, (batch_size,), generator=gen)
        x = torch.stack([batch[i, :, y:y + crop, x_:x_ + crop] for i, y, x_ in zip(idx, ys, xs)])
        recon = ae.decoder(ae.encoder(x))
        loss = F.mse_loss(recon, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    backbone.freeze()
    with torch.no_grad():
        sample = batch[: min(n, 4)]
        std = float(ae.encoder(sample).std())
    backbone.descriptor.latent_scale = 1.0 / max(std, 1e-6)
    return losses


def _patches(images, P: int) -> torch.Tensor:
    out = []
    for im in images:
        x = as_image_batch(im)[0]
        H, W = x.shape[-2:]
        out += [x[:, r:r + P, c:c + P] for r in range(0, H - P + 1, P) for c in range(0, W - P + 1, P)]
    if not out:
        raise ParameterError(f"images smaller than one {P}x{P} patch")
    return torch.stack(out)


def pretrain_denoiser(
    backbone: Backbone,
    images,
    schedule,
    steps: int = 100,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    cond_drop: float = 0.1,
) -> list[float]:
    """Brief noise-prediction training of the toy UNet, then re-freeze.

    Latents and conditioning come from the (frozen) encoders on
    non-overlapping ``patch_size`` crops of ``images``; timesteps are drawn
    uniformly from [1, T].  With probability ``cond_drop`` a sample's
    conditioning is swapped for the null token, which is trained alongside
    the UNet.  Returns per-step MSE losses.
    """
    P = backbone.descriptor.patch_size
    x = _patches(images, P)
    z0 = backbone.encode_images(x)
    y = backbone.encode_conditions(x)
    unet = backbone.unet
    for p in unet.parameters():
        p.requires_grad_(True)
    backbone.null_cond.requires_grad_(True)
    unet.train()
    gen = torch.Generator().manual_seed(seed)
    abar = torch.tensor(schedule.alpha_bars, dtype=torch.float32)
    opt = torch.optim.Adam([*unet.parameters(), backbone.null_cond], lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(z0.shape[0], (batch_size,), generator=gen)
        t = torch.randint(1, schedule.num_steps + 1, (batch_size,), generator=gen)
        eps = torch.randn(z0[idx].shape, generator=gen)
        a = abar[t - 1][:, None, None, None]
        zt = a.sqrt() * z0[idx] + (1 - a).sqrt() * eps
        drop = (torch.rand(batch_size, generator=gen) < cond_drop)[:, None]
        cond = torch.where(drop, backbone.null_cond.expand(batch_size, -1), y[idx])
        pred = unet.conv_out(unet(zt, t, cond)[-1])
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    backbone.freeze()
    return losses


def save_backbone(backbone: Backbone, path) -> Path:
    path = Path(path)
    header = [MAGIC] + [f"{k}={v}" for k, v in backbone.descriptor.to_header().items()]
    buf = io.BytesIO()
    torch.save(backbone.state_dict(), buf)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes("\n".join(header).encode("ascii") + b"\n\n" + buf.getvalue())
    tmp.replace(path)
    return path


def read_header(raw: bytes) -> tuple[dict[str, str], bytes]:
    end = raw.find(b"\n\n")
    if end < 0:
        raise LoadError("checkpoint header not terminated")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise LoadError("checkpoint header is not ASCII") from exc
    if lines[0] != MAGIC:
        raise LoadError(f"bad checkpoint magic {lines[0]!r}")
    header = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise LoadError(f"malformed header line {line!r}")
        header[key.strip()] = value.strip()
    return header, raw[end + 2:]


def load_backbone(path, expected: BackboneDescriptor | None = None) -> tuple[Backbone, BackboneDescriptor]:
    """Load a checkpoint; ``expected`` (e.g. from config) must match its structure."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    header, payload = read_header(raw)
    desc = BackboneDescriptor.from_header(header)
    if expected is not None:
        for key in ("block_ids", "block_channels", "latent_channels", "d_cond", "patch_size"):
            if getattr(expected, key) != getattr(desc, key):
                raise ValidationError(
                    f"checkpoint {key}={getattr(desc, key)} does not match expected {getattr(expected, key)}"
                )
    desc.frozen = True
    with torch.random.fork_rng(devices=[]):
        model = Backbone(desc)
    try:
        state = torch.load(io.BytesIO(payload), weights_only=True)
        model.load_state_dict(state)
    except Exception as exc:  # torch raises a zoo of types for corrupt payloads
        raise LoadError(f"corrupt checkpoint payload in {path}: {exc}") from exc
    return model.freeze(), desc
