"""Encoder, decoder, GAN and auxiliary network builders plus the checkpoint format.

Every network is described by an :class:`ArchitectureSpec` (a flat layer list)
and built from it, so parameter counts can be checked by layer arithmetic.
Images enter as N x C x H x W float tensors.
"""
from __future__ import annotations

import hashlib
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .core import DiagonalGaussian
from .errors import FormatError, InvalidConfigError, ShapeError, UnsupportedMetricError

LEAKY_SLOPE = 0.2
RESNET_RESOLUTIONS = {
    64: dict(g=(512, 256, 128, 64), g_final=64, d=(64, 128, 256, 512)),
    128: dict(g=(512, 512, 512, 256, 128), g_final=128, d=(64, 128, 256, 512, 512)),
    256: dict(g=(512, 512, 512, 256, 128, 64), g_final=64, d=(64, 128, 256, 512, 512, 512)),
}


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``kind`` is conv, upconv, fc, flatten, reshape, resblock,
    upsample, avgpool or pad; ``act`` is relu, lrelu, tanh, sigmoid or None."""

    kind: str
    out: int | tuple = 0
    kernel: int = 0
    stride: int = 1
    padding: int | tuple = 0
    act: str | None = None
    norm: bool = False
    bias: bool = True


@dataclass(frozen=True)
class ArchitectureSpec:
    role: str
    input_shape: tuple
    layers: tuple
    c_dim: int = 0
    s_dim: int = 0
    heads: tuple = ()
    extra: dict = field(default_factory=dict, compare=False)

    ROLES = ("encoder", "decoder", "generator", "discriminator", "tc-discriminator",
             "factor-predictor")

    def __post_init__(self):
        if self.role not in self.ROLES:
            raise InvalidConfigError(f"unknown role {self.role!r}", "architecture.role")
        self.output_shape()   # validates composition

    def shapes(self):
        """Activation shape after every layer (batch axis omitted)."""
        shape = tuple(self.input_shape)
        out = []
        for layer in self.layers:
            shape = _next_shape(shape, layer)
            out.append(shape)
        return out

    def output_shape(self):
        shapes = self.shapes()
        return shapes[-1] if shapes else tuple(self.input_shape)

    def parameter_count(self):
        total, shape = 0, tuple(self.input_shape)
        for layer in self.layers:
            total += _layer_params(shape, layer)
            shape = _next_shape(shape, layer)
        for width in self.heads:
            total += shape[0] * width + width
        return total


def _next_shape(shape, layer):
    k = layer.kind
    if k in ("conv", "upconv"):
        if len(shape) != 3:
            raise InvalidConfigError(f"{k} needs an image input, got {shape}", "architecture")
        c, h, w = shape
        p = layer.padding
        if k == "conv":
            h2 = (h + 2 * p - layer.kernel) // layer.stride + 1
            w2 = (w + 2 * p - layer.kernel) // layer.stride + 1
        else:
            h2 = (h - 1) * layer.stride - 2 * p + layer.kernel
            w2 = (w - 1) * layer.stride - 2 * p + layer.kernel
        if h2 < 1 or w2 < 1:
            raise InvalidConfigError(f"{k} collapses spatial size {shape}", "architecture")
        return (layer.out, h2, w2)
    if k == "fc":
        if len(shape) != 1:
            raise InvalidConfigError(f"fc needs a flat input, got {shape}", "architecture")
        return (layer.out,)
    if k == "flatten":
        return (math.prod(shape),)
    if k == "reshape":
        if math.prod(layer.out) != math.prod(shape):
            raise InvalidConfigError(f"cannot reshape {shape} to {layer.out}", "architecture")
        return tuple(layer.out)
    if k == "resblock":
        return (layer.out,) + tuple(shape[1:])
    if k == "upsample":
        return (shape[0], shape[1] * 2, shape[2] * 2)
    if k == "avgpool":
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if k == "pad":
        left, right, top, bottom = layer.padding
        return (shape[0], shape[1] + top + bottom, shape[2] + left + right)
    raise InvalidConfigError(f"unknown layer kind {k!r}", "architecture")


def _layer_params(shape, layer):
    k = layer.kind
    affine = 2 * layer.out if layer.norm else 0
    if k == "conv":
        return layer.out * shape[0] * layer.kernel**2 + (layer.out if layer.bias else 0) + affine
    if k == "upconv":
        return shape[0] * layer.out * layer.kernel**2 + (layer.out if layer.bias else 0) + affine
    if k == "fc":
        return shape[0] * layer.out + (layer.out if layer.bias else 0) + affine
    if k == "resblock":
        fin, fout = shape[0], layer.out
        hidden = min(fin, fout)
        n = (fin * hidden * 9 + hidden) + (hidden * fout * 9 + fout)
        if fin != fout:
            n += fin * fout
        if layer.norm:
            n += 2 * fin + 2 * hidden
        return n
    return 0


# --------------------------------------------------------------------------
# Building

def _activation(name):
    if name is None:
        return None
    return {"relu": nn.ReLU(), "lrelu": nn.LeakyReLU(LEAKY_SLOPE), "tanh": nn.Tanh(),
            "sigmoid": nn.Sigmoid()}[name]


class ResBlock(nn.Module):
    """Pre-activation residual block with a learned 1x1 shortcut when widths differ."""

    def __init__(self, fin, fout, norm=False):
        super().__init__()
        hidden = min(fin, fout)
        self.norm0 = nn.BatchNorm2d(fin) if norm else nn.Identity()
        self.conv0 = nn.Conv2d(fin, hidden, 3, padding=1)
        self.norm1 = nn.BatchNorm2d(hidden) if norm else nn.Identity()
        self.conv1 = nn.Conv2d(hidden, fout, 3, padding=1)
        self.shortcut = nn.Conv2d(fin, fout, 1, bias=False) if fin != fout else nn.Identity()

    def forward(self, x):
        dx = self.conv0(F.leaky_relu(self.norm0(x), LEAKY_SLOPE))
        dx = self.conv1(F.leaky_relu(self.norm1(dx), LEAKY_SLOPE))
        return self.shortcut(x) + 0.1 * dx


def build_layers(spec: ArchitectureSpec) -> nn.Sequential:
    modules = OrderedDict()
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        k = layer.kind
        if k == "conv":
            mod = nn.Conv2d(shape[0], layer.out, layer.kernel, layer.stride, layer.padding, bias=layer.bias)
        elif k == "upconv":
            mod = nn.ConvTranspose2d(shape[0], layer.out, layer.kernel, layer.stride, layer.padding,
                                     bias=layer.bias)
        elif k == "fc":
            mod = nn.Linear(shape[0], layer.out, bias=layer.bias)
        elif k == "flatten":
            mod = nn.Flatten()
        elif k == "reshape":
            mod = nn.Unflatten(1, tuple(layer.out))
        elif k == "resblock":
            mod = ResBlock(shape[0], layer.out, norm=layer.norm)
        elif k == "upsample":
            mod = nn.Upsample(scale_factor=2, mode="nearest")
        elif k == "avgpool":
            mod = nn.AvgPool2d(2)
        elif k == "pad":
            mod = nn.ZeroPad2d(layer.padding)
        else:
            raise InvalidConfigError(f"unknown layer kind {k!r}", "architecture")
        modules[f"{i}_{k}"] = mod
        if layer.norm and k in ("conv", "upconv"):
            modules[f"{i}_bn"] = nn.BatchNorm2d(layer.out)
        elif layer.norm and k == "fc":
            modules[f"{i}_bn"] = nn.BatchNorm1d(layer.out)
        act = _activation(layer.act)
        if act is not None:
            modules[f"{i}_{layer.act}"] = act
        shape = _next_shape(shape, layer)
    return nn.Sequential(modules)


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled normal weights, zero biases, unit/zero normalization affine."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.ConvTranspose2d):
                # weight is (in, out, kh, kw); each output pixel sees in*kh*kw/(sh*sw) inputs
                kh, kw = m.kernel_size
                fan_in = m.in_channels * kh * kw / (m.stride[0] * m.stride[1])
            elif isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def _conv_trunk(act="relu"):
    return [LayerSpec("conv", 32, 4, 2, 1, act), LayerSpec("conv", 32, 4, 2, 1, act),
            LayerSpec("conv", 64, 4, 2, 1, act), LayerSpec("conv", 64, 4, 2, 1, act),
            LayerSpec("flatten")]


def _check_image_resolution(resolution):
    if resolution < 16 or resolution % 16:
        raise InvalidConfigError("resolution must be a multiple of 16", "resolution")


def encoder_spec(c_dim, channels, resolution=64):
    _check_image_resolution(resolution)
    layers = _conv_trunk() + [LayerSpec("fc", 256, act="relu"), LayerSpec("fc", 2 * c_dim)]
    return ArchitectureSpec("encoder", (channels, resolution, resolution), tuple(layers), c_dim=c_dim)


def decoder_spec(c_dim, channels, resolution=64, role="decoder", out_act=None, norm=False):
    """``norm`` adds batch normalization after every hidden layer."""
    _check_image_resolution(resolution)
    base = resolution // 16
    layers = [LayerSpec("fc", 256, act="relu", norm=norm), LayerSpec("fc", 64 * base * base, act="relu", norm=norm),
              LayerSpec("reshape", (64, base, base)),
              LayerSpec("upconv", 64, 4, 2, 1, "relu", norm), LayerSpec("upconv", 32, 4, 2, 1, "relu", norm),
              LayerSpec("upconv", 32, 4, 2, 1, "relu", norm), LayerSpec("upconv", channels, 4, 2, 1, out_act)]
    return ArchitectureSpec(role, (c_dim,), tuple(layers), c_dim=c_dim)


def mirror_discriminator_spec(channels, resolution=64, cond_dim=0):
    _check_image_resolution(resolution)
    layers = _conv_trunk() + [LayerSpec("fc", 256, act="relu"), LayerSpec("fc", 1)]
    return ArchitectureSpec("discriminator", (channels + cond_dim, resolution, resolution),
                            tuple(layers), c_dim=cond_dim)


def resnet_generator_spec(z_dim, resolution, channels=3):
    widths = RESNET_RESOLUTIONS[resolution]
    g = widths["g"]
    layers = [LayerSpec("fc", 16 * g[0]), LayerSpec("reshape", (g[0], 4, 4))]
    for w in g:
        layers += [LayerSpec("resblock", w, norm=True), LayerSpec("upsample")]
    layers += [LayerSpec("resblock", widths["g_final"], norm=True, act="lrelu"),
               LayerSpec("pad", padding=(1, 2, 1, 2)),
               LayerSpec("conv", channels, 4, 1, 0, "tanh")]
    return ArchitectureSpec("generator", (z_dim,), tuple(layers))


def resnet_discriminator_spec(resolution, channels=3, cond_dim=0):
    widths = RESNET_RESOLUTIONS[resolution]["d"]
    layers = [LayerSpec("conv", 64, 3, 1, 1)]
    for w in widths:
        layers += [LayerSpec("resblock", w), LayerSpec("avgpool")]
    layers[-1] = replace(layers[-1], act="lrelu")
    layers += [LayerSpec("flatten"), LayerSpec("fc", 1)]
    return ArchitectureSpec("discriminator", (channels + cond_dim, resolution, resolution),
                            tuple(layers), c_dim=cond_dim)


def tc_discriminator_spec(c_dim, hidden=1000, depth=6):
    layers = [LayerSpec("fc", hidden, act="lrelu") for _ in range(depth)] + [LayerSpec("fc", 2)]
    return ArchitectureSpec("tc-discriminator", (c_dim,), tuple(layers), c_dim=c_dim)


def factor_predictor_spec(cardinalities, channels, resolution=64, feature_dim=256):
    _check_image_resolution(resolution)
    layers = _conv_trunk() + [LayerSpec("fc", feature_dim, act="relu")]
    return ArchitectureSpec("factor-predictor", (channels, resolution, resolution), tuple(layers),
                            heads=tuple(int(c) for c in cardinalities))


# --------------------------------------------------------------------------
# Network classes

class Network(nn.Module):
    """Module built from an :class:`ArchitectureSpec` with an input shape check."""

    def __init__(self, spec: ArchitectureSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.net = build_layers(spec)

    def _check_input(self, x):
        expected = tuple(self.spec.input_shape)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"{self.spec.role} expects input {expected}, got {tuple(x.shape[1:])}")

    def forward(self, x):
        self._check_input(x)
        return self.net(x)


class Encoder(Network):
    """Maps images in [0, 1] to a diagonal Gaussian posterior q(c|x)."""

    def forward(self, x) -> DiagonalGaussian:
        return DiagonalGaussian.from_stacked(super().forward(x))

    @property
    def c_dim(self):
        return self.spec.c_dim

    @property
    def resolution(self):
        return self.spec.input_shape[-1]


class Decoder(Network):
    """Maps codes to Bernoulli logits."""


class Generator(Network):
    """Maps z = (s, c) to images; ``output_range`` is "unit" or "symmetric"."""

    def __init__(self, spec, s_dim=0, c_dim=0, output_range="unit", seed=0):
        super().__init__(spec, seed)
        self.s_dim, self.c_dim, self.output_range = s_dim, c_dim, output_range

    def to_unit(self, images):
        return (images + 1.0) / 2.0 if self.output_range == "symmetric" else images

    def from_unit(self, images):
        return images * 2.0 - 1.0 if self.output_range == "symmetric" else images

    def generate(self, s, c):
        z = c if s is None or s.shape[-1] == 0 else torch.cat([s, c], dim=-1)
        return self(z)


class DecoderGenerator(nn.Module):
    """Presents a logit decoder as a unit-range generator over c alone."""

    output_range = "unit"
    s_dim = 0

    def __init__(self, decoder: Decoder):
        super().__init__()
        self.decoder = decoder
        self.c_dim = decoder.spec.c_dim
        self.spec = decoder.spec

    def forward(self, z):
        return torch.sigmoid(self.decoder(z))

    def to_unit(self, images):
        return images

    def from_unit(self, images):
        return images

    def generate(self, s, c):
        return self(c)


def as_generator(module: nn.Module):
    return DecoderGenerator(module) if isinstance(module, Decoder) else module


class Discriminator(Network):
    """Scalar-logit critic.  With ``cond_dim > 0`` the code is broadcast over
    the image plane and stacked as extra channels."""

    def forward(self, x, c=None):
        cond = self.spec.c_dim
        if cond:
            if c is None or c.shape[-1] != cond:
                raise ShapeError(f"conditional discriminator needs a code of length {cond}")
            c_map = c[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
            x = torch.cat([x, c_map.to(x.dtype)], dim=1)
        return super().forward(x)


class FactorPredictor(Network):
    """Shared conv trunk with one classification head per ground-truth factor."""

    def __init__(self, spec, seed=0):
        super().__init__(spec, seed)
        width = spec.output_shape()[0]
        self.heads = nn.ModuleList(nn.Linear(width, c) for c in spec.heads)

    @property
    def feature_dim(self):
        return self.spec.output_shape()[0]

    def features(self, x):
        """Penultimate (post-ReLU) layer used for Frechet statistics."""
        return super().forward(x)

    def forward(self, x):
        h = self.features(x)
        return [head(h) for head in self.heads]


def _tag(module, **meta):
    module.meta = meta
    return module


def build_encoder(c_dim, channels, resolution=64, seed=0) -> Encoder:
    if c_dim < 1:
        raise InvalidConfigError("c_dim must be >= 1", "c_dim")
    enc = init_parameters(Encoder(encoder_spec(c_dim, channels, resolution)), seed)
    return _tag(enc, kind="encoder", c_dim=c_dim, channels=channels, resolution=resolution)


def build_decoder(c_dim, channels, resolution=64, seed=0) -> Decoder:
    if c_dim < 1:
        raise InvalidConfigError("c_dim must be >= 1", "c_dim")
    dec = init_parameters(Decoder(decoder_spec(c_dim, channels, resolution)), seed)
    return _tag(dec, kind="decoder", c_dim=c_dim, channels=channels, resolution=resolution)


def build_gan_pair(mode, z_dim, resolution, channels=1, c_dim=None, cond_dim=0, seed=0, norm=False):
    """Generator/discriminator pair.

    ``mirror`` reuses the VAE decoder (sigmoid output in [0, 1]) and the encoder
    trunk with a scalar head; ``resnet`` follows the residual backbone with
    tanh output in [-1, 1].  ``c_dim`` splits z into (s, c) with c last.
    ``norm`` adds batch normalization to the mirror generator (the residual
    generator always has it).
    """
    c_dim = z_dim if c_dim is None else c_dim
    s_dim = z_dim - c_dim
    if s_dim < 0:
        raise InvalidConfigError("c_dim exceeds z_dim", "c_dim")
    if mode == "mirror":
        if resolution != 64:
            raise InvalidConfigError("mirror mode requires resolution 64", "resolution")
        g_spec = decoder_spec(z_dim, channels, resolution, role="generator", out_act="sigmoid", norm=norm)
        d_spec = mirror_discriminator_spec(channels, resolution, cond_dim)
        out_range = "unit"
    elif mode == "resnet":
        if resolution not in RESNET_RESOLUTIONS:
            raise InvalidConfigError(f"resnet mode supports {sorted(RESNET_RESOLUTIONS)}", "resolution")
        g_spec = resnet_generator_spec(z_dim, resolution, channels)
        d_spec = resnet_discriminator_spec(resolution, channels, cond_dim)
        out_range = "symmetric"
    else:
        raise InvalidConfigError(f"unknown GAN mode {mode!r}", "mode")
    gen = init_parameters(Generator(g_spec, s_dim=s_dim, c_dim=c_dim, output_range=out_range), seed)
    disc = init_parameters(Discriminator(d_spec), seed + 1)
    common = dict(mode=mode, resolution=resolution, channels=channels)
    _tag(gen, kind="generator", z_dim=z_dim, c_dim=c_dim, norm=bool(norm and mode == "mirror"), **common)
    _tag(disc, kind="discriminator", cond_dim=cond_dim, **common)
    return gen, disc


def build_tc_discriminator(c_dim, seed=0, hidden=1000, depth=6) -> Network:
    if c_dim < 1:
        raise InvalidConfigError("c_dim must be >= 1", "c_dim")
    return _tag(init_parameters(Network(tc_discriminator_spec(c_dim, hidden, depth)), seed),
                kind="tc-discriminator", c_dim=c_dim, hidden=hidden, depth=depth)


def build_factor_predictor(space, channels=1, resolution=64, seed=0) -> FactorPredictor:
    if space is None:
        raise UnsupportedMetricError("factor predictor needs a dataset with ground-truth factors")
    spec = factor_predictor_spec(space.cardinalities, channels, resolution)
    return _tag(init_parameters(FactorPredictor(spec), seed), kind="factor-predictor",
                cardinalities=tuple(space.cardinalities), channels=channels, resolution=resolution)


_KINDS = ("encoder", "decoder", "generator", "discriminator", "tc-discriminator", "factor-predictor")
_MODES = ("mirror", "resnet")


def rebuild_network(meta: dict) -> nn.Module:
    """Construct an (uninitialized-weights) network from its builder metadata."""
    kind = meta["kind"]
    if kind == "encoder":
        return build_encoder(meta["c_dim"], meta["channels"], meta["resolution"])
    if kind == "decoder":
        return build_decoder(meta["c_dim"], meta["channels"], meta["resolution"])
    if kind in ("generator", "discriminator"):
        gen, disc = build_gan_pair(meta["mode"], meta.get("z_dim", 1), meta["resolution"],
                                   meta["channels"], c_dim=meta.get("c_dim"),
                                   cond_dim=meta.get("cond_dim", 0), norm=meta.get("norm", False))
        return gen if kind == "generator" else disc
    if kind == "tc-discriminator":
        return build_tc_discriminator(meta["c_dim"], hidden=meta.get("hidden", 1000),
                                      depth=meta.get("depth", 6))
    if kind == "factor-predictor":
        cards = tuple(meta["cardinalities"])
        spec = factor_predictor_spec(cards, meta["channels"], meta["resolution"])
        return _tag(FactorPredictor(spec), kind=kind, cardinalities=cards,
                    channels=meta["channels"], resolution=meta["resolution"])
    raise FormatError(f"unknown network kind {kind!r}", "meta")


# --------------------------------------------------------------------------
# Parameter utilities

def flat_parameters(module: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(module.parameters()).detach()


def parameter_gradient(module: nn.Module, objective: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar objective as one flat vector (zeros where unused)."""
    params = [p for p in module.parameters()]
    grads = torch.autograd.grad(objective, params, allow_unused=True, retain_graph=True)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                      for g, p in zip(grads, params)])


def parameter_hash(module_or_state) -> str:
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    h = hashlib.sha256()
    for name, tensor in state.items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# --------------------------------------------------------------------------
# Checkpoint format

CKPT_MAGIC = b"IDGC"
CKPT_VERSION = 1


def checkpoint_to_bytes(tensors) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        raw = name.encode("utf-8")
        t = torch.as_tensor(tensor).detach().cpu()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, tensors) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(tensors))
    tmp.replace(path)
    return path


def checkpoint_from_bytes(buf) -> "OrderedDict[str, torch.Tensor]":
    import numpy as np

    view = memoryview(buf)
    if len(view) < 13:
        raise FormatError("file too short", "header")
    if bytes(view[:4]) != CKPT_MAGIC:
        raise FormatError("bad magic", "header")
    version, count = struct.unpack("<BI", view[4:9])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", "header")
    pos = 9

    def take(n, section):
        nonlocal pos
        if pos + n > len(view) - 4:
            raise FormatError(f"truncated at offset {pos}", section)
        out = view[pos:pos + n]
        pos += n
        return out

    out = OrderedDict()
    for i in range(count):
        (ln,) = struct.unpack("<I", take(4, f"record {i}"))
        try:
            name = bytes(take(ln, f"record {i}")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not UTF-8", f"record {i}") from None
        (ndim,) = struct.unpack("<I", take(4, name))
        if ndim > 8:
            raise FormatError(f"implausible rank {ndim}", name)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, name))
        payload = take(4 * math.prod(shape), name)
        out[name] = torch.from_numpy(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape))
    if pos != len(view) - 4:
        raise FormatError(f"{len(view) - 4 - pos} unexpected bytes before checksum", "checksum")
    (crc,) = struct.unpack("<I", view[-4:])
    if zlib.crc32(view[:-4]) != crc:
        raise FormatError("CRC-32 mismatch", "checksum")
    return out


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


META = "__meta__."


def _encode_meta(meta):
    out = OrderedDict()
    for key, value in meta.items():
        if key == "kind":
            value = _KINDS.index(value)
        elif key == "mode":
            value = _MODES.index(value)
        out[META + key] = torch.tensor(value, dtype=torch.float32).reshape(-1)
    return out


def _decode_meta(records):
    meta = {}
    for key, tensor in records.items():
        values = [int(v) for v in tensor.tolist()]
        if key == "kind":
            meta[key] = _KINDS[values[0]]
        elif key == "mode":
            meta[key] = _MODES[values[0]]
        elif key == "cardinalities":
            meta[key] = tuple(values)
        else:
            meta[key] = values[0]
    return meta


def module_tensors(module: nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    """State tensors plus builder metadata records, all under ``prefix``."""
    out = OrderedDict((f"{prefix}{k}", v) for k, v in module.state_dict().items())
    for k, v in _encode_meta(getattr(module, "meta", {})).items():
        out[prefix + k] = v
    return out


def load_module(module: nn.Module | None, tensors, prefix: str = "") -> nn.Module:
    """Load ``prefix``-ed tensors into ``module``; rebuild it from metadata if None."""
    own = OrderedDict((k[len(prefix):], v) for k, v in tensors.items() if k.startswith(prefix))
    meta = OrderedDict((k[len(META):], v) for k, v in own.items() if k.startswith(META))
    state = OrderedDict((k, v) for k, v in own.items() if not k.startswith(META))
    if module is None:
        if not meta:
            raise FormatError(f"no network metadata under prefix {prefix!r}", "meta")
        module = rebuild_network(_decode_meta(meta))
    module.load_state_dict(state)
    return module


def save_network(path, module: nn.Module) -> Path:
    return save_checkpoint(path, module_tensors(module))


def load_network(path) -> nn.Module:
    return load_module(None, load_checkpoint(path))
