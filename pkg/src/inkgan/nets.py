"""U-Net generator and PatchGAN discriminator builders.

One code path serves desk-scale (64x64, depth 4, base 16) and full-scale
(256x256, depth 8, base 64) instances. Parameters are flat name->Tensor
dicts so the optimizer and checkpoints address them uniformly; forward is a
pure function of (input, parameters, mode, seed).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as ts
from .errors import ConfigError, ShapeError

INIT_STD = 0.02  # gaussian init, mean 0


def _filters(base, i, cap=8):
    return base * min(2**i, cap)


@dataclass
class UNetConfig:
    """Encoder-decoder with skip connections; stride-2 4x4 convs throughout.

    Encoder stage i: conv -> norm (skipped on stage 1) -> leaky_relu(0.2).
    Decoder stage j: conv_transpose -> norm -> dropout (first dropout_stages
    stages) -> relu, then skip concatenation with the mirrored encoder stage.
    A final stride-2 transposed conv maps to out_channels under tanh.
    """

    in_channels: int
    out_channels: int
    base_filters: int = 64
    depth: int = 8
    dropout_stages: int = 3
    dropout_rate: float = 0.5
    norm: str = "batch"  # "batch" or "instance"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("unet: channel counts must be positive")
        if self.depth < 1:
            raise ConfigError("unet: depth must be >= 1")
        if self.base_filters < 1:
            raise ConfigError("unet: base_filters must be positive")
        if not 0 <= self.dropout_stages <= self.depth:
            raise ConfigError("unet: dropout_stages must be in [0, depth]")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("unet: dropout_rate must be in [0, 1)")
        if self.norm not in ("batch", "instance"):
            raise ConfigError(f"unet: unknown norm {self.norm!r}")

    def encoder_channels(self):
        return [_filters(self.base_filters, i) for i in range(self.depth)]


@dataclass
class PatchGANConfig:
    """Patch classifier: n_layers stride-2 4x4 convs (base, 2*base, ...),
    then a stride-1 conv widening once more and a stride-1 conv to one
    logit channel. No sigmoid; losses own the nonlinearity.
    """

    in_channels: int
    base_filters: int = 64
    n_layers: int = 3
    norm: str = "batch"

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError("patchgan: in_channels must be positive")
        if self.base_filters < 1:
            raise ConfigError("patchgan: base_filters must be positive")
        if self.n_layers < 1:
            raise ConfigError("patchgan: n_layers must be >= 1")
        if self.norm not in ("batch", "instance"):
            raise ConfigError(f"patchgan: unknown norm {self.norm!r}")

    def layer_stack(self):
        """(kernel, stride) pairs of the conv stack, first to last."""
        return [(4, 2)] * self.n_layers + [(4, 1), (4, 1)]


class Network:
    """Named parameter tensors plus a topology descriptor and a mode flag."""

    def __init__(self, kind, config, params, buffers, name="net", mode="train"):
        self.kind = kind
        self.config = config
        self.params = params
        self.buffers = buffers
        self.name = name
        self.mode = mode

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode

    def __repr__(self):
        n = sum(p.data.size for p in self.params.values())
        return f"Network({self.kind!r}, name={self.name!r}, params={n}, mode={self.mode!r})"


def _init_conv(rng, shape):
    return ts.Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(np.float32), requires_grad=True)


def _init_norm(rng, params, buffers, prefix, channels, norm):
    params[f"{prefix}.gamma"] = ts.Tensor(
        rng.normal(1.0, INIT_STD, size=channels).astype(np.float32), requires_grad=True
    )
    params[f"{prefix}.beta"] = ts.Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
    if norm == "batch":
        buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=np.float32)
        buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=np.float32)


def build_unet(cfg, seed, name="G"):
    """Construct a U-Net with seed-reproducible gaussian init."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    enc = cfg.encoder_channels()

    prev = cfg.in_channels
    for i in range(cfg.depth):
        stage = f"enc{i + 1}"
        params[f"{stage}.w"] = _init_conv(rng, (enc[i], prev, 4, 4))
        if i == 0:
            params[f"{stage}.b"] = ts.Tensor(np.zeros(enc[i], dtype=np.float32), requires_grad=True)
        else:
            _init_norm(rng, params, buffers, f"{stage}.norm", enc[i], cfg.norm)
        prev = enc[i]

    for j in range(1, cfg.depth):
        stage = f"dec{j}"
        in_ch = enc[cfg.depth - 1] if j == 1 else 2 * enc[cfg.depth - j]
        out_ch = enc[cfg.depth - 1 - j]
        params[f"{stage}.w"] = _init_conv(rng, (in_ch, out_ch, 4, 4))
        _init_norm(rng, params, buffers, f"{stage}.norm", out_ch, cfg.norm)

    final_in = 2 * enc[0] if cfg.depth > 1 else enc[0]
    params["out.w"] = _init_conv(rng, (final_in, cfg.out_channels, 4, 4))
    params["out.b"] = ts.Tensor(np.zeros(cfg.out_channels, dtype=np.float32), requires_grad=True)
    return Network("unet", cfg, params, buffers, name=name)


def build_patchgan(cfg, seed, name="D"):
    """Construct a PatchGAN discriminator with seed-reproducible init."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}

    prev = cfg.in_channels
    for i in range(1, cfg.n_layers + 1):
        ch = _filters(cfg.base_filters, i - 1)
        params[f"d{i}.w"] = _init_conv(rng, (ch, prev, 4, 4))
        if i == 1:
            params[f"d{i}.b"] = ts.Tensor(np.zeros(ch, dtype=np.float32), requires_grad=True)
        else:
            _init_norm(rng, params, buffers, f"d{i}.norm", ch, cfg.norm)
        prev = ch

    pen = _filters(cfg.base_filters, cfg.n_layers)
    params["pen.w"] = _init_conv(rng, (pen, prev, 4, 4))
    _init_norm(rng, params, buffers, "pen.norm", pen, cfg.norm)
    params["out.w"] = _init_conv(rng, (1, pen, 4, 4))
    params["out.b"] = ts.Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    return Network("patchgan", cfg, params, buffers, name=name)


def _apply_norm(net, prefix, h, mode):
    gamma = net.params[f"{prefix}.gamma"]
    beta = net.params[f"{prefix}.beta"]
    if net.config.norm == "batch":
        return ts.batchnorm(
            h,
            gamma,
            beta,
            net.buffers[f"{prefix}.running_mean"],
            net.buffers[f"{prefix}.running_var"],
            mode=mode,
        )
    return ts.instancenorm(h, gamma, beta)


def _forward_unet(net, x, mode, seed):
    cfg = net.config
    b, c, h, w = x.data.shape
    if c != cfg.in_channels:
        raise ShapeError(f"unet {net.name!r}: expected {cfg.in_channels} input channels, got {c}")
    stride_total = 2**cfg.depth
    if h % stride_total or w % stride_total or h < stride_total or w < stride_total:
        raise ConfigError(
            f"unet {net.name!r}: spatial extent {h}x{w} not divisible by 2^depth={stride_total}"
        )

    skips = []
    for i in range(cfg.depth):
        stage = f"enc{i + 1}"
        x = ts.conv2d(x, net.params[f"{stage}.w"], stride=2, padding=1)
        if i == 0:
            x = ts.channel_bias(x, net.params[f"{stage}.b"])
        else:
            x = _apply_norm(net, f"{stage}.norm", x, mode)
        x = ts.leaky_relu(x, 0.2)
        skips.append(x)

    for j in range(1, cfg.depth):
        stage = f"dec{j}"
        x = ts.conv2d_transpose(x, net.params[f"{stage}.w"], stride=2, padding=1)
        x = _apply_norm(net, f"{stage}.norm", x, mode)
        if j <= min(cfg.dropout_stages, cfg.depth - 1):
            x = ts.dropout(
                x, cfg.dropout_rate, mode=mode, rng=np.random.default_rng((seed, j))
            )
        x = ts.relu(x)
        x = ts.concat([x, skips[cfg.depth - 1 - j]], axis=1)

    x = ts.conv2d_transpose(x, net.params["out.w"], stride=2, padding=1)
    x = ts.channel_bias(x, net.params["out.b"])
    return ts.tanh(x)


def _forward_patchgan(net, x, mode):
    cfg = net.config
    if x.data.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"patchgan {net.name!r}: expected {cfg.in_channels} input channels, "
            f"got {x.data.shape[1]}"
        )
    for i in range(1, cfg.n_layers + 1):
        stage = f"d{i}"
        x = ts.conv2d(x, net.params[f"{stage}.w"], stride=2, padding=1)
        if i == 1:
            x = ts.channel_bias(x, net.params[f"{stage}.b"])
        else:
            x = _apply_norm(net, f"{stage}.norm", x, mode)
        x = ts.leaky_relu(x, 0.2)
    x = ts.conv2d(x, net.params["pen.w"], stride=1, padding=1)
    x = _apply_norm(net, "pen.norm", x, mode)
    x = ts.leaky_relu(x, 0.2)
    x = ts.conv2d(x, net.params["out.w"], stride=1, padding=1)
    return ts.channel_bias(x, net.params["out.b"])


def forward(net, x, mode=None, seed=0):
    """Run a network; train mode activates dropout and batch statistics."""
    mode = net.mode if mode is None else mode
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"forward: expected NCHW input, got shape {x.data.shape}")
    if net.kind == "unet":
        return _forward_unet(net, x, mode, seed)
    if net.kind == "patchgan":
        return _forward_patchgan(net, x, mode)
    raise ConfigError(f"unknown network kind {net.kind!r}")


def receptive_field(cfg):
    """Input extent seen by one patch logit: r <- r*s + (k - s), last to first."""
    r = 1
    for k, s in reversed(cfg.layer_stack()):
        r = r * s + (k - s)
    return r


def patch_map_extent(cfg, extent):
    """Spatial extent of the patch logit map for a square input."""
    for k, s in cfg.layer_stack():
        extent = ts.conv_output_extent(extent, k, s, 1)
        if extent < 1:
            raise ShapeError("patchgan: input too small for the configured stack")
    return extent
