"""U-Net with an identity-embedding head on the bottleneck.

Layout (base width ``b``)::

    encoder.stage1  DoubleConv(in -> b)        @ H      -> skip 1, pool
    encoder.stage2  DoubleConv(b -> 2b)        @ H/2    -> skip 2, pool
    encoder.stage3  DoubleConv(2b -> 4b)       @ H/4    -> skip 3, pool
    encoder.stage4  DoubleConv(4b -> 8b)       @ H/8    -> skip 4, pool
    encoder.bottleneck DoubleConv(8b -> 16b)   @ H/16
    decoder.stage{i}, i=1..4: upsample x2 halving channels, concat skip (5 - i),
                              DoubleConv(c -> c/2)
    head            1x1 conv (b -> num_classes)
    embed           refining ConvBNReLU x k @ 16b, pool, MLP(16b -> 2d -> d), L2 norm

The anchor path pools the refined bottleneck under the downsampled target
mask; reference images use plain global average pooling and never touch the
decoder.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DataValidationError, DimensionError
from .nn import functional as F
from .nn.layers import (Conv2d, ConvBNReLU, ConvTranspose2x, DoubleConv, Linear, Module)
from .nn.tensor import Tensor

DEPTH = 4
STRIDE = 2 ** DEPTH


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 1
    base_channels: int = 64
    upsampler: str = "bilinear"
    embed_dim: int = 128
    embed_conv_layers: int = 2

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        if self.embed_dim < 2:
            raise ConfigurationError("embed_dim must be >= 2")
        if self.in_channels < 1 or self.num_classes < 1 or self.embed_conv_layers < 0:
            raise ConfigurationError("in_channels/num_classes must be >= 1, embed_conv_layers >= 0")
        if self.upsampler not in ("bilinear", "transposed"):
            raise ConfigurationError(f"unknown upsampler {self.upsampler!r}")

    @property
    def widths(self):
        return [self.base_channels * 2 ** i for i in range(DEPTH + 1)]

    def to_dict(self):
        return asdict(self)


class Encoder(Module):
    def __init__(self, cfg, rng, dtype):
        super().__init__()
        w = cfg.widths
        self.stage1 = DoubleConv(cfg.in_channels, w[0], rng, dtype)
        self.stage2 = DoubleConv(w[0], w[1], rng, dtype)
        self.stage3 = DoubleConv(w[1], w[2], rng, dtype)
        self.stage4 = DoubleConv(w[2], w[3], rng, dtype)
        self.bottleneck = DoubleConv(w[3], w[4], rng, dtype)

    def forward(self, x):
        skips = []
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4):
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x)
        return skips, self.bottleneck(x)


class Up(Module):
    """Double the resolution and halve channels, concat the skip, DoubleConv."""

    def __init__(self, cin, upsampler, rng, dtype):
        super().__init__()
        self.upsampler = upsampler
        if upsampler == "bilinear":
            self.reduce = Conv2d(cin, cin // 2, 1, rng, bias=True, dtype=dtype)
        else:
            self.up = ConvTranspose2x(cin, cin // 2, rng, dtype)
        self.conv = DoubleConv(cin, cin // 2, rng, dtype)

    def forward(self, x, skip):
        if self.upsampler == "bilinear":
            x = self.reduce(F.upsample_bilinear2x(x))
        else:
            x = self.up(x)
        return self.conv(F.concat([skip, x], axis=1))


class Decoder(Module):
    def __init__(self, cfg, rng, dtype):
        super().__init__()
        w = cfg.widths
        self.stage1 = Up(w[4], cfg.upsampler, rng, dtype)
        self.stage2 = Up(w[3], cfg.upsampler, rng, dtype)
        self.stage3 = Up(w[2], cfg.upsampler, rng, dtype)
        self.stage4 = Up(w[1], cfg.upsampler, rng, dtype)

    def forward(self, skips, x):
        for i, stage in enumerate((self.stage1, self.stage2, self.stage3, self.stage4)):
            x = stage(x, skips[DEPTH - 1 - i])
        return x


class EmbeddingHead(Module):
    def __init__(self, cfg, rng, dtype):
        super().__init__()
        c = cfg.widths[-1]
        self.refine = [ConvBNReLU(c, c, rng, dtype) for _ in range(cfg.embed_conv_layers)]
        for i, layer in enumerate(self.refine):
            setattr(self, f"refine{i + 1}", layer)
        self.fc1 = Linear(c, 2 * cfg.embed_dim, rng, dtype)
        self.fc2 = Linear(2 * cfg.embed_dim, cfg.embed_dim, rng, dtype)

    def forward(self, bottleneck, mask=None):
        x = bottleneck
        for layer in self.refine:
            x = layer(x)
        pooled = F.global_avg_pool(x) if mask is None else masked_pool(x, mask)
        return F.l2_normalize(self.fc2(F.relu(self.fc1(pooled))))


def downsample_mask(mask_full, h, w):
    """Nearest-neighbour (pixel-centre) resize of ``[N,1,H,W]`` to ``h x w``, then ``>= 0.5``."""
    m = np.asarray(mask_full.data if isinstance(mask_full, Tensor) else mask_full)
    H, W = m.shape[2:]
    if H != h * STRIDE or W != w * STRIDE:
        raise DimensionError(f"mask {H}x{W} is not {STRIDE}x the feature size {h}x{w}")
    sh, sw = H // h, W // w
    return m[:, :, sh // 2::sh, sw // 2::sw] >= 0.5


def masked_pool(features, mask_full):
    """Average ``features[N,C,h,w]`` over the target region of the full-size mask."""
    h, w = features.shape[2:]
    small = downsample_mask(mask_full, h, w)
    return F.masked_avg_pool(features, small.astype(features.dtype))


class IAUNet(Module):
    def __init__(self, config=None, seed=0, dtype=np.float32):
        super().__init__()
        cfg = config or ModelConfig()
        object.__setattr__(self, "config", cfg)
        object.__setattr__(self, "encoder_hook", None)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.head = Conv2d(cfg.widths[0], cfg.num_classes, 1, rng, bias=True, dtype=dtype)
        self.embed = EmbeddingHead(cfg, rng, dtype)
        self.assign_names()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def _input(self, image):
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected [N,{self.config.in_channels},H,W] input, got {x.shape}")
        h, w = x.shape[2:]
        if h % STRIDE or w % STRIDE or h == 0 or w == 0:
            raise DimensionError(f"input size {h}x{w} must be a positive multiple of {STRIDE}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        return x

    def encode(self, image):
        skips, bottleneck = self.encoder(self._input(image))
        if self.encoder_hook is not None:
            self.encoder_hook(skips, bottleneck)
        return skips, bottleneck

    def decode(self, skips, bottleneck):
        return self.head(self.decoder(skips, bottleneck))

    def _check_mask(self, mask, image_shape):
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
        if m.shape != (image_shape[0], 1) + tuple(image_shape[2:]):
            raise DimensionError(f"mask shape {m.shape} does not match image {image_shape}")
        if not np.isin(m, (0, 1)).all():
            raise DataValidationError("anchor mask must be binary (values 0/1)")
        return m

    def forward_segment(self, image):
        """Raw logits ``[N,num_classes,H,W]``."""
        return self.decode(*self.encode(image))

    def forward_embed_anchor(self, image, mask):
        x = self._input(image)
        m = self._check_mask(mask, x.shape)
        _, bottleneck = self.encode(x)
        return self.embed(bottleneck, m)

    def forward_embed_reference(self, image):
        _, bottleneck = self.encode(image)
        return self.embed(bottleneck)

    def forward_anchor(self, image, mask):
        """Logits and mask-gated embedding from a single shared encoder pass."""
        x = self._input(image)
        m = self._check_mask(mask, x.shape)
        skips, bottleneck = self.encode(x)
        return self.decode(skips, bottleneck), self.embed(bottleneck, m)

    def embedding_parameters(self):
        return [p for name, p in self.named_parameters() if name.startswith("embed.")]

    def decoder_parameters(self):
        """Parameters on the segmentation-only path (decoder and 1x1 head)."""
        return [p for name, p in self.named_parameters()
                if name.startswith(("decoder.", "head."))]
