"""DenseNet feature encoder.

Turns a preprocessed line image (H x W x 1, values in [0, 1]) into a grid of
annotation vectors. Three dense blocks, each preceded by a 2x2 stride-2 pool,
so the grid extents are the image extents floor-halved three times. Within a
block, sublayers come in (1x1 bottleneck, 3x3 conv) pairs and every pair's
output is depth-concatenated onto the running feature map. There is no
channel compression between blocks, so the final depth is

    annotation_dim = initial_channels + num_blocks * pairs * growth_rate
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import CONVOLUTIONAL, Parameter, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 3
    sublayers_per_block: int = 32
    growth_rate: int = 13
    bottleneck_width: int = 52
    initial_channels: int = 60
    dropout_ratio: float = 0.2
    pool_mode: str = "max"

    def __post_init__(self):
        extents = (self.num_blocks, self.sublayers_per_block, self.growth_rate,
                   self.bottleneck_width, self.initial_channels)
        if any(v <= 0 for v in extents):
            raise ValueError(f"encoder extents must be positive, got {extents}")
        if self.sublayers_per_block % 2 != 0:
            raise ValueError(
                f"sublayers_per_block must be even (bottleneck + conv pairs), "
                f"got {self.sublayers_per_block}")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError(f"dropout_ratio out of [0, 1): {self.dropout_ratio}")
        if self.pool_mode not in ("max", "avg"):
            raise ValueError(f"pool_mode must be 'max' or 'avg', got {self.pool_mode!r}")

    @property
    def pairs_per_block(self) -> int:
        return self.sublayers_per_block // 2

    @property
    def annotation_dim(self) -> int:
        return (self.initial_channels
                + self.num_blocks * self.pairs_per_block * self.growth_rate)

    @staticmethod
    def toy() -> "EncoderConfig":
        """Desk-scale preset: annotation_dim 22, trains in seconds on CPU."""
        return EncoderConfig(num_blocks=3, sublayers_per_block=4, growth_rate=3,
                             bottleneck_width=12, initial_channels=4)

    @staticmethod
    def full() -> "EncoderConfig":
        """Full-scale preset landing annotation_dim 684."""
        return EncoderConfig(num_blocks=3, sublayers_per_block=32, growth_rate=13,
                             bottleneck_width=52, initial_channels=60)


@dataclass
class AnnotationGrid:
    h: int
    w: int
    d: int
    vectors: Tensor

    def __post_init__(self):
        if self.vectors.shape != (self.h, self.w, self.d):
            raise ValueError(
                f"annotation grid shape {self.vectors.shape} does not match "
                f"declared extents ({self.h}, {self.w}, {self.d})")

    @property
    def num_regions(self) -> int:
        return self.h * self.w

    def as_matrix(self) -> Tensor:
        """The grid flattened to (num_regions, d), row-major over locations."""
        return self.vectors.reshape(self.num_regions, self.d)


def _glorot_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class _ConvUnit:
    """One sublayer: batchnorm -> relu -> dropout -> convolution."""

    def __init__(self, name, in_channels, out_channels, kernel_extent, rng):
        self.name = name
        self.scale = Parameter(f"{name}.norm_scale",
                               Tensor(np.ones(in_channels)), CONVOLUTIONAL)
        self.shift = Parameter(f"{name}.norm_shift",
                               Tensor(np.zeros(in_channels)), CONVOLUTIONAL)
        self.running_mean = np.zeros(in_channels)
        self.running_var = np.ones(in_channels)
        ke = kernel_extent
        fan_in = ke * ke * in_channels
        fan_out = ke * ke * out_channels
        kernel = _glorot_uniform(rng, (ke, ke, in_channels, out_channels),
                                 fan_in, fan_out)
        self.kernel = Parameter(f"{name}.kernel", Tensor(kernel), CONVOLUTIONAL)

    def apply(self, x: Tensor, mode: str, dropout_ratio: float, rng) -> Tensor:
        x = T.batchnorm(x, self.scale.tensor, self.shift.tensor,
                        self.running_mean, self.running_var, mode)
        x = T.relu(x)
        x = T.dropout(x, dropout_ratio, mode, rng)
        return T.conv2d(x, self.kernel.tensor, padding="same")

    def parameters(self):
        return [self.scale, self.shift, self.kernel]

    def running_stats(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


class DenseBlock:
    """A stack of (bottleneck, 3x3) pairs with depth-wise concatenation."""

    def __init__(self, name, in_channels, config: EncoderConfig, rng):
        if in_channels < 1:
            raise ValueError("dense block requires at least one input channel")
        self.config = config
        self.in_channels = in_channels
        self.pairs = []
        for i in range(config.pairs_per_block):
            c = in_channels + i * config.growth_rate
            bottleneck = _ConvUnit(f"{name}.pair{i}.bottleneck",
                                   c, config.bottleneck_width, 1, rng)
            spatial = _ConvUnit(f"{name}.pair{i}.conv",
                                config.bottleneck_width, config.growth_rate, 3, rng)
            self.pairs.append((bottleneck, spatial))

    @property
    def out_channels(self) -> int:
        return self.in_channels + len(self.pairs) * self.config.growth_rate

    def apply(self, features: Tensor, mode: str, rng=None) -> Tensor:
        if features.shape[-1] != self.in_channels:
            raise ValueError(
                f"dense block expects {self.in_channels} input channels, "
                f"got {features.shape[-1]}")
        ratio = self.config.dropout_ratio
        for bottleneck, spatial in self.pairs:
            squeezed = bottleneck.apply(features, mode, ratio, rng)
            grown = spatial.apply(squeezed, mode, ratio, rng)
            features = T.concat([features, grown], axis=-1)
        return features

    def parameters(self):
        out = []
        for bottleneck, spatial in self.pairs:
            out.extend(bottleneck.parameters())
            out.extend(spatial.parameters())
        return out

    def running_stats(self):
        out = {}
        for bottleneck, spatial in self.pairs:
            out.update(bottleneck.running_stats())
            out.update(spatial.running_stats())
        return out


def grid_extents(height: int, width: int, num_blocks: int = 3):
    """Spatial extents after the encoder's stride-2 pools (floor halving)."""
    h, w = height, width
    for _ in range(num_blocks):
        h //= 2
        w //= 2
    return h, w


class DenseNetEncoder:
    def __init__(self, config: EncoderConfig, rng):
        self.config = config
        fan = 3 * 3 * 1, 3 * 3 * config.initial_channels
        kernel = _glorot_uniform(rng, (3, 3, 1, config.initial_channels), *fan)
        self.initial_kernel = Parameter("encoder.initial.kernel",
                                        Tensor(kernel), CONVOLUTIONAL)
        self.blocks = []
        channels = config.initial_channels
        for b in range(config.num_blocks):
            block = DenseBlock(f"encoder.block{b}", channels, config, rng)
            self.blocks.append(block)
            channels = block.out_channels
        assert channels == config.annotation_dim

    def encode(self, image: Tensor, mode: str, rng=None) -> AnnotationGrid:
        if image.data.ndim != 3 or image.shape[-1] != 1:
            raise ValueError(f"expected an H x W x 1 image, got shape {image.shape}")
        height, width = image.shape[0], image.shape[1]
        min_extent = 2 ** self.config.num_blocks
        if height < min_extent or width < min_extent:
            raise ValueError(
                f"image {height}x{width} is smaller than the pooling budget "
                f"({self.config.num_blocks} stride-2 pools need >= "
                f"{min_extent}x{min_extent})")
        if mode == "train" and rng is None:
            raise ValueError("train mode requires an rng for dropout")

        x = T.conv2d(image, self.initial_kernel.tensor, padding="same")
        for block in self.blocks:
            x = T.pool2d(x, self.config.pool_mode)
            x = block.apply(x, mode, rng)
        h, w, d = x.shape
        return AnnotationGrid(h=h, w=w, d=d, vectors=x)

    def parameters(self):
        out = [self.initial_kernel]
        for block in self.blocks:
            out.extend(block.parameters())
        return out

    def running_stats(self):
        out = {}
        for block in self.blocks:
            out.update(block.running_stats())
        return out
