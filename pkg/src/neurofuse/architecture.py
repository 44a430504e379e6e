"""Backbone and fusion-network builders.

Two frozen convolutional backbones feed the classifier: a deep pre-activation
residual network and a VGG-style trunk tapped after its third, fourth, and
fifth pooling stages. Each tap passes through a non-local context block, a
depthwise separable convolution, batch norm, and a max pool that brings every
tap to a common grid. The residual output and the concatenated taps fuse
under dual channel/spatial attention, collapse to 128 channels through a 1x1
convolution, and global-average-pool into the 128-d embedding the heads
consume.

Two presets ship: ``paper`` (224x224x3 input, full-depth backbones) and
``tiny`` (64x64x1, shrunk to train on a CPU in minutes). Backbone weights are
randomly initialized; converted pretrained weights can be installed through
``Module.load_state`` with the weight file format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    MaxPool2d,
    Module,
    ReLU,
    SeparableConv2d,
    Sequential,
)
from .util import rng_for


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class ResidualConfig:
    input_size: int = 224
    in_channels: int = 3
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool_window: int = 3
    # (block count, output channels, stride of the stage's first block)
    stages: tuple = ((3, 256, 1), (8, 512, 2), (36, 1024, 2), (3, 2048, 2))
    bottleneck: bool = True


@dataclass(frozen=True)
class VggConfig:
    input_size: int = 224
    in_channels: int = 3
    # (conv count, width) per block; pool window/stride per block follows
    blocks: tuple = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
    pools: tuple = (2, 2, 2, 2, 2)
    tap_blocks: tuple = (3, 4, 5)  # 1-based block indices


@dataclass(frozen=True)
class TapConfig:
    dwsc_out_channels: tuple = (128, 256, 512)
    nonlocal_bottleneck_ratio: int = 2
    target_grid: int = 7
    dwsc_kernel: int = 3


@dataclass(frozen=True)
class FusionConfig:
    attention_reduction: int = 16
    pointwise_out: int = 128
    head_hidden: int = 64
    head_dropout: float = 0.3


@dataclass(frozen=True)
class NetworkConfig:
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    vgg: VggConfig = field(default_factory=VggConfig)
    taps: TapConfig = field(default_factory=TapConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)


def paper_config(tap_widths: tuple = (128, 256, 512)) -> NetworkConfig:
    return NetworkConfig(taps=TapConfig(dwsc_out_channels=tuple(tap_widths)))


def tiny_config(tap_widths: tuple = (16, 32, 48)) -> NetworkConfig:
    return NetworkConfig(
        residual=ResidualConfig(
            input_size=64,
            in_channels=1,
            stem_channels=16,
            stem_kernel=3,
            stem_stride=2,
            stem_pool_window=2,
            stages=((1, 32, 2), (1, 64, 2)),
            bottleneck=False,
        ),
        vgg=VggConfig(
            input_size=64,
            in_channels=1,
            blocks=((1, 8), (1, 16), (1, 24), (1, 32), (1, 48)),
            pools=(2, 2, 2, 2, 1),
        ),
        taps=TapConfig(dwsc_out_channels=tuple(tap_widths), target_grid=4),
    )


PRESETS = {"paper": paper_config, "tiny": tiny_config}


# -- residual backbone ----------------------------------------------------------


class BottleneckBlock(Module):
    """Pre-activation bottleneck: BN-ReLU-1x1, BN-ReLU-3x3, BN-ReLU-1x1 + skip."""

    def __init__(self, cin: int, cout: int, stride: int, rng):
        super().__init__()
        mid = cout // 4
        self.bn1 = BatchNorm(cin)
        self.conv1 = Conv2d(1, 1, cin, mid, bias=False, rng=rng)
        self.bn2 = BatchNorm(mid)
        self.conv2 = Conv2d(3, 3, mid, mid, stride=stride, bias=False, rng=rng)
        self.bn3 = BatchNorm(mid)
        self.conv3 = Conv2d(1, 1, mid, cout, bias=False, rng=rng)
        self.shortcut = (
            None if cin == cout and stride == 1 else Conv2d(1, 1, cin, cout, stride=stride, bias=False, rng=rng)
        )
        self.stride = stride

    def forward(self, x):
        h = T.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(h)
        h = self.conv1(h)
        h = self.conv2(T.relu(self.bn2(h)))
        h = self.conv3(T.relu(self.bn3(h)))
        return T.add(h, skip)

    def out_shape(self, in_shape):
        h, w, _ = in_shape
        return -(-h // self.stride), -(-w // self.stride), self.conv3.w.shape[3]

    branch_convs = 3


class BasicBlock(Module):
    """Pre-activation two-conv residual block for the small presets."""

    def __init__(self, cin: int, cout: int, stride: int, rng):
        super().__init__()
        self.bn1 = BatchNorm(cin)
        self.conv1 = Conv2d(3, 3, cin, cout, stride=stride, bias=False, rng=rng)
        self.bn2 = BatchNorm(cout)
        self.conv2 = Conv2d(3, 3, cout, cout, bias=False, rng=rng)
        self.shortcut = (
            None if cin == cout and stride == 1 else Conv2d(1, 1, cin, cout, stride=stride, bias=False, rng=rng)
        )
        self.stride = stride

    def forward(self, x):
        h = T.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(h)
        h = self.conv1(h)
        h = self.conv2(T.relu(self.bn2(h)))
        return T.add(h, skip)

    def out_shape(self, in_shape):
        h, w, _ = in_shape
        return -(-h // self.stride), -(-w // self.stride), self.conv2.w.shape[3]

    branch_convs = 2


class ResidualBackbone(Module):
    def __init__(self, cfg: ResidualConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(
            cfg.stem_kernel, cfg.stem_kernel, cfg.in_channels, cfg.stem_channels,
            stride=cfg.stem_stride, bias=False, rng=rng,
        )
        self.stem_pool = MaxPool2d(cfg.stem_pool_window, stride=2, padding="same")
        block_cls = BottleneckBlock if cfg.bottleneck else BasicBlock
        blocks = []
        cin = cfg.stem_channels
        for n_blocks, cout, stride in cfg.stages:
            for i in range(n_blocks):
                blocks.append(block_cls(cin, cout, stride if i == 0 else 1, rng))
                cin = cout
        self.blocks = Sequential(*blocks)
        self.final_bn = BatchNorm(cin)
        self.out_channels = cin
        grid = self.out_shape((cfg.input_size, cfg.input_size, cfg.in_channels))
        self.out_grid = grid[0]

    def forward(self, x):
        h = self.stem_pool(self.stem(x))
        h = self.blocks(h)
        return T.relu(self.final_bn(h))

    def out_shape(self, in_shape):
        s = self.stem.out_shape(in_shape)
        s = self.stem_pool.out_shape(s)
        return self.blocks.out_shape(s)

    def branch_conv_count(self) -> int:
        """Stem plus residual-branch convolutions (shortcut projections excluded)."""
        return 1 + sum(b.branch_convs for b in self.blocks.layers)


def build_residual_backbone(cfg: ResidualConfig, seed: int = 0) -> ResidualBackbone:
    return ResidualBackbone(cfg, rng_for(seed, 1))


# -- attention blocks -------------------------------------------------------------


class NonLocalBlock(Module):
    """Embedded-Gaussian self-attention over all spatial positions, added residually.

    theta, phi, g are biasless 1x1 convs to C/ratio; attention is the
    row-softmax of theta.phi^T over positions; the output projection starts at
    zero so a fresh block is exactly the identity.
    """

    def __init__(self, channels: int, ratio: int = 2, rng=None):
        super().__init__()
        if channels % ratio:
            raise ValueError(f"non-local bottleneck ratio {ratio} must divide {channels} channels")
        self.bottleneck = channels // ratio
        self.theta = Conv2d(1, 1, channels, self.bottleneck, bias=False, rng=rng)
        self.phi = Conv2d(1, 1, channels, self.bottleneck, bias=False, rng=rng)
        self.g = Conv2d(1, 1, channels, self.bottleneck, bias=False, rng=rng)
        self.w_out = Conv2d(1, 1, self.bottleneck, channels, bias=False, zero_init=True)

    def forward(self, x):
        n, h, w, _ = x.shape
        hw = h * w
        th = T.reshape(self.theta(x), (n, hw, self.bottleneck))
        ph = T.reshape(self.phi(x), (n, hw, self.bottleneck))
        gg = T.reshape(self.g(x), (n, hw, self.bottleneck))
        att = T.softmax(T.bmm(th, T.transpose_last2(ph)), axis=-1)
        y = T.reshape(T.bmm(att, gg), (n, h, w, self.bottleneck))
        return T.add(x, self.w_out(y))

    def out_shape(self, in_shape):
        return in_shape


class ChannelAttention(Module):
    """Squeeze to per-channel means, gate through a biasless two-layer bottleneck."""

    def __init__(self, channels: int, reduction: int = 16, rng=None):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"attention reduction {reduction} must divide {channels} channels")
        self.w1 = Dense(channels, channels // reduction, bias=False, rng=rng)
        self.w2 = Dense(channels // reduction, channels, bias=False, rng=rng)

    def gate(self, x):
        u = T.global_avg_pool(x)
        return T.sigmoid(self.w2(T.relu(self.w1(u))))

    def forward(self, x):
        n, _, _, c = x.shape
        return T.mul(x, T.reshape(self.gate(x), (n, 1, 1, c)))


class SpatialAttention(Module):
    """Per-position sigmoid gate from a biasless 1x1 conv to one channel."""

    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.ws = Conv2d(1, 1, channels, 1, bias=False, rng=rng)

    def gate(self, x):
        return T.sigmoid(self.ws(x))

    def forward(self, x):
        return T.mul(x, self.gate(x))


class DualAttention(Module):
    """Sum of the channel-refined and spatially-refined feature maps."""

    def __init__(self, channels: int, reduction: int = 16, rng=None):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction, rng=rng)
        self.spatial = SpatialAttention(channels, rng=rng)

    def forward(self, x):
        return T.add(self.channel(x), self.spatial(x))

    def out_shape(self, in_shape):
        return in_shape


# -- modified VGG -------------------------------------------------------------------


class ModifiedVgg(Module):
    """VGG-style trunk with tapped blocks feeding non-local + DWSC side branches.

    ``trunk_taps`` runs only the (typically frozen) trunk and returns the raw
    post-pool tap maps; ``process_taps`` runs the trainable side branches and
    concatenates them on the common grid. ``forward`` chains the two.
    """

    def __init__(self, cfg: VggConfig, taps: TapConfig, rng):
        super().__init__()
        self.cfg, self.tap_cfg = cfg, taps
        if len(taps.dwsc_out_channels) != len(cfg.tap_blocks):
            raise ValueError("one DWSC output width is needed per tapped block")
        blocks = []
        cin = cfg.in_channels
        for (n_convs, width), pool in zip(cfg.blocks, cfg.pools):
            layers = []
            for _ in range(n_convs):
                layers += [Conv2d(3, 3, cin, width, rng=rng), ReLU()]
                cin = width
            if pool > 1:
                layers.append(MaxPool2d(pool))
            blocks.append(Sequential(*layers))
        self.trunk = Sequential(*blocks)

        grids = self._tap_grids()
        smallest = min(g for g, _ in grids)
        if taps.target_grid > smallest:
            raise ValueError(f"target grid {taps.target_grid} exceeds the smallest tap grid {smallest}")
        procs = []
        for (grid, channels), out_c in zip(grids, taps.dwsc_out_channels):
            if grid % taps.target_grid:
                raise ValueError(f"tap grid {grid} is not a multiple of target grid {taps.target_grid}")
            window = grid // taps.target_grid
            layers = [
                NonLocalBlock(channels, taps.nonlocal_bottleneck_ratio, rng=rng),
                SeparableConv2d(taps.dwsc_kernel, taps.dwsc_kernel, channels, out_c, rng=rng),
                BatchNorm(out_c),
            ]
            if window > 1:
                layers.append(MaxPool2d(window))
            procs.append(Sequential(*layers))
        self.tap_procs = Sequential(*procs)
        self.out_channels = sum(taps.dwsc_out_channels)
        self.out_grid = taps.target_grid

    def _tap_grids(self) -> list[tuple[int, int]]:
        shape = (self.cfg.input_size, self.cfg.input_size, self.cfg.in_channels)
        grids = []
        for i, block in enumerate(self.trunk.layers, start=1):
            shape = block.out_shape(shape)
            if i in self.cfg.tap_blocks:
                grids.append((shape[0], shape[2]))
        return grids

    def trunk_taps(self, x) -> list:
        taps = []
        for i, block in enumerate(self.trunk.layers, start=1):
            x = block(x)
            if i in self.cfg.tap_blocks:
                taps.append(x)
        return taps

    def process_taps(self, taps: list):
        return T.concat_channels([proc(tap) for proc, tap in zip(self.tap_procs.layers, taps)])

    def forward(self, x):
        return self.process_taps(self.trunk_taps(x))

    def freeze_trunk(self) -> "ModifiedVgg":
        self.trunk.freeze()
        return self

    def conv_count(self) -> int:
        return sum(n for n, _ in self.cfg.blocks)


def build_modified_vgg(cfg: VggConfig, taps: TapConfig, seed: int = 0) -> ModifiedVgg:
    return ModifiedVgg(cfg, taps, rng_for(seed, 2))


# -- fused classifier ------------------------------------------------------------------


class FusionClassifierNet(Module):
    """Frozen backbones, dual-attention fusion, 128-d embedding, optional MLP head.

    The trainable surface is the tap branches, the attention block, the 1x1
    pointwise reduction, the feature batch norm, and (when present) the MLP
    head; both backbones stay frozen.
    """

    def __init__(self, residual: ResidualBackbone, vgg: ModifiedVgg, fusion: FusionConfig,
                 n_classes: int, rng, head: str = "mlp"):
        super().__init__()
        if head not in ("mlp", "none"):
            raise ValueError(f"head must be 'mlp' or 'none', got {head!r}")
        if residual.out_grid != vgg.out_grid:
            raise ValueError(
                f"backbone grids disagree: residual emits {residual.out_grid}x{residual.out_grid}, "
                f"modified VGG emits {vgg.out_grid}x{vgg.out_grid}"
            )
        self.residual = residual
        self.vgg = vgg
        self.fusion_cfg = fusion
        self.n_classes = n_classes
        self.fused_channels = residual.out_channels + vgg.out_channels
        self.feature_grid = residual.out_grid
        self.attention = DualAttention(self.fused_channels, fusion.attention_reduction, rng=rng)
        self.pointwise = Conv2d(1, 1, self.fused_channels, fusion.pointwise_out, rng=rng)
        self.feature_bn = BatchNorm(fusion.pointwise_out)
        self.head = head
        if head == "mlp":
            self.head_hidden = Sequential(
                Dense(fusion.pointwise_out, fusion.head_hidden, rng=rng),
                ReLU(),
                Dropout(fusion.head_dropout),
            )
            self.head_out = Dense(fusion.head_hidden, n_classes, rng=rng)
        self.residual.freeze()
        self.vgg.freeze_trunk()

    # -- forward paths. backbone_outputs is the frozen (cacheable) prefix; the
    # rest runs in whatever train/eval mode the net is in.

    def backbone_outputs(self, x):
        return self.residual(x), self.vgg.trunk_taps(x)

    def fused_map_from(self, res_out, taps):
        fused = T.concat_channels([res_out, self.vgg.process_taps(taps)])
        return self.pointwise(self.attention(fused))

    def features_from(self, res_out, taps):
        return self.feature_bn(T.global_avg_pool(self.fused_map_from(res_out, taps)))

    def features(self, x):
        return self.features_from(*self.backbone_outputs(x))

    def logits(self, feats):
        if self.head != "mlp":
            raise RuntimeError("this network was built without an MLP head")
        return self.head_out(self.head_hidden(feats))

    def forward(self, x):
        if self.head != "mlp":
            return self.features(x)
        return T.softmax(self.logits(self.features(x)))

    # -- explanation hooks: the pointwise map is the default Grad-CAM target.

    def pointwise_map(self, x):
        return self.fused_map_from(*self.backbone_outputs(x))

    def logits_from_map(self, pmap):
        return self.logits(self.feature_bn(T.global_avg_pool(pmap)))


def build_fusion_classifier(cfg: NetworkConfig, n_classes: int, seed: int = 0, head: str = "mlp") -> FusionClassifierNet:
    residual = build_residual_backbone(cfg.residual, seed=seed)
    vgg = build_modified_vgg(cfg.vgg, cfg.taps, seed=seed)
    return FusionClassifierNet(residual, vgg, cfg.fusion, n_classes, rng_for(seed, 3), head=head)
