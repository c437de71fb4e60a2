"""Encoder-decoder segmentation graph with context enhancement and
multi-source aggregation.

The network is a U-shaped pair of paths.  Each contracting block (acb)
runs two 3x3 convolutions and, when enabled, a context module (icm) that
abstracts both conv outputs, fuses them, and spreads them over parallel
dilated convolutions (aspp) before handing a skip tensor to the decoder.
Each expansive block (aeb) aggregates multiple sources (msa): the
upsampled feature from below, the paired skip, optionally the resized raw
image, and optionally dense features from earlier expansive blocks.  Every
block can emit a side logit map for deep supervision; side logits are
bilinearly resized to the input resolution before they are returned.

All convolutions preserve spatial size (SAME); interior convolutions are
relu-activated, side heads and the final head are linear, and the 2x2
transposed convolutions that upsample between levels carry no activation.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from acenet.autodiff import Parameter, Tensor, default_dtype, ops
from acenet.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NetworkConfig:
    """Every architectural degree of freedom, normalized and hashable.

    `icm_enabled` holds contracting-block indices (1..depth) that get the
    context module; `msa_raw_image` holds expansive-block indices that
    receive the resized raw image as an extra aggregation source.
    """

    depth: int = 4
    base_width: int = 16
    num_classes: int = 2
    in_channels: int = 1
    aspp_rates: Tuple[int, ...] = (1, 2, 4)
    icm_enabled: Optional[Tuple[int, ...]] = None  # None = every block
    msa_raw_image: Optional[Tuple[int, ...]] = None  # None = blocks 1 and 2
    dense_connections: bool = True
    deep_supervision: bool = True

    def __post_init__(self):
        object.__setattr__(self, "aspp_rates", tuple(self.aspp_rates))
        icm = (range(1, self.depth + 1) if self.icm_enabled is None
               else self.icm_enabled)
        raw = ((i for i in (1, 2) if i <= self.depth) if self.msa_raw_image is None
               else self.msa_raw_image)
        object.__setattr__(self, "icm_enabled", tuple(sorted(set(icm))))
        object.__setattr__(self, "msa_raw_image", tuple(sorted(set(raw))))

    def problems(self) -> List[str]:
        """All constraint violations, empty when the config is valid."""
        out = []
        if self.depth < 1:
            out.append(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            out.append(f"base_width must be >= 1, got {self.base_width}")
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            out.append(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.aspp_rates:
            out.append("aspp_rates must be non-empty")
        elif list(self.aspp_rates) != sorted(set(self.aspp_rates)) or self.aspp_rates[0] < 1:
            out.append(f"aspp_rates must be strictly increasing positive ints, got {list(self.aspp_rates)}")
        for name, indices in (("icm_enabled", self.icm_enabled),
                              ("msa_raw_image", self.msa_raw_image)):
            bad = [k for k in indices if not 1 <= k <= self.depth]
            if bad:
                out.append(f"{name} indices must lie in 1..{self.depth}, got {bad}")
        return out

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_width": self.base_width,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "aspp_rates": list(self.aspp_rates),
            "icm_enabled": list(self.icm_enabled),
            "msa_raw_image": list(self.msa_raw_image),
            "dense_connections": self.dense_connections,
            "deep_supervision": self.deep_supervision,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown network config keys: {unknown}")
        return cls(**doc)

    def level_width(self, level: int) -> int:
        """Channel width at spatial level `level` (1 = full resolution)."""
        return self.base_width * (2 ** (level - 1))

    def aeb_width(self, i: int) -> int:
        """Channel width of expansive block i (1 = nearest the bottleneck)."""
        return self.level_width(self.depth + 1 - i)

    def dense_sources(self, i: int) -> Tuple[int, ...]:
        """Indices of earlier expansive blocks aggregated at block i."""
        if not self.dense_connections or i < 3:
            return ()
        return tuple(range(1, i - 1))


@dataclass
class AcbTensors:
    conv1_out: Tensor
    conv2_out: Tensor
    icm_skip: Tensor  # context-module output, or conv2_out when icm is off
    side_logits: Optional[Tensor]


@dataclass
class AebTensors:
    block_out: Tensor
    side_logits: Optional[Tensor]


@dataclass
class BlockTensors:
    acbs: List[AcbTensors]
    bottleneck_out: Tensor
    aebs: List[AebTensors]


@dataclass
class ForwardOutputs:
    """Final logits plus every side logit map, all at input resolution.

    `side_logits` is ordered contracting blocks 1..depth then expansive
    blocks 1..depth; it is empty when deep supervision is off.
    """

    final_logits: Tensor
    side_logits: List[Tensor]
    block_tensors: BlockTensors


class Network:
    """Parameter set plus wiring; immutable after build except through the
    optimizer.  Two builds from the same config and seed produce identical
    parameter tensors."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        problems = cfg.problems()
        if problems:
            raise ConfigError("invalid network config: " + "; ".join(problems))
        self.cfg = cfg
        self._params = {}
        self._build(np.random.default_rng(seed))

    # ------------------------------------------------------------- build

    def _conv(self, name, cout, cin, k, rng):
        """He-normal weight and zero bias for a k x k convolution."""
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, size=(cout, cin, k, k))
        self._params[f"{name}/weight"] = Parameter(f"{name}/weight", w)
        self._params[f"{name}/bias"] = Parameter(f"{name}/bias", np.zeros(cout))

    def _tconv(self, name, cin, cout, rng):
        std = np.sqrt(2.0 / (cin * 4))
        w = rng.normal(0.0, std, size=(cin, cout, 2, 2))
        self._params[f"{name}/weight"] = Parameter(f"{name}/weight", w)
        self._params[f"{name}/bias"] = Parameter(f"{name}/bias", np.zeros(cout))

    def _build(self, rng):
        cfg = self.cfg
        in_ch = cfg.in_channels
        for k in range(1, cfg.depth + 1):
            w = cfg.level_width(k)
            self._conv(f"acb{k}/conv1", w, in_ch, 3, rng)
            self._conv(f"acb{k}/conv2", w, w, 3, rng)
            if k in cfg.icm_enabled:
                self._conv(f"acb{k}/icm/abstract1", w, w, 3, rng)
                self._conv(f"acb{k}/icm/abstract2", w, w, 3, rng)
                self._conv(f"acb{k}/icm/reduce", w, 2 * w, 1, rng)
                for r in cfg.aspp_rates:
                    ksize = 1 if r == 1 else 3
                    self._conv(f"acb{k}/icm/aspp/branch_r{r}", w, w, ksize, rng)
                self._conv(f"acb{k}/icm/skip", w, len(cfg.aspp_rates) * w, 1, rng)
                if cfg.deep_supervision:
                    self._conv(f"acb{k}/icm/side", cfg.num_classes,
                               len(cfg.aspp_rates) * w, 1, rng)
            elif cfg.deep_supervision:
                self._conv(f"acb{k}/side", cfg.num_classes, w, 1, rng)
            in_ch = w

        bw = cfg.level_width(cfg.depth + 1)
        self._conv("bottleneck/conv1", bw, in_ch, 3, rng)
        self._conv("bottleneck/conv2", bw, bw, 3, rng)

        for i in range(1, cfg.depth + 1):
            w = cfg.aeb_width(i)
            self._tconv(f"aeb{i}/up", 2 * w, w, rng)
            sources = 2  # upsampled + paired skip
            if i in cfg.msa_raw_image:
                self._conv(f"aeb{i}/msa/raw_align", w, cfg.in_channels, 1, rng)
                sources += 1
            for j in cfg.dense_sources(i):
                self._conv(f"aeb{i}/msa/dense_align_{j}", w, cfg.aeb_width(j), 1, rng)
                sources += 1
            self._conv(f"aeb{i}/conv1", w, sources * w, 3, rng)
            self._conv(f"aeb{i}/conv2", w, w, 3, rng)
            if cfg.deep_supervision:
                self._conv(f"aeb{i}/side", cfg.num_classes, w, 1, rng)

        self._conv("head", cfg.num_classes, cfg.base_width, 1, rng)

    # --------------------------------------------------------- accessors

    @property
    def parameters(self):
        """Name -> Parameter mapping in build order."""
        return self._params

    def parameter_list(self):
        return list(self._params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def _p(self, name):
        return self._params[name]

    def _apply_conv(self, name, x, dilation=1, activate=True):
        y = ops.conv2d(x, self._p(f"{name}/weight"), self._p(f"{name}/bias"),
                       dilation=dilation)
        return ops.relu(y) if activate else y

    # ----------------------------------------------------------- forward

    def _run_icm(self, k, conv1_out, conv2_out):
        a1 = self._apply_conv(f"acb{k}/icm/abstract1", conv1_out)
        a2 = self._apply_conv(f"acb{k}/icm/abstract2", conv2_out)
        fused = self._apply_conv(f"acb{k}/icm/reduce", ops.concat_channels([a1, a2]))
        branches = [self._apply_conv(f"acb{k}/icm/aspp/branch_r{r}", fused, dilation=r)
                    for r in self.cfg.aspp_rates]
        context = ops.concat_channels(branches)
        skip = self._apply_conv(f"acb{k}/icm/skip", context)
        side = None
        if self.cfg.deep_supervision:
            side = self._apply_conv(f"acb{k}/icm/side", context, activate=False)
        return skip, side

    def forward(self, image: Tensor) -> ForwardOutputs:
        cfg = self.cfg
        if image.ndim != 4:
            raise ShapeError(f"expected a 4-D image tensor, got shape {image.shape}")
        n, c, h, w = image.shape
        if c != cfg.in_channels:
            raise ShapeError(f"image has {c} channels but the network expects {cfg.in_channels}")
        div = 2 ** cfg.depth
        if h % div or w % div:
            raise ShapeError(
                f"input extents {h}x{w} must be divisible by {div}; "
                f"reflect-pad the image (see data module) before inference")

        acbs = []
        cur = image
        for k in range(1, cfg.depth + 1):
            c1 = self._apply_conv(f"acb{k}/conv1", cur)
            c2 = self._apply_conv(f"acb{k}/conv2", c1)
            if k in cfg.icm_enabled:
                skip, side = self._run_icm(k, c1, c2)
            else:
                skip = c2
                side = (self._apply_conv(f"acb{k}/side", c2, activate=False)
                        if cfg.deep_supervision else None)
            acbs.append(AcbTensors(c1, c2, skip, side))
            cur = ops.maxpool2x2(c2)

        cur = self._apply_conv("bottleneck/conv1", cur)
        bottleneck = self._apply_conv("bottleneck/conv2", cur)

        aebs = []
        prev = bottleneck
        for i in range(1, cfg.depth + 1):
            up = ops.transposed_conv2x2(prev, self._p(f"aeb{i}/up/weight"),
                                        self._p(f"aeb{i}/up/bias"))
            skip = acbs[cfg.depth - i].icm_skip
            th, tw = up.shape[2], up.shape[3]
            sources = [up, skip]
            if i in cfg.msa_raw_image:
                raw = ops.resize_bilinear(image, th, tw)
                sources.append(self._apply_conv(f"aeb{i}/msa/raw_align", raw))
            for j in cfg.dense_sources(i):
                feat = ops.resize_bilinear(aebs[j - 1].block_out, th, tw)
                sources.append(self._apply_conv(f"aeb{i}/msa/dense_align_{j}", feat))
            merged = ops.concat_channels(sources)
            b1 = self._apply_conv(f"aeb{i}/conv1", merged)
            block_out = self._apply_conv(f"aeb{i}/conv2", b1)
            side = (self._apply_conv(f"aeb{i}/side", block_out, activate=False)
                    if cfg.deep_supervision else None)
            aebs.append(AebTensors(block_out, side))
            prev = block_out

        final = self._apply_conv("head", prev, activate=False)

        side_logits = []
        if cfg.deep_supervision:
            for t in [a.side_logits for a in acbs] + [a.side_logits for a in aebs]:
                side_logits.append(ops.resize_bilinear(t, h, w))
        return ForwardOutputs(final, side_logits, BlockTensors(acbs, bottleneck, aebs))


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(cfg, seed=seed)


def describe(net: Network, batch: int = 1, height: Optional[int] = None,
             width: Optional[int] = None) -> str:
    """Plain-text per-block table: name, output shape, parameter count.

    Shapes come from an actual forward pass on a zero image (default
    spatial size 4 * 2^depth), so the table always reflects the wiring.
    """
    cfg = net.cfg
    side_note = "; side head" if cfg.deep_supervision else ""
    h = height or 4 * 2 ** cfg.depth
    w = width or h
    out = net.forward(Tensor(np.zeros((batch, cfg.in_channels, h, w), dtype=default_dtype())))

    def shape_of(t):
        return "x".join(str(d) for d in t.shape)

    def params_under(prefix):
        return sum(p.data.size for name, p in net.parameters.items()
                   if name == prefix or name.startswith(prefix + "/"))

    lines = [
        f"network: depth {cfg.depth}, base width {cfg.base_width}, "
        f"classes {cfg.num_classes}, input channels {cfg.in_channels}",
        f"icm blocks: {', '.join(str(k) for k in cfg.icm_enabled) or 'none'}"
        + (f" (aspp rates {', '.join(str(r) for r in cfg.aspp_rates)})" if cfg.icm_enabled else ""),
        f"raw image into msa: {', '.join(str(i) for i in cfg.msa_raw_image) or 'none'}",
        f"dense connections: {'on' if cfg.dense_connections else 'off'}",
        f"side heads: {2 * cfg.depth if cfg.deep_supervision else 0}",
        "",
        f"{'block':<12}{'output shape':<18}{'params':>10}  notes",
    ]
    bt = out.block_tensors
    for k in range(1, cfg.depth + 1):
        t = bt.acbs[k - 1]
        notes = ("icm" if k in cfg.icm_enabled else "plain") + side_note
        lines.append(f"{f'acb{k}':<12}{shape_of(t.icm_skip):<18}{params_under(f'acb{k}'):>10}  {notes}")
    lines.append(f"{'bottleneck':<12}{shape_of(bt.bottleneck_out):<18}{params_under('bottleneck'):>10}")
    for i in range(1, cfg.depth + 1):
        t = bt.aebs[i - 1]
        srcs = ["up", f"skip:acb{cfg.depth + 1 - i}"]
        if i in cfg.msa_raw_image:
            srcs.append("raw")
        dense = net.cfg.dense_sources(i)
        if dense:
            srcs.append("dense:" + "+".join(f"aeb{j}" for j in dense))
        notes = f"msa[{', '.join(srcs)}]{side_note}"
        lines.append(f"{f'aeb{i}':<12}{shape_of(t.block_out):<18}{params_under(f'aeb{i}'):>10}  {notes}")
    lines.append(f"{'head':<12}{shape_of(out.final_logits):<18}{params_under('head'):>10}")
    lines.append("")
    lines.append(f"total parameters: {net.parameter_count()}")
    return "\n".join(lines)
