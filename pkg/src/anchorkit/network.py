"""A small from-scratch conv detector: backbone, fusion, split heads.

The backbone is a plain stack of 3x3 conv stages (ReLU after every
conv; a stage's stride sits on its last conv). Selected stages ("taps")
feed the detection layers: each tap is projected to a common channel
count by a 1x1 conv, optionally fused with the 2x-upsampled projection
of its successor tap (one hop only, not a full pyramid), and finally
read by a classification branch (2 filters) and a regression branch
(4 filters).

Per-layer head maps are flattened row-major and concatenated
layer-major, so row i of the output aligns with anchor i of
``generate_anchors`` for the matching anchor config.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

from .geometry import AnchorConfig, LayerSpec
from .layers import (
    conv2d,
    conv2d_backward,
    fuse,
    relu,
    relu_backward,
    upsample2_backward,
)

__all__ = [
    "StageSpec",
    "NetConfig",
    "Network",
    "RawOutput",
    "build_network",
    "detection_head",
    "flatten_maps",
    "forward_detect",
    "parameter_count",
    "save_weights",
    "load_weights",
    "tap_conv_stacks",
]


@dataclass(frozen=True)
class StageSpec:
    n_convs: int
    channels: int
    stride: int

    def __post_init__(self) -> None:
        if self.n_convs < 1 or self.channels < 1 or self.stride < 1:
            raise ValueError(f"bad stage spec: {self}")


@dataclass(frozen=True)
class RawOutput:
    """Per-anchor head outputs: (N, 2) logits as (background, face), (N, 4) offsets."""

    logits: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        n = self.logits.shape[0]
        if self.logits.shape != (n, 2) or self.offsets.shape != (n, 4):
            raise ValueError(
                f"raw output shapes must be (N, 2)/(N, 4), got "
                f"{self.logits.shape}/{self.offsets.shape}"
            )

    def __len__(self) -> int:
        return int(self.logits.shape[0])


@dataclass(frozen=True)
class NetConfig:
    """Detector topology tied to an anchor config.

    ``taps`` are backbone stage indices whose cumulative stride must
    equal the matching anchor layer's stride. ``split_heads=False`` drops
    the per-branch conv trunks and applies the terminal 2/4-filter convs
    directly to the (projected, fused) feature map — the shared-head
    baseline used for ablations.
    """

    stages: tuple[StageSpec, ...]
    taps: tuple[int, ...]
    anchors: AnchorConfig
    head_channels: int = 64
    head_depth: int = 2
    fusion: bool = True
    split_heads: bool = True
    in_channels: int = 1

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("net config needs at least one stage")
        if any(b <= a for a, b in zip(self.taps, self.taps[1:])):
            raise ValueError(f"taps must be strictly increasing: {self.taps}")
        if len(self.taps) != len(self.anchors.layers):
            raise ValueError(
                f"{len(self.taps)} taps vs {len(self.anchors.layers)} anchor layers"
            )
        if self.taps and (self.taps[0] < 0 or self.taps[-1] >= len(self.stages)):
            raise ValueError(f"tap index out of range: {self.taps}")
        strides = self.cumulative_strides()
        for ti, si in enumerate(self.taps):
            want = self.anchors.strides[ti]
            if strides[si] != want:
                raise ValueError(
                    f"tap {ti} (stage {si}) has cumulative stride {strides[si]}, "
                    f"anchor layer expects {want}"
                )
        if self.head_depth < 0 or self.head_channels < 1:
            raise ValueError("head_depth must be >= 0 and head_channels >= 1")

    def cumulative_strides(self) -> list[int]:
        acc, out = 1, []
        for st in self.stages:
            acc *= st.stride
            out.append(acc)
        return out

    @classmethod
    def toy(
        cls,
        image_w: int = 64,
        image_h: int = 64,
        fusion: bool = True,
        split_heads: bool = True,
        head_channels: int = 64,
        head_depth: int = 2,
    ) -> "NetConfig":
        """Two-tap desk-scale detector (strides 4 and 8)."""
        return cls(
            stages=(
                StageSpec(1, 8, 1),
                StageSpec(1, 16, 2),
                StageSpec(2, 32, 2),
                StageSpec(2, 64, 2),
            ),
            taps=(2, 3),
            anchors=AnchorConfig.toy(image_w, image_h),
            head_channels=head_channels,
            head_depth=head_depth,
            fusion=fusion,
            split_heads=split_heads,
        )


@dataclass
class Network:
    config: NetConfig
    params: dict[str, np.ndarray] = field(repr=False)
    seed: int

    def astype(self, dtype) -> "Network":
        return Network(
            config=self.config,
            params={k: v.astype(dtype) for k, v in self.params.items()},
            seed=self.seed,
        )


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * k * k))
    return rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(np.float32)


def _head_param_specs(cfg: NetConfig, prefix: str) -> list[tuple[str, int, int, int]]:
    # (name, out_ch, in_ch, kernel) in creation order
    specs = []
    for branch, out_ch in (("cls", 2), ("reg", 4)):
        if cfg.split_heads:
            for d in range(cfg.head_depth):
                specs.append((f"{prefix}.{branch}{d}", cfg.head_channels, cfg.head_channels, 3))
        specs.append((f"{prefix}.{branch}_out", out_ch, cfg.head_channels, 3))
    return specs


def build_network(cfg: NetConfig, seed: int = 0) -> Network:
    """Deterministically initialize all parameters (He fan-in, zero biases)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def add_conv(name: str, out_ch: int, in_ch: int, k: int) -> None:
        params[f"{name}.w"] = _he_conv(rng, out_ch, in_ch, k)
        params[f"{name}.b"] = np.zeros(out_ch, dtype=np.float32)

    in_ch = cfg.in_channels
    for si, stage in enumerate(cfg.stages):
        for ci in range(stage.n_convs):
            add_conv(f"stage{si}.conv{ci}", stage.channels, in_ch, 3)
            in_ch = stage.channels
    for ti, si in enumerate(cfg.taps):
        add_conv(f"proj{ti}", cfg.head_channels, cfg.stages[si].channels, 1)
    for ti in range(len(cfg.taps)):
        for name, out_ch, tap_in, k in _head_param_specs(cfg, f"head{ti}"):
            add_conv(name, out_ch, tap_in, k)
    return Network(config=cfg, params=params, seed=seed)


def parameter_count(net: Network) -> int:
    return sum(v.size for v in net.params.values())


def detection_head(
    feature: np.ndarray,
    params: dict[str, np.ndarray],
    prefix: str = "head0",
    head_depth: int = 2,
    split_heads: bool = True,
):
    """Run both detection branches on one feature map.

    Returns ``(cls_map, reg_map, backward)`` where the maps are
    (2, H, W) and (4, H, W) and ``backward(grad_cls, grad_reg)`` yields
    ``(grad_feature, grads)`` with parameter gradients keyed like
    ``params``. ReLU follows every conv except the terminals.
    """
    caches: dict[str, list] = {}
    maps: dict[str, np.ndarray] = {}
    for branch in ("cls", "reg"):
        x = feature
        branch_caches = []
        if split_heads:
            for d in range(head_depth):
                name = f"{prefix}.{branch}{d}"
                y, cc = conv2d(x, params[f"{name}.w"], params[f"{name}.b"])
                x, mask = relu(y)
                branch_caches.append((name, cc, mask))
        name = f"{prefix}.{branch}_out"
        y, cc = conv2d(x, params[f"{name}.w"], params[f"{name}.b"])
        branch_caches.append((name, cc, None))
        caches[branch] = branch_caches
        maps[branch] = y

    def backward(grad_cls: np.ndarray, grad_reg: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        grad_feature = None
        for branch, g in (("cls", grad_cls), ("reg", grad_reg)):
            for name, cc, mask in reversed(caches[branch]):
                if mask is not None:
                    g = relu_backward(g, mask)
                g, gw, gb = conv2d_backward(g, cc)
                grads[f"{name}.w"] = gw
                grads[f"{name}.b"] = gb
            grad_feature = g if grad_feature is None else grad_feature + g
        return grad_feature, grads

    return maps["cls"], maps["reg"], backward


def flatten_maps(cls_map: np.ndarray, reg_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-major flatten of (C, H, W) head maps to (H*W, C) anchor rows."""
    logits = np.moveaxis(cls_map, 0, 2).reshape(-1, 2)
    offsets = np.moveaxis(reg_map, 0, 2).reshape(-1, 4)
    return logits, offsets


def _unflatten(grad_rows: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.moveaxis(grad_rows.reshape(h, w, -1), 2, 0)


def forward_detect(
    net: Network,
    image: np.ndarray,
    want_grad: bool = False,
    check_finite: bool = False,
) -> RawOutput | tuple[RawOutput, Callable]:
    """Full forward pass; optionally also return a backward closure.

    The closure maps (grad_logits, grad_offsets) — laid out like the
    RawOutput rows — to a dict of parameter gradients.
    """
    cfg, params = net.config, net.params
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ValueError(
            f"image must be ({cfg.in_channels}, H, W), got {image.shape}"
        )

    def check(name: str, arr: np.ndarray) -> None:
        if check_finite and not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values after {name}")

    # Backbone
    x = image
    stage_outputs: list[np.ndarray] = []
    bb_caches: list[list] = []
    for si, stage in enumerate(cfg.stages):
        stage_caches = []
        for ci in range(stage.n_convs):
            stride = stage.stride if ci == stage.n_convs - 1 else 1
            name = f"stage{si}.conv{ci}"
            y, cc = conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride)
            x, mask = relu(y)
            check(name, x)
            stage_caches.append((name, cc, mask))
        bb_caches.append(stage_caches)
        stage_outputs.append(x)

    # 1x1 projections to the head channel count
    n_taps = len(cfg.taps)
    proj: list[np.ndarray] = []
    proj_caches: list[tuple] = []
    for ti, si in enumerate(cfg.taps):
        name = f"proj{ti}"
        y, cc = conv2d(stage_outputs[si], params[f"{name}.w"], params[f"{name}.b"])
        z, mask = relu(y)
        check(name, z)
        proj.append(z)
        proj_caches.append((name, cc, mask))

    # One-hop fusion: each tap except the deepest absorbs its successor
    feats = list(proj)
    if cfg.fusion:
        for ti in range(n_taps - 2, -1, -1):
            feats[ti] = fuse(proj[ti], proj[ti + 1])

    # Detection heads
    head_backs = []
    logit_rows, offset_rows, dims = [], [], []
    for ti in range(n_taps):
        cls_map, reg_map, back = detection_head(
            feats[ti], params, f"head{ti}", cfg.head_depth, cfg.split_heads
        )
        check(f"head{ti}", cls_map)
        check(f"head{ti}", reg_map)
        lg, off = flatten_maps(cls_map, reg_map)
        logit_rows.append(lg)
        offset_rows.append(off)
        dims.append(cls_map.shape[1:])
        head_backs.append(back)

    raw = RawOutput(
        logits=np.concatenate(logit_rows, axis=0),
        offsets=np.concatenate(offset_rows, axis=0),
    )
    if not want_grad:
        return raw

    def backward(grad_logits: np.ndarray, grad_offsets: np.ndarray) -> dict[str, np.ndarray]:
        grads = {k: np.zeros_like(v) for k, v in params.items()}

        # Heads, per tap
        feat_grads = []
        start = 0
        for ti in range(n_taps):
            h, w = dims[ti]
            stop = start + h * w
            gf, head_grads = head_backs[ti](
                _unflatten(grad_logits[start:stop], h, w),
                _unflatten(grad_offsets[start:stop], h, w),
            )
            for k, v in head_grads.items():
                grads[k] += v
            feat_grads.append(gf)
            start = stop

        # Fusion: identity into the current tap, window-sum into the successor
        proj_grads = list(feat_grads)
        if cfg.fusion:
            for ti in range(n_taps - 1):
                hi = proj[ti + 1].shape
                proj_grads[ti + 1] = proj_grads[ti + 1] + upsample2_backward(
                    feat_grads[ti], hi[1], hi[2]
                )

        # Projections back into their backbone stages
        stage_grads: dict[int, np.ndarray] = {}
        for ti, si in enumerate(cfg.taps):
            name, cc, mask = proj_caches[ti]
            g = relu_backward(proj_grads[ti], mask)
            gx, gw, gb = conv2d_backward(g, cc)
            grads[f"{name}.w"] += gw
            grads[f"{name}.b"] += gb
            stage_grads[si] = stage_grads.get(si, 0) + gx

        # Backbone chain, deepest stage first
        running: np.ndarray | None = None
        for si in range(len(cfg.stages) - 1, -1, -1):
            g = stage_grads.get(si)
            if running is not None:
                g = running if g is None else g + running
            if g is None:
                g = np.zeros_like(stage_outputs[si])
            for name, cc, mask in reversed(bb_caches[si]):
                g = relu_backward(g, mask)
                g, gw, gb = conv2d_backward(g, cc)
                grads[f"{name}.w"] += gw
                grads[f"{name}.b"] += gb
            running = g
        return grads

    return raw, backward


def tap_conv_stacks(cfg: NetConfig) -> list[list[LayerSpec]]:
    """Conv stacks (for receptive-field analysis) from the input to each tap.

    Each stack includes the backbone convs up to and including the tap's
    stage plus that tap's 1x1 projection.
    """
    stacks = []
    for ti, si in enumerate(cfg.taps):
        stack: list[LayerSpec] = []
        for sj in range(si + 1):
            stage = cfg.stages[sj]
            for ci in range(stage.n_convs):
                stride = stage.stride if ci == stage.n_convs - 1 else 1
                stack.append(LayerSpec(kernel=3, stride=stride, name=f"stage{sj}.conv{ci}"))
        stack.append(LayerSpec(kernel=1, stride=1, name=f"proj{ti}"))
        stacks.append(stack)
    return stacks


_MAGIC = b"ANKT"
_VERSION = 1


def save_weights(params: dict[str, np.ndarray], out: BinaryIO) -> None:
    """Write the little-endian tensor container: magic, version, tensors."""
    out.write(_MAGIC)
    out.write(struct.pack("<II", _VERSION, len(params)))
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", data.ndim))
        out.write(struct.pack(f"<{data.ndim}I", *data.shape))
        out.write(data.tobytes())


def load_weights(src: BinaryIO) -> dict[str, np.ndarray]:
    """Read back a container written by :func:`save_weights`."""
    magic = src.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    version, count = struct.unpack("<II", src.read(8))
    if version != _VERSION:
        raise ValueError(f"unsupported container version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", src.read(4))
        name = src.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", src.read(4))
        dims = struct.unpack(f"<{rank}I", src.read(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(src.read(4 * n), dtype="<f4").reshape(dims)
        params[name] = data.astype(np.float32)
    return params
