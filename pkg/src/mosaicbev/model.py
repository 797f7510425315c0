"""Backbone, per-scale detection head, grid-compensated decoding, checkpoints.

The backbone is a plain strided conv stack (stem + one stage per scale, ReLU
after every conv, no normalization) producing feature maps at strides 8, 16,
and 32. Each scale's head applies conv3x3-ReLU, conv3x3-ReLU, conv1x1 to 4
channels (x, y, theta, confidence) with no activation on the final conv;
decoding applies tanh to the coordinate channels, pi*tanh to theta, and
sigmoid to confidence, then shifts each cell's offset onto its grid center.

Decoded coordinates live in the y-down raster frame of the mosaic.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import CheckpointError, ConfigError
from .geometry import Detection, OrientedBox, normalize_angle

CHECKPOINT_MAGIC = b"YBEV1"

DEFAULT_CANONICAL_SIZE = (0.10, 0.045)


@dataclass(frozen=True)
class HeadConfig:
    """Per-scale detection head: three convs (3x3, 3x3, 1x1) to 4 channels."""

    n_l: int = 3
    ch: tuple[int, ...] = (24, 32, 40)
    mid_channels: int = 64
    out_channels: int = 4  # x, y, theta, confidence

    def __post_init__(self):
        if self.n_l != len(self.ch):
            raise ConfigError(f"n_l {self.n_l} != len(ch) {len(self.ch)}")
        if self.out_channels != 4:
            raise ConfigError("out_channels is fixed to 4")
        if self.mid_channels < 1 or any(c < 1 for c in self.ch):
            raise ConfigError("channel counts must be positive")

    def to_dict(self) -> dict:
        return {"n_l": self.n_l, "ch": list(self.ch),
                "mid_channels": self.mid_channels, "out_channels": self.out_channels}

    @staticmethod
    def from_dict(d: dict) -> "HeadConfig":
        if not isinstance(d, dict):
            raise ConfigError("head config must be a JSON object")
        unknown = set(d) - {"n_l", "ch", "mid_channels", "out_channels"}
        if unknown:
            raise ConfigError(f"unknown head config fields: {sorted(unknown)}")
        base = HeadConfig()
        try:
            ch = tuple(int(c) for c in d["ch"]) if "ch" in d else base.ch
            return HeadConfig(
                n_l=int(d["n_l"]) if "n_l" in d else len(ch),
                ch=ch,
                mid_channels=int(d.get("mid_channels", base.mid_channels)),
                out_channels=int(d.get("out_channels", base.out_channels)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad head config: {e}") from e


@dataclass(frozen=True)
class BackboneConfig:
    """Stem conv plus one (channels, kernel, stride) list per pyramid stage."""

    stem_channels: int = 12
    stem_kernel: int = 3
    stages: tuple[tuple[tuple[int, int, int], ...], ...] = (
        ((16, 3, 2), (24, 3, 2), (24, 5, 1), (24, 5, 1)),
        ((32, 3, 2), (32, 3, 1)),
        ((40, 3, 2), (40, 3, 1)),
    )

    def __post_init__(self):
        if self.stem_channels < 1:
            raise ConfigError("stem_channels must be positive")
        if self.stem_kernel % 2 != 1:
            raise ConfigError("stem_kernel must be odd")
        stride = 2  # stem stride
        for si, stage in enumerate(self.stages):
            if not stage:
                raise ConfigError(f"stage {si} is empty")
            for c, k, s in stage:
                if c < 1 or k % 2 != 1 or s not in (1, 2):
                    raise ConfigError(
                        f"stage {si} layer ({c},{k},{s}) invalid: need c>=1, odd k, s in {{1,2}}"
                    )
                stride *= s
            if stride != 8 * 2 ** si:
                raise ConfigError(
                    f"stage {si} ends at stride {stride}, expected {8 * 2 ** si}"
                )

    @property
    def out_channels(self) -> tuple[int, ...]:
        return tuple(stage[-1][0] for stage in self.stages)

    def to_dict(self) -> dict:
        return {"stem_channels": self.stem_channels, "stem_kernel": self.stem_kernel,
                "stages": [[list(layer) for layer in stage] for stage in self.stages]}

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        if not isinstance(d, dict):
            raise ConfigError("backbone config must be a JSON object")
        unknown = set(d) - {"stem_channels", "stem_kernel", "stages"}
        if unknown:
            raise ConfigError(f"unknown backbone config fields: {sorted(unknown)}")
        base = BackboneConfig()
        try:
            stages = (tuple(tuple(tuple(int(v) for v in layer) for layer in stage)
                            for stage in d["stages"])
                      if "stages" in d else base.stages)
            return BackboneConfig(
                stem_channels=int(d.get("stem_channels", base.stem_channels)),
                stem_kernel=int(d.get("stem_kernel", base.stem_kernel)),
                stages=stages,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad backbone config: {e}") from e


@dataclass(frozen=True)
class Grid:
    """Cell centers of one detection scale; centers[m][n] = ((m+.5)/W, (n+.5)/H)."""

    width: int
    height: int
    centers: np.ndarray  # (width, height, 2)

    def center(self, m: int, n: int) -> tuple[float, float]:
        return float(self.centers[m, n, 0]), float(self.centers[m, n, 1])


def make_grid(width: int, height: int) -> Grid:
    if width < 1 or height < 1:
        raise ConfigError(f"grid dims must be >= 1, got {width}x{height}")
    centers = np.empty((width, height, 2))
    for m in range(width):
        for n in range(height):
            centers[m, n, 0] = (m + 0.5) / width
            centers[m, n, 1] = (n + 0.5) / height
    return Grid(width=width, height=height, centers=centers)


@dataclass
class DecodedScale:
    """Decoded maps of one scale, kept on the autodiff graph.

    x, y, theta, conf have shape (B, H, W), indexed [batch, row n, col m].
    """

    x: nc.Tensor
    y: nc.Tensor
    theta: nc.Tensor
    conf: nc.Tensor
    grid: Grid
    canonical_size: tuple[float, float]
    scale_index: int


def decode(raw: nc.Tensor, grid: Grid, canonical_size: tuple[float, float],
           scale_index: int = 0) -> DecodedScale:
    """Grid compensation: cell-relative raw outputs to global BEV coordinates.

    Per cell (m, n): x = tanh(raw[0]) / (2*width) + (m+0.5)/width, same for y
    with height; theta = pi * tanh(raw[2]); confidence = sigmoid(raw[3]).
    Stays on the autodiff graph.
    """
    if raw.ndim != 4 or raw.shape[1] != 4:
        raise nc.ContractError(f"decode expects (B, 4, H, W), got {raw.shape}")
    B, _, H, W = raw.shape
    if (W, H) != (grid.width, grid.height):
        raise nc.ContractError(
            f"raw spatial {W}x{H} does not match grid {grid.width}x{grid.height}"
        )
    cx_map = np.broadcast_to(
        ((np.arange(W) + 0.5) / W)[None, None, :], (B, H, W)).copy()
    cy_map = np.broadcast_to(
        ((np.arange(H) + 0.5) / H)[None, :, None], (B, H, W)).copy()
    x = nc.add(nc.scale(nc.tanh(nc.slice_channel(raw, 0)), 1.0 / (2 * W)),
               nc.Tensor(cx_map))
    y = nc.add(nc.scale(nc.tanh(nc.slice_channel(raw, 1)), 1.0 / (2 * H)),
               nc.Tensor(cy_map))
    theta = nc.scale(nc.tanh(nc.slice_channel(raw, 2)), math.pi)
    conf = nc.sigmoid(nc.slice_channel(raw, 3))
    return DecodedScale(x=x, y=y, theta=theta, conf=conf, grid=grid,
                        canonical_size=canonical_size, scale_index=scale_index)


def predictions(scales: list[DecodedScale], batch_index: int) -> list[Detection]:
    """Materialize one frame's decoded cells as Detection values.

    Order: scale index ascending, then row n, then column m.
    """
    out: list[Detection] = []
    for sc in scales:
        x, y = sc.x.data[batch_index], sc.y.data[batch_index]
        th, cf = sc.theta.data[batch_index], sc.conf.data[batch_index]
        w, h = sc.canonical_size
        for n in range(sc.grid.height):
            for m in range(sc.grid.width):
                # tanh saturation can land exactly on -pi; fold it to +pi so
                # the angle satisfies the box invariant theta in (-pi, pi].
                out.append(Detection(
                    box=OrientedBox(float(x[n, m]), float(y[n, m]), w, h,
                                    normalize_angle(float(th[n, m]))),
                    confidence=float(cf[n, m]),
                    scale_index=sc.scale_index,
                    cell=(m, n),
                ))
    return out


class Model:
    """Backbone plus head with named float64 parameters."""

    def __init__(self, backbone: BackboneConfig = BackboneConfig(),
                 head: HeadConfig = HeadConfig(),
                 canonical_size: tuple[float, float] = DEFAULT_CANONICAL_SIZE,
                 seed: int = 0):
        if backbone.out_channels != head.ch:
            raise ConfigError(
                f"backbone channels {backbone.out_channels} != head.ch {head.ch}"
            )
        if len(backbone.stages) != head.n_l:
            raise ConfigError("one backbone stage per head scale required")
        self.backbone_cfg = backbone
        self.head_cfg = head
        self.canonical_size = (float(canonical_size[0]), float(canonical_size[1]))
        self.seed = seed
        self.params: dict[str, nc.Tensor] = {}
        self._build(np.random.default_rng([seed, 1]))

    def _add_conv(self, rng, name: str, c_in: int, c_out: int, k: int,
                  conf_bias: bool = False):
        bound = 1.0 / math.sqrt(c_in * k * k)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        b = np.zeros(c_out)
        if conf_bias:
            b[3] = -2.0  # start confidences near 0.12 so negatives do not dominate
        self.params[f"{name}.w"] = nc.Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = nc.Tensor(b, requires_grad=True)

    def _build(self, rng):
        bb, hd = self.backbone_cfg, self.head_cfg
        self._add_conv(rng, "stem", 3, bb.stem_channels, bb.stem_kernel)
        c_in = bb.stem_channels
        for si, stage in enumerate(bb.stages):
            for li, (c, k, _s) in enumerate(stage):
                self._add_conv(rng, f"stage{si}.conv{li}", c_in, c, k)
                c_in = c
        for si, c in enumerate(hd.ch):
            self._add_conv(rng, f"head{si}.conv0", c, hd.mid_channels, 3)
            self._add_conv(rng, f"head{si}.conv1", hd.mid_channels, hd.mid_channels, 3)
            self._add_conv(rng, f"head{si}.conv2", hd.mid_channels, hd.out_channels, 1,
                           conf_bias=True)

    def _conv(self, x: nc.Tensor, name: str, stride: int, k: int) -> nc.Tensor:
        return nc.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                         stride=stride, padding=k // 2)

    def backbone_forward(self, x: nc.Tensor) -> list[nc.Tensor]:
        """Multi-scale features at strides 8, 16, 32."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigError(f"mosaic batch must be (B, 3, H, W), got {x.shape}")
        H, W = x.shape[2], x.shape[3]
        if H % 32 or W % 32:
            raise ConfigError(f"input {H}x{W} not divisible by 32")
        bb = self.backbone_cfg
        h = nc.relu(self._conv(x, "stem", 2, bb.stem_kernel))
        feats = []
        for si, stage in enumerate(bb.stages):
            for li, (_c, k, s) in enumerate(stage):
                h = nc.relu(self._conv(h, f"stage{si}.conv{li}", s, k))
            feats.append(h)
        return feats

    def custom_detect_forward(self, features: list[nc.Tensor]) -> list[nc.Tensor]:
        """Per scale: conv3x3-ReLU, conv3x3-ReLU, conv1x1 to 4 raw channels."""
        hd = self.head_cfg
        if len(features) != hd.n_l:
            raise ConfigError(f"expected {hd.n_l} feature maps, got {len(features)}")
        raws = []
        for si, f in enumerate(features):
            if f.shape[1] != hd.ch[si]:
                raise ConfigError(
                    f"scale {si} has {f.shape[1]} channels, expected {hd.ch[si]}"
                )
            h = nc.relu(self._conv(f, f"head{si}.conv0", 1, 3))
            h = nc.relu(self._conv(h, f"head{si}.conv1", 1, 3))
            raws.append(self._conv(h, f"head{si}.conv2", 1, 1))
        return raws

    def decode_all(self, raws: list[nc.Tensor]) -> list[DecodedScale]:
        out = []
        for si, raw in enumerate(raws):
            grid = make_grid(raw.shape[3], raw.shape[2])
            out.append(decode(raw, grid, self.canonical_size, scale_index=si))
        return out

    def forward_decode(self, x: nc.Tensor) -> list[DecodedScale]:
        return self.decode_all(self.custom_detect_forward(self.backbone_forward(x)))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def config_dict(self) -> dict:
        return {"backbone": self.backbone_cfg.to_dict(),
                "head": self.head_cfg.to_dict(),
                "canonical_size": list(self.canonical_size),
                "seed": self.seed}


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, model: Model, optimizer_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write model (and optionally optimizer) state atomically.

    Layout: magic, u64 header length, JSON header (config, parameter names,
    optimizer scalars, extra), then one tensor blob per parameter, then the
    optimizer's m and v blobs in the same parameter order.
    """
    names = list(model.params)
    header = {
        "config": model.config_dict(),
        "params": names,
        "extra": extra or {},
        "optimizer": None,
    }
    if optimizer_state is not None:
        header["optimizer"] = {
            k: optimizer_state[k] for k in ("t", "lr", "beta1", "beta2", "epsilon")
        }
    payload = json.dumps(header).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for name in names:
            nc.write_tensor(fh, model.params[name].data)
        if optimizer_state is not None:
            for name in names:
                nc.write_tensor(fh, optimizer_state["m"][name])
            for name in names:
                nc.write_tensor(fh, optimizer_state["v"][name])
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Model, dict | None, dict]:
    """Read a checkpoint; returns (model, optimizer_state or None, extra)."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
            raw_len = fh.read(8)
            if len(raw_len) != 8:
                raise CheckpointError(f"{path}: truncated header length")
            (hlen,) = struct.unpack("<Q", raw_len)
            payload = fh.read(hlen)
            if len(payload) != hlen:
                raise CheckpointError(f"{path}: truncated header")
            try:
                header = json.loads(payload.decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise CheckpointError(f"{path}: unreadable header: {e}") from e
            try:
                cfg = header["config"]
                model = Model(
                    backbone=BackboneConfig.from_dict(cfg["backbone"]),
                    head=HeadConfig.from_dict(cfg["head"]),
                    canonical_size=tuple(cfg["canonical_size"]),
                    seed=int(cfg.get("seed", 0)),
                )
                names = list(header["params"])
            except (KeyError, TypeError, ConfigError) as e:
                raise CheckpointError(f"{path}: invalid config block: {e}") from e
            if names != list(model.params):
                raise CheckpointError(f"{path}: parameter names do not match config")
            for name in names:
                arr = nc.read_tensor(fh)
                if arr.shape != model.params[name].shape:
                    raise CheckpointError(
                        f"{path}: {name} has shape {arr.shape}, "
                        f"expected {model.params[name].shape}"
                    )
                model.params[name] = nc.Tensor(arr, requires_grad=True)
            opt = header.get("optimizer")
            opt_state = None
            if opt is not None:
                m, v = {}, {}
                for name in names:
                    m[name] = nc.read_tensor(fh)
                for name in names:
                    v[name] = nc.read_tensor(fh)
                for name in names:
                    if (m[name].shape != model.params[name].shape
                            or v[name].shape != model.params[name].shape):
                        raise CheckpointError(f"{path}: optimizer shape mismatch on {name}")
                opt_state = {"t": int(opt["t"]), "lr": float(opt["lr"]),
                             "beta1": float(opt["beta1"]), "beta2": float(opt["beta2"]),
                             "epsilon": float(opt["epsilon"]), "m": m, "v": v}
            return model, opt_state, dict(header.get("extra", {}))
    except nc.SerializationError as e:
        raise CheckpointError(f"{path}: {e}") from e
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e
