"""Full spiking encoder-decoder depth network.

Layout (binocular): one encoder branch per camera (bias-free 3x3 convs,
stride-2 downsampling that doubles channels, IF nonlinearity after every
conv), branch outputs summed into `out_combined`, a bottleneck of two
SEW residual blocks (`out_rconv`), and a decoder of nearest-neighbor
upsample + conv + IF stages whose outputs are summed with same-level
encoder spike tensors (`out_addX`). Prediction synapses at every decoder
scale upsample straight to full resolution and project to a pool of
non-leaky integrator neurons whose potentials carry the depth prediction.

There is no bias and no normalization anywhere, so an all-zero input
propagates exact zeros through the whole network.

The readout potential encodes log depth: depth = d_max * exp(p - 1),
clamped to [d_min, d_max] (a linear code is available for ablation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateConfig, Tensor, conv2d, nn_upsample
from .events import InputChunk
from .snn import IFLayer, ReadoutPool, SpikeTensor, if_forward, skip_add

CKPT_MAGIC = b"SSPK"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint file is malformed or has the wrong version."""


class CheckpointConfigError(ValueError):
    """Checkpoint config conflicts with the expected model configuration."""


@dataclass
class ModelConfig:
    mode: str = "binocular"          # "monocular" | "binocular"
    in_channels: int = 10            # 2 * n_frames
    base_channels: int = 8           # C0; 32 at full scale, 8 at desk scale
    n_scales: int = 4                # encoder downsamplings
    kernel_size: int = 3
    input_height: int = 64
    input_width: int = 64
    d_min: float = 0.5               # meters
    d_max: float = 10.0
    depth_code: str = "log"          # "log" | "linear"
    surrogate_alpha: float = 2.0
    skip_mode: str = "sum"           # binocular skips: "sum" | "left"

    def __post_init__(self):
        if self.mode not in ("monocular", "binocular"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.depth_code not in ("log", "linear"):
            raise ValueError(f"unknown depth_code {self.depth_code!r}")
        if self.skip_mode not in ("sum", "left"):
            raise ValueError(f"unknown skip_mode {self.skip_mode!r}")
        div = 2 ** self.n_scales
        if self.input_height % div or self.input_width % div:
            raise ValueError(
                f"input geometry {self.input_height}x{self.input_width} must be "
                f"divisible by 2^n_scales = {div}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def channels(self) -> list[int]:
        """Channel plan: C0 * 2^k for scale k = 0 .. n_scales."""
        return [self.base_channels * (1 << k) for k in range(self.n_scales + 1)]

    @property
    def branches(self) -> list[str]:
        return ["L", "R"] if self.mode == "binocular" else ["L"]


@dataclass
class DepthMap:
    """Per-pixel metric depth in meters plus a validity mask."""
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise ValueError("depth and valid masks must share a shape")


@dataclass
class ForwardTrace:
    """Named spike-tensor snapshots from one forward pass.

    `spikes`/`densities` cover exactly the firing-rate table layer set for
    the configured mode; `internal_densities` adds the IF layers hidden
    inside the residual blocks (diagnostics only). Intermediate
    predictions are the cumulative readout potentials, coarse to fine.
    """
    spikes: dict[str, SpikeTensor] = field(default_factory=dict)
    densities: dict[str, float] = field(default_factory=dict)
    internal_densities: dict[str, float] = field(default_factory=dict)
    intermediate_predictions: list[tuple[int, Tensor]] = field(default_factory=list)


def table_layers(mode: str, n_scales: int = 4) -> list[str]:
    """Layer names in firing-rate report order."""
    names = []
    branches = ["L", "R"] if mode == "binocular" else ["L"]
    for b in branches:
        names.append(f"out_bottom{b}")
        names += [f"out_conv{k}{b}" for k in range(1, n_scales + 1)]
    names += ["out_combined", "out_rconv"]
    for k in range(n_scales, 0, -1):
        names += [f"out_deconv{k}", f"out_add{k}"]
    return names


def decode_depth(potential: np.ndarray, cfg: ModelConfig) -> DepthMap:
    """Map readout potentials to metric depth (fully valid mask)."""
    p = np.asarray(potential, dtype=np.float64)
    if cfg.depth_code == "log":
        depth = cfg.d_max * np.exp(p - 1.0)
    else:
        depth = p
    depth = np.clip(depth, cfg.d_min, cfg.d_max)
    return DepthMap(depth=depth, valid=np.ones_like(depth, dtype=bool))


def encode_depth(depth: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Inverse of decode_depth: metric depth to readout-potential space."""
    d = np.clip(np.asarray(depth, dtype=np.float64), cfg.d_min, cfg.d_max)
    if cfg.depth_code == "log":
        return (1.0 + np.log(d / cfg.d_max)).astype(ad.default_dtype())
    return d.astype(ad.default_dtype())


class SpikingDepthNet:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.surrogate = SurrogateConfig(alpha=cfg.surrogate_alpha)
        self.if_layer = IFLayer(v_thresh=1.0, v_reset=0.0, surrogate=self.surrogate)
        self.pool = ReadoutPool(cfg.input_height, cfg.input_width)
        self._build(rng or np.random.default_rng(0))

    # -- construction -------------------------------------------------------

    def _add_param(self, name: str, c_out: int, c_in: int, rng, gain: float = 1.0):
        k = self.cfg.kernel_size
        fan_in = c_in * k * k
        std = gain * np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(c_out, c_in, k, k))
        self.params[name] = ad.parameter(w, name=name)

    def _build(self, rng):
        cfg = self.cfg
        ch = cfg.channels
        for b in cfg.branches:
            self._add_param(f"bottom{b}.weight", ch[0], cfg.in_channels, rng)
            for k in range(1, cfg.n_scales + 1):
                self._add_param(f"conv{k}{b}.weight", ch[k], ch[k - 1], rng)
        top = ch[cfg.n_scales]
        for blk in (1, 2):
            self._add_param(f"sew{blk}.conv_a.weight", top, top, rng)
            self._add_param(f"sew{blk}.conv_b.weight", top, top, rng)
        for k in range(cfg.n_scales, 0, -1):
            self._add_param(f"deconv{k}.weight", ch[k - 1], ch[k], rng)
            # prediction synapses start small: they set the initial output scale
            self._add_param(f"predict{k}.weight", 1, ch[k - 1], rng, gain=0.1)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def reset_all(self) -> None:
        """Zero every membrane potential. The net is stateless, so only the
        readout pool holds a potential; idempotent by construction."""
        self.pool.reset()

    # -- forward ------------------------------------------------------------

    def _check_chunk(self, chunk: InputChunk, side: str):
        cfg = self.cfg
        expect = (cfg.in_channels, cfg.input_height, cfg.input_width)
        if chunk.data.shape != expect:
            raise ad.ShapeMismatchError(
                f"{side} input chunk shape {chunk.data.shape} != configured "
                f"{expect}")

    def _encoder_branch(self, chunk: InputChunk, branch: str, trace: ForwardTrace):
        cfg = self.cfg
        p = (cfg.kernel_size - 1) // 2
        x = ad.constant(chunk.data.astype(ad.default_dtype()))
        outs = []
        pre = conv2d(x, self.params[f"bottom{branch}.weight"], stride=1,
                     padding=p, layer=f"bottom{branch}")
        s = if_forward(pre, self.if_layer)
        trace.spikes[f"out_bottom{branch}"] = s
        outs.append(s)
        for k in range(1, cfg.n_scales + 1):
            pre = conv2d(outs[-1].data, self.params[f"conv{k}{branch}.weight"],
                         stride=2, padding=p, layer=f"conv{k}{branch}")
            s = if_forward(pre, self.if_layer)
            trace.spikes[f"out_conv{k}{branch}"] = s
            outs.append(s)
        return outs  # [out_bottom, out_conv1, ..., out_conv{n_scales}]

    def forward(self, left: InputChunk, right: InputChunk | None = None
                ) -> tuple[DepthMap, ForwardTrace]:
        cfg = self.cfg
        if (right is not None) != (cfg.mode == "binocular"):
            raise ValueError(f"mode {cfg.mode!r} requires "
                             f"{'a' if cfg.mode == 'binocular' else 'no'} right chunk")
        self._check_chunk(left, "left")
        if right is not None:
            self._check_chunk(right, "right")

        self.reset_all()
        trace = ForwardTrace()
        p = (cfg.kernel_size - 1) // 2

        enc = {"L": self._encoder_branch(left, "L", trace)}
        if right is not None:
            enc["R"] = self._encoder_branch(right, "R", trace)

        if cfg.mode == "binocular":
            combined = skip_add(enc["L"][-1], enc["R"][-1])
        else:
            combined = enc["L"][-1]
        trace.spikes["out_combined"] = combined

        # SEW residual blocks, inlined so the inner IF rates can be traced
        x = combined
        for blk in (1, 2):
            inner_a = conv2d(x.data, self.params[f"sew{blk}.conv_a.weight"],
                             stride=1, padding=p, layer=f"sew{blk}.conv_a")
            sa = if_forward(inner_a, self.if_layer)
            inner_b = conv2d(sa.data, self.params[f"sew{blk}.conv_b.weight"],
                             stride=1, padding=p, layer=f"sew{blk}.conv_b")
            sb = if_forward(inner_b, self.if_layer)
            x = SpikeTensor(data=ad.add(sb.data, x.data),
                            max_count=x.max_count + 1)
            trace.internal_densities[f"sew{blk}.if_a"] = sa.density()
            trace.internal_densities[f"sew{blk}.if_b"] = sb.density()
        rconv = x
        trace.spikes["out_rconv"] = rconv

        # skip sources at each decoder level; binocular branches summed
        # (or left-only, per cfg.skip_mode)
        def skip_source(level: int) -> SpikeTensor:
            sL = enc["L"][level - 1]
            if cfg.mode == "binocular" and cfg.skip_mode == "sum":
                return skip_add(sL, enc["R"][level - 1])
            return sL

        current = rconv
        for k in range(cfg.n_scales, 0, -1):
            up = nn_upsample(current.data, 2)
            pre = conv2d(up, self.params[f"deconv{k}.weight"], stride=1,
                         padding=p, layer=f"deconv{k}")
            d = if_forward(pre, self.if_layer)
            trace.spikes[f"out_deconv{k}"] = d
            added = skip_add(d, skip_source(k))
            assert added.max_count <= 3, "decoder skip sum bound exceeded"
            trace.spikes[f"out_add{k}"] = added

            factor = 1 << (k - 1)
            full = nn_upsample(added.data, factor) if factor > 1 else added.data
            contribution = conv2d(full, self.params[f"predict{k}.weight"],
                                  stride=1, padding=p, layer=f"predict{k}")
            cumulative = self.pool.accumulate(contribution)
            trace.intermediate_predictions.append((k, cumulative))
            current = added

        for name in table_layers(cfg.mode, cfg.n_scales):
            trace.densities[name] = trace.spikes[name].density()

        final = self.pool.potential.values[0]
        return decode_depth(final, cfg), trace


# ---------------------------------------------------------------------------
# initialization calibration

def calibrate_firing_rates(net: SpikingDepthNet, probes: list[tuple],
                           low: float = 0.05, high: float = 0.30,
                           max_iter: int = 60) -> dict[str, float]:
    """Rescale conv weights so every IF layer initially fires within
    [low, high] on the probe inputs. Spiking nets are sensitive to weight
    scale: too low and the net is silent (no gradient), too high and it
    saturates. Returns the final per-layer densities."""
    cfg = net.cfg
    calib = {}
    for b in cfg.branches:
        calib[f"out_bottom{b}"] = f"bottom{b}.weight"
        for k in range(1, cfg.n_scales + 1):
            calib[f"out_conv{k}{b}"] = f"conv{k}{b}.weight"
    for blk in (1, 2):
        calib[f"sew{blk}.if_a"] = f"sew{blk}.conv_a.weight"
        calib[f"sew{blk}.if_b"] = f"sew{blk}.conv_b.weight"
    for k in range(cfg.n_scales, 0, -1):
        calib[f"out_deconv{k}"] = f"deconv{k}.weight"

    dens = {}
    for _ in range(max_iter):
        acc: dict[str, float] = {name: 0.0 for name in calib}
        for chunks in probes:
            _, trace = net.forward(*chunks)
            for name in calib:
                d = trace.densities.get(name)
                if d is None:
                    d = trace.internal_densities[name]
                acc[name] += d
        dens = {name: v / len(probes) for name, v in acc.items()}
        changed = False
        for name, wname in calib.items():
            d = dens[name]
            if d < low:
                net.params[wname].values *= 2.0 if d == 0.0 else 1.3
                changed = True
            elif d > high:
                net.params[wname].values /= 1.3
                changed = True
        if not changed:
            break
    return dens


# ---------------------------------------------------------------------------
# checkpoint serialization (.ssk)

def _write_str(f, s: str):
    b = s.encode("utf-8")
    f.write(struct.pack("<H", len(b)))
    f.write(b)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated file")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")


_CONFIG_FIELDS = ("mode", "in_channels", "base_channels", "n_scales",
                  "kernel_size", "input_height", "input_width", "d_min",
                  "d_max", "depth_code", "surrogate_alpha", "skip_mode")


def save_checkpoint(net: SpikingDepthNet, path) -> None:
    cfg = net.cfg
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(struct.pack("<I", len(_CONFIG_FIELDS)))
        for key in _CONFIG_FIELDS:
            _write_str(f, key)
            _write_str(f, repr(getattr(cfg, key)))
        f.write(struct.pack("<I", len(net.params)))
        for name, t in net.params.items():
            _write_str(f, name)
            v = np.asarray(t.values, dtype="<f4")
            f.write(struct.pack("<B", v.ndim))
            for d in v.shape:
                f.write(struct.pack("<I", d))
            f.write(v.tobytes())


def load_checkpoint(path) -> SpikingDepthNet:
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint file")
    version = r.u16()
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    kv = {}
    for _ in range(r.u32()):
        key = r.string()
        kv[key] = r.string()
    missing = [k for k in _CONFIG_FIELDS if k not in kv]
    if missing:
        raise CheckpointConfigError(f"{path}: missing config field(s) {missing}")
    try:
        cfg = ModelConfig(
            mode=kv["mode"].strip("'\""),
            in_channels=int(kv["in_channels"]),
            base_channels=int(kv["base_channels"]),
            n_scales=int(kv["n_scales"]),
            kernel_size=int(kv["kernel_size"]),
            input_height=int(kv["input_height"]),
            input_width=int(kv["input_width"]),
            d_min=float(kv["d_min"]),
            d_max=float(kv["d_max"]),
            depth_code=kv["depth_code"].strip("'\""),
            surrogate_alpha=float(kv["surrogate_alpha"]),
            skip_mode=kv["skip_mode"].strip("'\""),
        )
    except ValueError as e:
        raise CheckpointConfigError(f"{path}: invalid config: {e}") from e
    net = SpikingDepthNet(cfg)
    n_params = r.u32()
    seen = set()
    for _ in range(n_params):
        name = r.string()
        ndim = struct.unpack("<B", r.take(1))[0]
        shape = tuple(r.u32() for _ in range(ndim))
        data = np.frombuffer(r.take(4 * int(np.prod(shape))), dtype="<f4")
        if name not in net.params:
            raise CheckpointConfigError(f"{path}: unexpected parameter {name!r}")
        if net.params[name].values.shape != shape:
            raise CheckpointConfigError(
                f"{path}: parameter {name!r} has shape {shape}, model expects "
                f"{net.params[name].values.shape} (check in_channels / "
                f"base_channels)")
        net.params[name].values = data.reshape(shape).astype(ad.default_dtype())
        seen.add(name)
    if seen != set(net.params):
        raise CheckpointConfigError(
            f"{path}: missing parameter(s) {sorted(set(net.params) - seen)}")
    return net
