"""Network assembly, scaling-factor collection, channel surgery and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .errors import FormatError, PruneError, SpecError
from .tensor import Tensor


class Model:
    """Ordered layer stack; layers ``[0, split_index)`` form the aligner."""

    def __init__(self, layers: list[L.Layer], input_shape: tuple[int, int, int],
                 split_index: int, class_count: int,
                 input_mean: np.ndarray | None = None, input_std: np.ndarray | None = None):
        if not 0 < split_index < len(layers):
            raise SpecError(f"split_index must lie in (0, {len(layers)}), got {split_index}")
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.split_index = split_index
        self.class_count = class_count
        self.input_mean = input_mean
        self.input_std = input_std

    # -- forward ---------------------------------------------------------
    def forward(self, x: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
        for layer in self.layers[start:stop]:
            x = layer.forward(x)
        return x

    __call__ = forward

    def f1(self, x: Tensor) -> Tensor:
        return self.forward(x, 0, self.split_index)

    def f2(self, h: Tensor) -> Tensor:
        return self.forward(h, self.split_index, None)

    def prepare(self, images: np.ndarray) -> Tensor:
        """Apply the model's input normalization to raw [0, 1] images."""
        x = np.asarray(images, dtype=np.float64)
        if self.input_mean is not None:
            x = (x - self.input_mean[None, :, None, None]) / self.input_std[None, :, None, None]
        return Tensor(x)

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Logits in eval mode; the previous mode is restored afterwards."""
        modes = self.modes()
        self.eval()
        try:
            out = [self.forward(self.prepare(images[i:i + batch_size])).data
                   for i in range(0, len(images), batch_size)]
        finally:
            self.set_modes(modes)
        return np.concatenate(out) if out else np.zeros((0, self.class_count))

    # -- modes -----------------------------------------------------------
    def norm_layers(self) -> list[tuple[int, L.ScaledNorm]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, L.ScaledNorm)]

    def modes(self) -> list[str]:
        return [l.mode for _, l in self.norm_layers()]

    def set_modes(self, modes: Sequence[str]) -> None:
        for (_, l), m in zip(self.norm_layers(), modes):
            l.mode = m

    def train(self) -> "Model":
        for _, l in self.norm_layers():
            l.mode = "train"
        return self

    def eval(self) -> "Model":
        for _, l in self.norm_layers():
            l.mode = "eval"
        return self

    # -- introspection ---------------------------------------------------
    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{i}.{name}", t) for i, layer in enumerate(self.layers)
                for name, t in layer.params().items()]

    def shapes(self) -> list[tuple[int, ...]]:
        """Input shape of every layer followed by the output shape."""
        s = [self.input_shape]
        for layer in self.layers:
            s.append(layer.out_shape(s[-1]))
        return s

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.parameters())

    def flops(self) -> int:
        """Multiply-accumulate count of conv and dense layers for one input."""
        total = 0
        for layer, (ins, outs) in zip(self.layers, zip(self.shapes(), self.shapes()[1:])):
            if isinstance(layer, L.Conv2d):
                total += outs[0] * outs[1] * outs[2] * ins[0] * layer.kernel ** 2
            elif isinstance(layer, L.Dense):
                total += layer.in_features * layer.units
        return total

    def widths(self) -> list[int]:
        return [l.channels for _, l in self.norm_layers()]


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build(specs: Sequence[L.LayerSpec], seed: int, input_shape=(3, 32, 32),
          split_index: int | None = None, gamma_init: float = 0.5) -> Model:
    """Instantiate a layer stack with deterministic He-uniform weights."""
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers: list[L.Layer] = []
    pools = []
    for i, s in enumerate(specs):
        if s.kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: conv needs a CHW input, got {shape}")
            c = shape[0]
            if s.in_channels is not None and s.in_channels != c:
                raise SpecError(f"layer {i}: conv expects {s.in_channels} channels, gets {c}")
            if not s.channels or s.channels < 1:
                raise SpecError(f"layer {i}: conv needs a positive channel count")
            fan_in = c * s.kernel * s.kernel
            layer = L.Conv2d(_he_uniform(rng, (s.channels, c, s.kernel, s.kernel), fan_in),
                             np.zeros(s.channels), s.stride, s.padding)
        elif s.kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"layer {i}: dense needs a flat input, got {shape}")
            if s.in_features is not None and s.in_features != shape[0]:
                raise SpecError(f"layer {i}: dense expects width {s.in_features}, gets {shape[0]}")
            if not s.units or s.units < 1:
                raise SpecError(f"layer {i}: dense needs a positive unit count")
            layer = L.Dense(_he_uniform(rng, (shape[0], s.units), shape[0]), np.zeros(s.units))
        elif s.kind == "scalednorm":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: scalednorm follows a conv layer")
            if s.channels is not None and s.channels != shape[0]:
                raise SpecError(f"layer {i}: scalednorm has {s.channels} channels, gets {shape[0]}")
            layer = L.ScaledNorm(shape[0], gamma_init)
        elif s.kind == "relu":
            layer = L.ReLU()
        elif s.kind in ("maxpool", "avgpool"):
            if len(shape) != 3 or s.window > min(shape[1:]):
                raise SpecError(f"layer {i}: pool window {s.window} does not fit {shape}")
            layer = L.Pool(s.kind, s.window, s.stride)
            pools.append(i)
        else:
            if len(shape) != 3:
                raise SpecError(f"layer {i}: flatten expects a CHW input")
            layer = L.Flatten()
        shape = layer.out_shape(shape)
        if len(shape) == 3 and min(shape[1:]) < 1:
            raise SpecError(f"layer {i}: empty feature map")
        layers.append(layer)
    if len(shape) != 1:
        raise SpecError("network must end in a flat class-score vector")
    if split_index is None:
        split_index = pools[1] + 1 if len(pools) >= 2 else len(layers) // 2
    return Model(layers, input_shape, split_index, shape[0])


def toy_cnn(widths: Sequence[int] = (8, 16, 32, 32), class_count: int = 8,
            in_channels: int = 3, size: int = 32) -> list[L.LayerSpec]:
    """Small VGG-style stack: conv-norm-relu blocks, 2x2 max pools, global
    average pool, one dense classifier."""
    specs: list[L.LayerSpec] = []
    spatial = size
    for i, w in enumerate(widths):
        specs += [L.conv(w), L.scalednorm(), L.relu()]
        if i < len(widths) - 1 and spatial >= 4:
            specs.append(L.maxpool(2))
            spatial //= 2
    specs += [L.avgpool(spatial), L.flatten(), L.dense(class_count)]
    return specs


# ----------------------------------------------------------------------------
# scaling factors and global threshold

@dataclass(frozen=True)
class GammaIndex:
    entries: list[tuple[int, int, float]]  # (layer id, channel id, gamma)

    def __len__(self):
        return len(self.entries)

    def values(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries])


def collect_gamma(model: Model) -> GammaIndex:
    norms = model.norm_layers()
    if not norms:
        raise SpecError("model has no scaling-factor layers")
    return GammaIndex([(i, c, float(g)) for i, l in norms for c, g in enumerate(l.gamma.data)])


def prune_quota(m: int, fraction: float) -> int:
    return math.ceil(fraction * m - 1e-9) if fraction > 0 else 0


def global_threshold(index: GammaIndex, prune_fraction: float) -> float:
    """The ceil(p*m)-th smallest |gamma|; ``-inf`` when nothing is pruned."""
    if not 0.0 <= prune_fraction < 1.0:
        raise SpecError(f"prune fraction must lie in [0, 1), got {prune_fraction}")
    k = prune_quota(len(index), prune_fraction)
    if k == 0:
        return -math.inf
    return float(np.sort(np.abs(index.values()), kind="stable")[k - 1])


def select_channels(index: GammaIndex, threshold: float, quota: int | None = None,
                    guard: bool = True) -> tuple[dict[int, list[int]], int]:
    """Channels to remove per layer and the number of guard rescues.

    With a quota, channels strictly below the threshold are taken first and
    ties at the threshold fill the remainder in (layer, channel) order.
    """
    mags = np.abs(index.values())
    if quota is None:
        chosen = [e for e, a in zip(index.entries, mags) if a <= threshold]
    else:
        chosen = [e for e, a in zip(index.entries, mags) if a < threshold]
        for e, a in zip(index.entries, mags):
            if len(chosen) >= quota:
                break
            if a == threshold:
                chosen.append(e)
    per_layer: dict[int, list[int]] = {}
    for layer, ch, _ in chosen:
        per_layer.setdefault(layer, []).append(ch)
    counts: dict[int, int] = {}
    gammas: dict[int, list[float]] = {}
    for layer, ch, g in index.entries:
        counts[layer] = counts.get(layer, 0) + 1
        gammas.setdefault(layer, []).append(abs(g))
    rescued = 0
    for layer, chans in per_layer.items():
        if len(chans) == counts[layer]:
            if not guard:
                raise PruneError(f"layer {layer} would lose all {counts[layer]} channels")
            keep = int(np.argmax(gammas[layer]))
            chans.remove(keep)
            rescued += 1
    return {k: sorted(v) for k, v in per_layer.items() if v}, rescued


@dataclass
class PruneReport:
    threshold: float
    kept: dict[int, list[int]]
    pruned: dict[int, list[int]]
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    requested: int = 0
    rescued: int = 0
    widths_before: dict[int, int] = field(default_factory=dict)

    @property
    def pruned_count(self) -> int:
        return sum(len(v) for v in self.pruned.values())

    @property
    def total_channels(self) -> int:
        return sum(len(self.kept[k]) + len(self.pruned[k]) for k in self.kept)

    def to_text(self) -> str:
        lines = [f"{'layer':>6} {'before':>7} {'after':>6} {'pruned%':>8}"]
        for layer in sorted(self.kept):
            before = len(self.kept[layer]) + len(self.pruned[layer])
            after = len(self.kept[layer])
            lines.append(f"{layer:>6} {before:>7} {after:>6} {100.0 * (before - after) / before:>8.2f}")
        lines.append("")
        kv = {
            "threshold": repr(self.threshold),
            "channels_total": self.total_channels,
            "channels_pruned": self.pruned_count,
            "requested": self.requested,
            "rescued": self.rescued,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
        }
        lines += [f"{k}={v}" for k, v in kv.items()]
        lines += [f"kept.{k}={','.join(map(str, v))}" for k, v in sorted(self.kept.items())]
        return "\n".join(lines) + "\n"


def _consumer(model: Model, norm_idx: int) -> tuple[int, list[L.Layer]]:
    """Next parameterized layer after a norm layer and the layers in between."""
    between = []
    for j in range(norm_idx + 1, len(model.layers)):
        layer = model.layers[j]
        if isinstance(layer, (L.Conv2d, L.Dense)):
            return j, between
        if isinstance(layer, L.ScaledNorm):
            break
        between.append(layer)
    raise PruneError(f"no layer consumes the channels of layer {norm_idx}")


def prune(model: Model, threshold: float, guard: bool = True,
          quota: int | None = None) -> tuple[Model, PruneReport]:
    """Physically remove low-|gamma| channels in place and return the model.

    A removed channel is treated as outputting the constant ``beta`` (its
    gamma taken as zero); that constant, pushed through any ReLU/pooling in
    between, is folded into the consumer's bias.
    """
    index = collect_gamma(model)
    selection, rescued = select_channels(index, threshold, quota, guard)
    params_before, flops_before = model.param_count(), model.flops()
    shapes = model.shapes()
    kept: dict[int, list[int]] = {}
    pruned: dict[int, list[int]] = {}
    widths = {}
    for i, norm in model.norm_layers():
        c = norm.channels
        widths[i] = c
        drop = selection.get(i, [])
        keep = [ch for ch in range(c) if ch not in set(drop)]
        kept[i], pruned[i] = keep, list(drop)
        if not drop:
            continue
        producer = model.layers[i - 1] if i > 0 else None
        if not isinstance(producer, L.Conv2d):
            raise PruneError(f"scalednorm layer {i} does not directly follow a conv layer")
        j, between = _consumer(model, i)
        const = norm.beta.data[drop].copy()
        for layer in between:
            if isinstance(layer, L.ReLU):
                const = np.maximum(const, 0.0)
        consumer = model.layers[j]
        producer.weight = Tensor(producer.weight.data[keep], True)
        producer.bias = Tensor(producer.bias.data[keep], True)
        norm.gamma = Tensor(norm.gamma.data[keep], True)
        norm.beta = Tensor(norm.beta.data[keep], True)
        norm.running_mean = norm.running_mean[keep]
        norm.running_var = norm.running_var[keep]
        if isinstance(consumer, L.Conv2d):
            w = consumer.weight.data
            fold = np.einsum("ochw,c->o", w[:, drop], const)
            consumer.bias = Tensor(consumer.bias.data + fold, True)
            consumer.weight = Tensor(w[:, keep], True)
        else:
            spatial = int(np.prod(shapes[j][:])) // c
            w = consumer.weight.data.reshape(c, spatial, -1)
            fold = np.einsum("csu,c->u", w[drop], const)
            consumer.bias = Tensor(consumer.bias.data + fold, True)
            consumer.weight = Tensor(w[keep].reshape(len(keep) * spatial, -1), True)
    report = PruneReport(threshold, kept, pruned, params_before, model.param_count(),
                         flops_before, model.flops(), requested=quota or 0, rescued=rescued,
                         widths_before=widths)
    return model, report


def prune_fraction(model: Model, fraction: float, guard: bool = True) -> tuple[Model, PruneReport]:
    """Global-threshold pruning of ``ceil(fraction * m)`` channels."""
    index = collect_gamma(model)
    t = global_threshold(index, fraction)
    return prune(model, t, guard, quota=prune_quota(len(index), fraction))


def masked_copy(model: Model, selection: dict[int, list[int]]) -> Model:
    """Copy with gamma and beta zeroed on the selected channels (no surgery)."""
    import copy
    m = copy.deepcopy(model)
    for i, chans in selection.items():
        norm = m.layers[i]
        g, b = norm.gamma.data.copy(), norm.beta.data.copy()
        g[chans] = 0.0
        b[chans] = 0.0
        norm.gamma, norm.beta = Tensor(g, True), Tensor(b, True)
    return m


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"CFCK"
VERSION = 1
_KIND_CODES = {k: i for i, k in enumerate(L.KINDS)}


@dataclass
class Checkpoint:
    model: Model
    iteration: int = 0
    rng_state: dict | None = None


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def array(self) -> np.ndarray:
        rank = self.u32()
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank}")
        dims = self.unpack("I" * rank) if rank else ()
        n = math.prod(dims)
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)


def _pack_array(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f8")
    return struct.pack("<I", a.ndim) + struct.pack("<" + "I" * a.ndim, *a.shape) + a.tobytes()


def _layer_record(layer: L.Layer) -> bytes:
    out = struct.pack("<I", _KIND_CODES[layer.kind])
    if isinstance(layer, L.Conv2d):
        out += struct.pack("<II", layer.stride, layer.padding)
        tensors = {"weight": layer.weight.data, "bias": layer.bias.data}
    elif isinstance(layer, L.Dense):
        tensors = {"weight": layer.weight.data, "bias": layer.bias.data}
    elif isinstance(layer, L.ScaledNorm):
        out += struct.pack("<ddB", layer.momentum, layer.eps, layer.mode == "eval")
        tensors = {"gamma": layer.gamma.data, "beta": layer.beta.data,
                   "running_mean": layer.running_mean, "running_var": layer.running_var}
    elif isinstance(layer, L.Pool):
        out += struct.pack("<II", layer.window, layer.stride)
        tensors = {}
    else:
        tensors = {}
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw + _pack_array(arr)
    return out


def save(model: Model, path, iteration: int = 0, rng_state: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<II", model.class_count, model.split_index),
             struct.pack("<I", len(model.input_shape)),
             struct.pack("<" + "I" * len(model.input_shape), *model.input_shape)]
    if model.input_mean is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts += [struct.pack("<B", 1), _pack_array(model.input_mean), _pack_array(model.input_std)]
    parts.append(struct.pack("<Q", iteration))
    rng_raw = b"" if rng_state is None else json.dumps(rng_state, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(rng_raw)) + rng_raw)
    parts.append(struct.pack("<I", len(model.layers)))
    parts += [_layer_record(l) for l in model.layers]
    Path(path).write_bytes(b"".join(parts))


def _read_layer(r: _Reader) -> L.Layer:
    code = r.u32()
    if code >= len(L.KINDS):
        raise FormatError(f"unknown layer kind code {code}")
    kind = L.KINDS[code]
    extra = None
    if kind == "conv":
        extra = r.unpack("II")
    elif kind == "scalednorm":
        extra = r.unpack("ddB")
    elif kind in ("maxpool", "avgpool"):
        extra = r.unpack("II")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        tensors[name] = r.array()
    try:
        if kind == "conv":
            return L.Conv2d(tensors["weight"], tensors["bias"], *extra)
        if kind == "dense":
            return L.Dense(tensors["weight"], tensors["bias"])
        if kind == "scalednorm":
            layer = L.ScaledNorm(tensors["gamma"].shape[0], 0.0, extra[0], extra[1])
            layer.gamma = Tensor(tensors["gamma"], True)
            layer.beta = Tensor(tensors["beta"], True)
            layer.running_mean = tensors["running_mean"]
            layer.running_var = tensors["running_var"]
            layer.mode = "eval" if extra[2] else "train"
            return layer
    except KeyError as exc:
        raise FormatError(f"{kind} record lacks tensor {exc}") from None
    if kind in ("maxpool", "avgpool"):
        return L.Pool(kind, *extra)
    return L.ReLU() if kind == "relu" else L.Flatten()


def load(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    class_count, split_index = r.unpack("II")
    rank = r.u32()
    input_shape = r.unpack("I" * rank)
    mean = std = None
    if r.unpack("B")[0]:
        mean, std = r.array(), r.array()
    iteration = r.unpack("Q")[0]
    rng_raw = r.take(r.u32())
    rng_state = json.loads(rng_raw) if rng_raw else None
    layers = [_read_layer(r) for _ in range(r.u32())]
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after the last layer record")
    try:
        model = Model(layers, input_shape, split_index, class_count, mean, std)
    except SpecError as exc:
        raise FormatError(str(exc)) from None
    return Checkpoint(model, iteration, rng_state)
