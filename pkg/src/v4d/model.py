"""Network assembly: five-conv stem, architecture modules, GAP, FC head.

Supported block families are ResNet, Inception, ResNeXt and Densenet; each
can be built with any of the four temporal-processing modes. Activations are
channels-first rank-6 ``(N, C, T, D, H, W)`` internally (``T == 1`` for the
3D modes); the public ``Network.forward`` takes channels-last batches.

Downsampling always uses strided convolution in the first block of each
module (spatial stride 2, plus temporal stride 2 in the 4D modes while the
time extent is > 1). Once the time extent reaches 1, temporal kernels
collapse to 1.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from .ops import (
    Affine,
    Conv,
    ConvMode,
    GlobalAvgPool,
    Layer,
    MaxPool,
    OpError,
    ReLU,
    channel_stack,
)


class Family(str, Enum):
    RESNET = "resnet"
    INCEPTION = "inception"
    RESNEXT = "resnext"
    DENSENET = "densenet"

    @classmethod
    def parse(cls, text: str) -> "Family":
        t = text.strip().lower()
        for f in cls:
            if f.value == t:
                return f
        raise OpError(f"unknown family {text!r} (have: {[f.value for f in cls]})")


@dataclass
class ModelSpec:
    """Architecture family x convolution mode x width/depth hyperparameters."""

    family: Family = Family.RESNET
    mode: ConvMode = ConvMode.MODE_3D
    stem_channels: int = 8
    module_channel_multipliers: tuple[int, ...] = (1, 2, 4)
    blocks_per_module: tuple[int, ...] = (2, 2, 2)
    spatial_kernel: int = 3
    temporal_kernel: int = 3
    cardinality: int = 4
    growth_rate: int = 8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = Family.parse(self.family)
        if isinstance(self.mode, str):
            self.mode = ConvMode.parse(self.mode)
        self.module_channel_multipliers = tuple(int(m) for m in self.module_channel_multipliers)
        self.blocks_per_module = tuple(int(b) for b in self.blocks_per_module)
        if not self.blocks_per_module:
            raise OpError("blocks_per_module must not be empty")
        if len(self.blocks_per_module) != len(self.module_channel_multipliers):
            raise OpError("blocks_per_module and module_channel_multipliers lengths differ")
        if min(self.blocks_per_module) < 1 or min(self.module_channel_multipliers) < 1:
            raise OpError("block counts and channel multipliers must be >= 1")
        if self.spatial_kernel % 2 == 0 or self.temporal_kernel % 2 == 0:
            raise OpError("kernels must be odd for 'same' padding")
        if self.stem_channels < 1 or self.cardinality < 1 or self.growth_rate < 1:
            raise OpError("channel-like hyperparameters must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        d["mode"] = self.mode.value
        d["module_channel_multipliers"] = list(self.module_channel_multipliers)
        d["blocks_per_module"] = list(self.blocks_per_module)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def sample_shape_for(mode: ConvMode, sequence_length: int, extents, channels: int = 1):
    """Channels-last sample shape the network expects for a given mode."""
    d, h, w = extents
    if mode is ConvMode.MODE_3D:
        return (d, h, w, channels)
    if mode is ConvMode.MODE_3DC:
        return (d, h, w, sequence_length * channels)
    return (sequence_length, d, h, w, channels)


def prepare_batch(mode: ConvMode, sequences: np.ndarray) -> np.ndarray:
    """Adapt a batch of sequences ``[N,T,D,H,W,C]`` to a mode's input."""
    if sequences.ndim != 6:
        raise OpError(f"sequence batch must be rank 6, got {sequences.ndim}")
    if mode is ConvMode.MODE_3D:
        return np.ascontiguousarray(sequences[:, -1])
    if mode is ConvMode.MODE_3DC:
        return channel_stack(sequences)
    return sequences


# ---------------------------------------------------------------------------
# composite layers


def iter_param_entries(layer: Layer, prefix: str = ""):
    """Yield (full_name, layer, attr) for every parameter in the subtree."""
    for local, attr in layer.param_items():
        yield prefix + local, layer, attr
    children = getattr(layer, "children", None)
    if children is not None:
        for name, child in children():
            yield from iter_param_entries(child, prefix + name + ".")


def _prefixed(grads: dict, name: str) -> dict:
    return {f"{name}.{k}": v for k, v in grads.items()}


class Sequential(Layer):
    def __init__(self, children: list[tuple[str, Layer]]):
        self._children = list(children)

    def children(self):
        return self._children

    def forward(self, x):
        for _, layer in self._children:
            x = layer.forward(x)
        return x

    def backward(self, dy, need_dx=True):
        grads = {}
        for i in reversed(range(len(self._children))):
            name, layer = self._children[i]
            dy, g = layer.backward(dy, need_dx=need_dx or i > 0)
            grads.update(_prefixed(g, name))
        return dy, grads

    def out_shape(self, in_shape):
        for _, layer in self._children:
            in_shape = layer.out_shape(in_shape)
        return in_shape


class ResNetBlock(Layer):
    """conv-relu-conv plus identity/projection skip, ReLU after the add."""

    def __init__(self, main: Layer, skip: Layer | None):
        self.main, self.skip = main, skip
        self.act = ReLU()

    def children(self):
        out = [("main", self.main)]
        if self.skip is not None:
            out.append(("skip", self.skip))
        return out

    def forward(self, x):
        m = self.main.forward(x)
        s = self.skip.forward(x) if self.skip is not None else x
        return self.act.forward(m + s)

    def backward(self, dy, need_dx=True):
        dr, _ = self.act.backward(dy)
        dx, gm = self.main.backward(dr)
        grads = _prefixed(gm, "main")
        if self.skip is not None:
            ds, gs = self.skip.backward(dr)
            dx = dx + ds
            grads.update(_prefixed(gs, "skip"))
        else:
            dx = dx + dr
        return dx, grads

    def out_shape(self, in_shape):
        return self.main.out_shape(in_shape)


class ConcatBranches(Layer):
    """Parallel branches concatenated on the channel axis (Inception)."""

    def __init__(self, branches: list[tuple[str, Layer]]):
        self._branches = branches

    def children(self):
        return self._branches

    def forward(self, x):
        ys = [b.forward(x) for _, b in self._branches]
        self._widths = [y.shape[1] for y in ys]
        return np.concatenate(ys, axis=1)

    def backward(self, dy, need_dx=True):
        grads = {}
        dx = None
        edges = np.cumsum(self._widths)[:-1]
        for (name, branch), chunk in zip(self._branches, np.split(dy, edges, axis=1)):
            dxb, g = branch.backward(np.ascontiguousarray(chunk))
            dx = dxb if dx is None else dx + dxb
            grads.update(_prefixed(g, name))
        return dx, grads

    def out_shape(self, in_shape):
        outs = [b.out_shape(in_shape) for _, b in self._branches]
        c = sum(o[1] for o in outs)
        return (outs[0][0], c) + tuple(outs[0][2:])


class SumPathsBlock(Layer):
    """Aggregated parallel bottleneck paths plus skip (ResNeXt)."""

    def __init__(self, paths: list[tuple[str, Layer]], skip: Layer | None):
        self._paths = paths
        self.skip = skip
        self.act = ReLU()

    def children(self):
        out = list(self._paths)
        if self.skip is not None:
            out.append(("skip", self.skip))
        return out

    def forward(self, x):
        y = None
        for _, p in self._paths:
            yp = p.forward(x)
            y = yp if y is None else y + yp
        y = y + (self.skip.forward(x) if self.skip is not None else x)
        return self.act.forward(y)

    def backward(self, dy, need_dx=True):
        dr, _ = self.act.backward(dy)
        grads = {}
        dx = None
        for name, p in self._paths:
            dxp, g = p.backward(dr)
            dx = dxp if dx is None else dx + dxp
            grads.update(_prefixed(g, name))
        if self.skip is not None:
            ds, gs = self.skip.backward(dr)
            dx = dx + ds
            grads.update(_prefixed(gs, "skip"))
        else:
            dx = dx + dr
        return dx, grads

    def out_shape(self, in_shape):
        return self._paths[0][1].out_shape(in_shape)


class DenseGrowthBlock(Layer):
    """Concatenates ``growth`` fresh channels from a conv unit (Densenet)."""

    def __init__(self, unit: Layer):
        self.unit = unit

    def children(self):
        return [("unit", self.unit)]

    def forward(self, x):
        self._cin = x.shape[1]
        return np.concatenate([x, self.unit.forward(x)], axis=1)

    def backward(self, dy, need_dx=True):
        dpass = np.ascontiguousarray(dy[:, : self._cin])
        dnew = np.ascontiguousarray(dy[:, self._cin :])
        dxu, g = self.unit.backward(dnew)
        return dpass + dxu, _prefixed(g, "unit")

    def out_shape(self, in_shape):
        grown = self.unit.out_shape(in_shape)
        return (in_shape[0], in_shape[1] + grown[1]) + tuple(in_shape[2:])


# ---------------------------------------------------------------------------
# builder


class _Builder:
    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)

    def conv_unit(self, cin, cout, t_extent, spatial=True, downsample=False) -> Layer:
        """One convolution unit for the current mode.

        ``spatial`` selects the full spatial kernel (vs pointwise); in F-4D
        mode a spatial unit becomes spatial-conv -> ReLU -> temporal-conv.
        """
        spec, mode = self.spec, self.spec.mode
        k = spec.spatial_kernel if spatial else 1
        s = 2 if downsample else 1
        stt = 2 if (downsample and mode.temporal and t_extent > 1) else 1
        kt = spec.temporal_kernel if (mode.temporal and t_extent > 1) else 1
        if spatial and mode is ConvMode.MODE_4D:
            return Conv((kt, k, k, k), cin, cout, (stt, s, s, s), "same", self.rng)
        if spatial and mode is ConvMode.MODE_F4D:
            return Sequential([
                ("s", Conv((1, k, k, k), cin, cout, (1, s, s, s), "same", self.rng)),
                ("r", ReLU()),
                ("t", Conv((kt, 1, 1, 1), cout, cout, (stt, 1, 1, 1), "same", self.rng)),
            ])
        return Conv((1, k, k, k), cin, cout, (stt, s, s, s), "same", self.rng)

    def pool_unit(self, t_extent, downsample) -> Layer:
        k = self.spec.spatial_kernel
        mode = self.spec.mode
        wt = self.spec.temporal_kernel if (mode.temporal and t_extent > 1) else 1
        s = 2 if downsample else 1
        stt = 2 if (downsample and mode.temporal and t_extent > 1) else 1
        return MaxPool((wt, k, k, k), (stt, s, s, s), "same")

    def block(self, shape, cout, downsample) -> tuple[Layer, tuple]:
        """One architecture block; returns (layer, new shape)."""
        family = self.spec.family
        cin, t = shape[1], shape[2]
        if family is Family.RESNET:
            u1 = self.conv_unit(cin, cout, t, True, downsample)
            mid = u1.out_shape(shape)
            main = Sequential([
                ("c1", u1), ("r1", ReLU()),
                ("c2", self.conv_unit(cout, cout, mid[2], True, False)),
            ])
            skip = None
            if downsample or cin != cout:
                skip = self.conv_unit(cin, cout, t, False, downsample)
            layer = ResNetBlock(main, skip)
        elif family is Family.INCEPTION:
            if cout < 3:
                raise OpError(f"inception blocks need >= 3 output channels, got {cout}")
            w2 = w3 = cout // 3
            w1 = cout - w2 - w3
            layer = ConcatBranches([
                ("b1", Sequential([
                    ("c", self.conv_unit(cin, w1, t, False, downsample)), ("r", ReLU())])),
                ("b2", Sequential([
                    ("c", self.conv_unit(cin, w2, t, True, downsample)), ("r", ReLU())])),
                ("b3", Sequential([
                    ("p", self.pool_unit(t, downsample)),
                    ("c", self.conv_unit(cin, w3, t if not downsample else 1, False, False)),
                    ("r", ReLU())])),
            ])
        elif family is Family.RESNEXT:
            width = max(1, cout // (2 * self.spec.cardinality))
            paths = []
            for g in range(self.spec.cardinality):
                u1 = self.conv_unit(cin, width, t, False, False)
                u2 = self.conv_unit(width, width, t, True, downsample)
                mid = u2.out_shape(u1.out_shape(shape))
                paths.append((f"p{g}", Sequential([
                    ("c1", u1), ("r1", ReLU()),
                    ("c2", u2), ("r2", ReLU()),
                    ("c3", self.conv_unit(width, cout, mid[2], False, False)),
                ])))
            skip = None
            if downsample or cin != cout:
                skip = self.conv_unit(cin, cout, t, False, downsample)
            layer = SumPathsBlock(paths, skip)
        else:  # DENSENET growth layer (downsampling handled by the module)
            layer = DenseGrowthBlock(Sequential([
                ("c", self.conv_unit(cin, self.spec.growth_rate, t, True, False)),
                ("r", ReLU()),
            ]))
        return layer, layer.out_shape(shape)


def _build_root(spec: ModelSpec, in_shape_cf: tuple) -> tuple[Sequential, list]:
    b = _Builder(spec)
    shape = in_shape_cf
    shapes = [("input", shape)]
    stem_children = []
    c = shape[1]
    for i in range(5):
        unit = b.conv_unit(c, spec.stem_channels, shape[2], True, False)
        stem_children += [(f"c{i + 1}", unit), (f"r{i + 1}", ReLU())]
        shape = unit.out_shape(shape)
        c = spec.stem_channels
    stem = Sequential(stem_children)
    shapes.append(("stem", shape))
    root_children = [("stem", stem)]

    for m, (mult, nblocks) in enumerate(
        zip(spec.module_channel_multipliers, spec.blocks_per_module), start=1
    ):
        mod_children = []
        if spec.family is Family.DENSENET:
            down = b.conv_unit(shape[1], shape[1], shape[2], True, True)
            mod_children += [("down", down), ("rdown", ReLU())]
            shape = down.out_shape(shape)
            for j in range(nblocks):
                blk, shape = b.block(shape, spec.growth_rate, False)
                mod_children.append((f"b{j + 1}", blk))
            trans = b.conv_unit(shape[1], max(1, shape[1] // 2), shape[2], False, False)
            mod_children += [("trans", trans), ("rtrans", ReLU())]
            shape = trans.out_shape(shape)
        else:
            cout = spec.stem_channels * mult
            for j in range(nblocks):
                blk, shape = b.block(shape, cout, downsample=(j == 0))
                mod_children.append((f"b{j + 1}", blk))
        root_children.append((f"m{m}", Sequential(mod_children)))
        shapes.append((f"m{m}", shape))

    gap = GlobalAvgPool()
    shape = gap.out_shape(shape)
    root_children.append(("gap", gap))
    root_children.append(("fc", Affine(shape[1], 3, b.rng)))
    shapes.append(("fc", (shape[0], 3)))
    return Sequential(root_children), shapes


class Network:
    """Built network: layer graph plus a named parameter store."""

    def __init__(self, spec: ModelSpec, input_shape: tuple[int, ...]):
        self.spec = spec
        self.input_shape = tuple(int(e) for e in input_shape)
        mode = spec.mode
        want_rank = 5 if mode.temporal else 4
        if len(self.input_shape) != want_rank:
            raise OpError(
                f"mode {mode.value} expects a rank-{want_rank} sample shape, "
                f"got {self.input_shape}"
            )
        if mode.temporal and spec.temporal_kernel > self.input_shape[0]:
            raise OpError(
                f"temporal kernel {spec.temporal_kernel} exceeds sequence "
                f"length {self.input_shape[0]}"
            )
        cf = self._cf_shape(batch=1)
        self.root, self.shapes = _build_root(spec, cf)
        self._params = OrderedDict(
            (name, (layer, attr)) for name, layer, attr in iter_param_entries(self.root)
        )

    def _cf_shape(self, batch):
        if self.spec.mode.temporal:
            t, d, h, w, c = self.input_shape
        else:
            d, h, w, c = self.input_shape
            t = 1
        return (batch, c, t, d, h, w)

    def _to_cf(self, batch: np.ndarray) -> np.ndarray:
        if batch.shape[1:] != self.input_shape:
            raise OpError(
                f"batch sample shape {batch.shape[1:]} != expected {self.input_shape}"
            )
        x = np.moveaxis(batch, -1, 1)
        if not self.spec.mode.temporal:
            x = x[:, :, None]
        return np.ascontiguousarray(x, dtype=np.float64)

    def _from_cf(self, dx: np.ndarray) -> np.ndarray:
        if not self.spec.mode.temporal:
            dx = dx[:, :, 0]
        return np.ascontiguousarray(np.moveaxis(dx, 1, -1))

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return self.root.forward(self._to_cf(batch))

    def backward(self, dy: np.ndarray, need_dx: bool = False):
        """Gradients for the last forward batch.

        Returns ``(input_grad | None, grads)`` with grads keyed by parameter
        name.
        """
        dx, grads = self.root.backward(np.asarray(dy, dtype=np.float64), need_dx=need_dx)
        return (self._from_cf(dx) if need_dx else None), grads

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, getattr(l, a)) for k, (l, a) in self._params.items())

    def set_parameters(self, values: dict) -> None:
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise OpError(f"parameter name mismatch: missing {missing}, extra {extra}")
        for name, (layer, attr) in self._params.items():
            cur = getattr(layer, attr)
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != cur.shape:
                raise OpError(f"parameter {name} shape {v.shape} != {cur.shape}")
            setattr(layer, attr, v.copy())
        self._params = OrderedDict(
            (name, (layer, attr)) for name, layer, attr in iter_param_entries(self.root)
        )

    def layer_shapes(self) -> list:
        """(stage name, channels-first activation shape) pairs, batch=1."""
        return list(self.shapes)


def build_model(spec: ModelSpec, input_shape) -> Network:
    return Network(spec, tuple(input_shape))


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    return net.forward(batch)


def parameter_count(net_or_params) -> int:
    params = net_or_params.parameters() if hasattr(net_or_params, "parameters") else net_or_params
    return int(sum(np.asarray(p).size for p in params.values()))
