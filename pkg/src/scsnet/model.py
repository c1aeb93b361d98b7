"""Model assembly from ordered layer specs, plus parameter counting.

An architecture is a list of layer specs (scs | conv2d | conv3d | pool |
flatten | dense).  The builder threads the input shape through the list,
inserting shape adapters where adjacent layers need them:

    - a conv3d reading a rank-3 feature map [H, W, B] sees it as the
      single-channel volume [H, W, B, 1];
    - a 2-d windowed layer (scs, conv2d, pool) reading a rank-4 volume
      [H, W, D, C] sees depth folded into channels, [H, W, D*C].

Adapters are pure reshapes and own no parameters.  Any other mismatch is
a configuration error naming the offending layer pair.  Similarity layers
take no activation: a layer spec saying otherwise is rejected, rectifiers
stay a baseline-only ingredient.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, add, matmul, relu, reshape
from .conv import ConvLayer
from .errors import ConfigError, ContractError, ShapeError
from .scs import PoolSpec, ScsLayer, pool

LAYER_KINDS = ("scs", "conv2d", "conv3d", "pool", "flatten", "dense")

_ALLOWED_OPTIONS = {
    "scs": {"units", "window", "stride", "q_floor", "q_init", "activation"},
    "conv2d": {"units", "window", "stride", "activation"},
    "conv3d": {"units", "window", "stride", "activation"},
    "pool": {"mode", "window", "stride"},
    "flatten": set(),
    "dense": {"units", "activation"},
}


@dataclass
class LayerSpec:
    """One architecture entry: a kind plus its keyword options."""

    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected "
                              f"one of {', '.join(LAYER_KINDS)}")
        unknown = set(self.options) - _ALLOWED_OPTIONS[self.kind]
        if unknown:
            raise ConfigError(f"{self.kind} layer does not accept option(s) "
                              f"{', '.join(sorted(unknown))}")


@dataclass
class ModelConfig:
    """Input patch shape, class count, and the ordered layer list."""

    input_shape: tuple
    num_classes: int
    architecture: list

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input shape must be (k, k, bands) with "
                              f"positive dims, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not self.architecture:
            raise ConfigError("architecture has no layers")


# ---- parameterless stages ------------------------------------------------


class _Reshaper:
    """Shared machinery for stages that only rearrange axes."""

    def parameters(self):
        return []

    def zero_grad(self):
        pass


class ExpandStage(_Reshaper):
    """[N, H, W, B] -> [N, H, W, B, 1]: bands become a depth axis."""

    def __init__(self, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = self.in_shape + (1,)

    def forward(self, x):
        return reshape(x, (x.data.shape[0],) + self.out_shape)


class MergeStage(_Reshaper):
    """[N, H, W, D, C] -> [N, H, W, D*C]: depth folds into channels."""

    def __init__(self, in_shape):
        h, w, d, c = in_shape
        self.in_shape = tuple(in_shape)
        self.out_shape = (h, w, d * c)

    def forward(self, x):
        return reshape(x, (x.data.shape[0],) + self.out_shape)


class FlattenStage(_Reshaper):
    def __init__(self, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = (math.prod(in_shape),)

    def forward(self, x):
        return reshape(x, (x.data.shape[0],) + self.out_shape)


class PoolStage(_Reshaper):
    """Spatial pooling over (H, W); a depth axis, if present, rides along
    folded into the channel axis and is restored afterwards."""

    def __init__(self, spec, in_shape):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        h, w = in_shape[:2]
        ph, pw = spec.window
        sh, sw = spec.stride
        if h < ph or w < pw:
            raise ShapeError(f"pool window {spec.window} exceeds input "
                             f"spatial extent {(h, w)}")
        oh = (h - ph) // sh + 1
        ow = (w - pw) // sw + 1
        self.out_shape = (oh, ow) + tuple(in_shape[2:])

    def forward(self, x):
        n = x.data.shape[0]
        if len(self.in_shape) == 4:
            h, w, d, c = self.in_shape
            folded = pool(reshape(x, (n, h, w, d * c)), self.spec)
            return reshape(folded, (n,) + self.out_shape)
        return pool(x, self.spec)


class DenseLayer:
    """Fully connected affine map with optional rectifier."""

    def __init__(self, units, in_features, activation="none", seed=0,
                 dtype=np.float64):
        if units < 1 or in_features < 1:
            raise ContractError("units and in_features must be >= 1")
        if activation not in ("none", "relu"):
            raise ContractError(f"unknown activation {activation!r}")
        self.units = int(units)
        self.in_features = int(in_features)
        self.activation = activation
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2], dtype=np.uint64)))
        a = math.sqrt(1.0 / in_features)
        self.weight = Tensor(rng.uniform(-a, a, (in_features, units)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(units, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        if x.data.ndim != 2 or x.data.shape[1] != self.in_features:
            raise ShapeError(f"dense layer expects [N, {self.in_features}], "
                             f"got {x.shape}")
        n = x.data.shape[0]
        ones_col = Tensor(np.ones((n, 1), dtype=x.data.dtype))
        out = add(matmul(x, self.weight),
                  matmul(ones_col, reshape(self.bias, (1, self.units))))
        return relu(out) if self.activation == "relu" else out


# ---- assembly ------------------------------------------------------------


@dataclass
class Stage:
    """One executable step of a built model."""

    name: str
    kind: str
    layer: object
    out_shape: tuple


class Model:
    def __init__(self, config, stages):
        self.config = config
        self.stages = stages

    def forward(self, x):
        """x: Tensor [N, k, k, B']; returns logits [N, C]."""
        if x.data.ndim != 4:
            raise ShapeError(f"model input must be [N, k, k, bands], got "
                             f"{x.shape}")
        if x.data.shape[1:] != self.config.input_shape:
            raise ShapeError(f"model was built for input {self.config.input_shape}, "
                             f"got {x.data.shape[1:]}")
        for stage in self.stages:
            x = stage.layer.forward(x)
        return x

    def predict(self, patches):
        """patches: [N, k, k, B'] array; returns 1-based class ids [N]."""
        logits = self.forward(Tensor(np.asarray(patches, dtype=np.float64)))
        return np.argmax(logits.data, axis=1) + 1

    def parameters(self):
        out = []
        for stage in self.stages:
            for pname, tensor in stage.layer.parameters():
                out.append((f"{stage.name}.{pname}", tensor))
        return out

    def zero_grad(self):
        for _, tensor in self.parameters():
            tensor.zero_grad()

    def state_dict(self):
        return {name: tensor.data.copy() for name, tensor in self.parameters()}

    def load_state_dict(self, state):
        params = dict(self.parameters())
        if set(state) != set(params):
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            raise ContractError(f"parameter names do not match model "
                                f"(missing: {sorted(missing)}, "
                                f"unexpected: {sorted(extra)})")
        for name, values in state.items():
            tensor = params[name]
            values = np.asarray(values)
            if values.shape != tensor.data.shape:
                raise ContractError(f"{name}: shape {values.shape} does not "
                                    f"match model shape {tensor.data.shape}")
            tensor.data[...] = values


def _pair(value, what):
    if isinstance(value, (int, np.integer)):
        return (int(value), int(value))
    value = tuple(int(v) for v in value)
    if len(value) != 2:
        raise ConfigError(f"{what} must be an int or a pair, got {value}")
    return value


def _triple(value, what):
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ConfigError(f"{what} must be an int or a triple, got {value}")
    return value


def build_model(config, seed=0, dtype=np.float64):
    """Instantiate the architecture, threading shapes front to back.

    Layer i draws its init stream from seed + i, so reordering or editing
    one layer leaves the others' initial weights untouched.
    """
    stages = []
    shape = config.input_shape
    prev_desc = f"input {shape}"
    for i, spec in enumerate(config.architecture):
        kind = spec.kind
        opts = dict(spec.options)
        name = f"layer{i}.{kind}"
        layer_seed = (seed + i) % (1 << 64)

        def fail(why):
            return ConfigError(f"{name} cannot follow {prev_desc}: {why}")

        try:
            if kind in ("scs", "conv2d", "pool") and len(shape) == 4:
                merge = MergeStage(shape)
                stages.append(Stage(f"layer{i}.merge", "merge", merge,
                                    merge.out_shape))
                shape = merge.out_shape
            if kind == "conv3d" and len(shape) == 3:
                expand = ExpandStage(shape)
                stages.append(Stage(f"layer{i}.expand", "expand", expand,
                                    expand.out_shape))
                shape = expand.out_shape

            if kind == "scs":
                if opts.pop("activation", "none") != "none":
                    raise ConfigError(
                        f"{name}: similarity layers take no activation; "
                        f"remove it (rectifiers are for conv/dense layers)")
                if len(shape) != 3:
                    raise fail(f"needs a [H, W, C] feature map, has {shape}")
                layer = ScsLayer(
                    units=int(opts.pop("units")),
                    window=_pair(opts.pop("window"), f"{name} window"),
                    in_channels=shape[2],
                    stride=_pair(opts.pop("stride", 1), f"{name} stride"),
                    q_floor=float(opts.pop("q_floor", 1e-6)),
                    q_init=float(opts.pop("q_init", 0.1)),
                    seed=layer_seed, dtype=dtype)
                shape = layer.output_shape(shape[:2])
            elif kind == "conv2d":
                if len(shape) != 3:
                    raise fail(f"needs a [H, W, C] feature map, has {shape}")
                layer = ConvLayer(
                    units=int(opts.pop("units")),
                    window=_pair(opts.pop("window"), f"{name} window"),
                    in_channels=shape[2],
                    stride=_pair(opts.pop("stride", 1), f"{name} stride"),
                    activation=str(opts.pop("activation", "none")),
                    seed=layer_seed, dtype=dtype)
                shape = layer.output_shape(shape[:2])
            elif kind == "conv3d":
                if len(shape) != 4:
                    raise fail(f"needs a [H, W, D, C] volume, has {shape}")
                layer = ConvLayer(
                    units=int(opts.pop("units")),
                    window=_triple(opts.pop("window"), f"{name} window"),
                    in_channels=shape[3],
                    stride=_triple(opts.pop("stride", 1), f"{name} stride"),
                    activation=str(opts.pop("activation", "none")),
                    seed=layer_seed, dtype=dtype)
                shape = layer.output_shape(shape[:3])
            elif kind == "pool":
                window = _pair(opts.pop("window", 2), f"{name} window")
                stride = _pair(opts.pop("stride", window), f"{name} stride")
                spec_obj = PoolSpec(window, stride, str(opts.pop("mode", "maxabs")))
                layer = PoolStage(spec_obj, shape)
                shape = layer.out_shape
            elif kind == "flatten":
                layer = FlattenStage(shape)
                shape = layer.out_shape
            elif kind == "dense":
                if len(shape) != 1:
                    raise fail(f"needs a flat [F] vector, has {shape}; "
                               f"insert a flatten layer")
                layer = DenseLayer(
                    units=int(opts.pop("units")),
                    in_features=shape[0],
                    activation=str(opts.pop("activation", "none")),
                    seed=layer_seed, dtype=dtype)
                shape = (layer.units,)
        except KeyError as missing:
            raise ConfigError(f"{name} is missing required option {missing}")
        except (ShapeError, ContractError) as err:
            raise ConfigError(f"{name} cannot follow {prev_desc}: {err}")

        stages.append(Stage(name, kind, layer, shape))
        prev_desc = f"{name} with output {shape}"

    if stages[-1].kind != "dense" or shape != (config.num_classes,):
        raise ConfigError(f"final layer must be a dense layer with "
                          f"{config.num_classes} units (the class count); "
                          f"architecture ends at {prev_desc}")
    return Model(config, stages)


# ---- parameter counting --------------------------------------------------


def count_parameters(model):
    """Per-stage and total learnable-parameter counts, by closed form.

    scs: U*(kh*kw*Cin) + U exponents + 1 stabilizer; conv: U*prod(window)
    *Cin + U biases; dense: in*out + out; everything else: 0.
    """
    rows = []
    for stage in model.stages:
        layer = stage.layer
        if stage.kind == "scs":
            kh, kw = layer.window
            n = layer.units * (kh * kw * layer.in_channels) + layer.units + 1
        elif stage.kind in ("conv2d", "conv3d"):
            n = layer.units * (math.prod(layer.window) * layer.in_channels) + layer.units
        elif stage.kind == "dense":
            n = layer.in_features * layer.units + layer.units
        else:
            n = 0
        rows.append((stage.name, n))
    return rows, sum(n for _, n in rows)


def walk_parameter_arrays(model):
    """Independent tally: enumerate every learnable array and sum sizes."""
    return sum(tensor.size for _, tensor in model.parameters())


# ---- reference architectures ---------------------------------------------


def reference_scsnet():
    """Two similarity stages with magnitude pooling and a linear head."""
    return [
        LayerSpec("scs", {"units": 8, "window": (3, 3)}),
        LayerSpec("pool", {"mode": "maxabs", "window": (2, 2), "stride": (2, 2)}),
        LayerSpec("scs", {"units": 16, "window": (3, 3)}),
        LayerSpec("pool", {"mode": "maxabs", "window": (2, 2), "stride": (2, 2)}),
        LayerSpec("flatten"),
        LayerSpec("dense", {"units": "num_classes"}),
    ]


def reference_cnn3d():
    """Volumetric baseline: two 3-d convolutions, pooling, two dense layers."""
    return [
        LayerSpec("conv3d", {"units": 8, "window": (3, 3, 7), "activation": "relu"}),
        LayerSpec("conv3d", {"units": 16, "window": (3, 3, 5), "activation": "relu"}),
        LayerSpec("pool", {"mode": "max", "window": (2, 2), "stride": (2, 2)}),
        LayerSpec("flatten"),
        LayerSpec("dense", {"units": 64, "activation": "relu"}),
        LayerSpec("dense", {"units": "num_classes"}),
    ]


def reference_hybrid():
    """A 3-d convolution feeding a 2-d convolution, then dense layers."""
    return [
        LayerSpec("conv3d", {"units": 8, "window": (3, 3, 7), "activation": "relu"}),
        LayerSpec("conv2d", {"units": 16, "window": (3, 3), "activation": "relu"}),
        LayerSpec("flatten"),
        LayerSpec("dense", {"units": 64, "activation": "relu"}),
        LayerSpec("dense", {"units": "num_classes"}),
    ]


REFERENCE_ARCHITECTURES = {
    "scsnet": reference_scsnet,
    "cnn3d": reference_cnn3d,
    "hybrid": reference_hybrid,
}


def reference_config(name, input_shape=(15, 15, 15), num_classes=16):
    """A ModelConfig for one of the shipped reference architectures."""
    if name not in REFERENCE_ARCHITECTURES:
        raise ConfigError(f"unknown architecture {name!r}; expected one of "
                          f"{', '.join(sorted(REFERENCE_ARCHITECTURES))}")
    arch = []
    for spec in REFERENCE_ARCHITECTURES[name]():
        opts = dict(spec.options)
        if opts.get("units") == "num_classes":
            opts["units"] = num_classes
        arch.append(LayerSpec(spec.kind, opts))
    return ModelConfig(input_shape=input_shape, num_classes=num_classes,
                       architecture=arch)
