"""Experiment configuration: INI files with a built-in default layer.

A config file has four sections (all optional; missing keys fall back to
the defaults below, which carry the standard protocol: 15x15 patches, 15
retained bands, 40/30/30 splits, 250 epochs, batch 256, learning rate
0.001):

    [dataset]   cube, labels: file paths; class_names: optional comma list
    [pipeline]  bands (B'), patch (odd k), train/val/test_fraction, split_seed
    [model]     architecture = scsnet | cnn3d | hybrid | custom,
                plus layer0..layerN lines when custom:
                    layerN = kind key=value ...
                e.g.  layer0 = scs units=8 window=3x3 stride=1x1
                      layer1 = pool mode=maxabs window=2x2 stride=2x2
                      layer4 = dense units=num_classes
                `units=num_classes` resolves to the label grid's class count.
    [train]     epochs, batch_size, learning_rate, beta1, beta2, adam_eps, seed
    [output]    dir, precision (f32 | f64)

Command-line flags override file values, file values override defaults.
The digest stored in checkpoints is taken over `canonical_text`, a
serialization of the resolved settings that is independent of key order
and comments in the source file.
"""

import configparser
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import REFERENCE_ARCHITECTURES, LayerSpec, ModelConfig
from .train import TrainConfig

DEFAULT_CONFIG_TEXT = """
[dataset]
cube =
labels =
class_names =

[pipeline]
bands = 15
patch = 15
train_fraction = 0.4
val_fraction = 0.3
test_fraction = 0.3
split_seed = 0

[model]
architecture = scsnet

[train]
epochs = 250
batch_size = 256
learning_rate = 0.001
beta1 = 0.9
beta2 = 0.999
adam_eps = 1e-8
seed = 0

[output]
dir = out
precision = f64
"""


@dataclass
class ExperimentConfig:
    cube: str
    labels: str
    class_names: list
    bands: int
    patch: int
    fractions: tuple
    split_seed: int
    architecture: str
    layers: list = field(default_factory=list)
    epochs: int = 250
    batch_size: int = 256
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_seed: int = 0
    out_dir: str = "out"
    precision: str = "f64"

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ConfigError(f"patch must be odd and >= 1, got {self.patch}")
        if self.bands < 1:
            raise ConfigError(f"bands must be >= 1, got {self.bands}")
        total = sum(self.fractions)
        if min(self.fractions) < 0 or abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be nonnegative and sum "
                              f"to 1, got {self.fractions}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got "
                              f"{self.precision!r}")
        if self.architecture not in list(REFERENCE_ARCHITECTURES) + ["custom"]:
            raise ConfigError(f"architecture must be one of "
                              f"{', '.join(REFERENCE_ARCHITECTURES)} or "
                              f"custom, got {self.architecture!r}")
        if self.architecture == "custom" and not self.layers:
            raise ConfigError("architecture = custom needs layer0..layerN "
                              "lines in [model]")
        if self.architecture != "custom" and self.layers:
            raise ConfigError(f"layerN lines conflict with architecture = "
                              f"{self.architecture}; use architecture = custom")
        self.split_seed = int(self.split_seed) % (1 << 64)
        self.train_seed = int(self.train_seed) % (1 << 64)
        try:
            self.train_config()
        except ContractError as err:
            raise ConfigError(f"[train] {err}") from None

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, beta1=self.beta1,
                           beta2=self.beta2, adam_eps=self.adam_eps,
                           seed=self.train_seed)

    def model_config(self, num_classes):
        """Resolve the architecture against the dataset's class count."""
        if self.architecture == "custom":
            layers = self.layers
        else:
            layers = REFERENCE_ARCHITECTURES[self.architecture]()
        resolved = []
        for spec in layers:
            opts = dict(spec.options)
            if opts.get("units") == "num_classes":
                opts["units"] = num_classes
            resolved.append(LayerSpec(spec.kind, opts))
        return ModelConfig(input_shape=(self.patch, self.patch, self.bands),
                           num_classes=num_classes, architecture=resolved)

    def canonical_text(self):
        """Key-sorted serialization of every resolved setting; the config
        digest in checkpoints is the sha256 of this text."""
        lines = [
            f"adam_eps={self.adam_eps!r}",
            f"architecture={self.architecture}",
            f"bands={self.bands}",
            f"batch_size={self.batch_size}",
            f"beta1={self.beta1!r}",
            f"beta2={self.beta2!r}",
            f"class_names={','.join(self.class_names)}",
            f"epochs={self.epochs}",
            f"fractions={self.fractions!r}",
            f"learning_rate={self.learning_rate!r}",
            f"patch={self.patch}",
            f"precision={self.precision}",
            f"split_seed={self.split_seed}",
            f"train_seed={self.train_seed}",
        ]
        for i, spec in enumerate(self.layers):
            opts = " ".join(f"{k}={_format_option(v)}"
                            for k, v in sorted(spec.options.items()))
            lines.append(f"layer{i}={spec.kind} {opts}".rstrip())
        return "\n".join(lines) + "\n"


def _format_option(value):
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return str(value)


def _parse_option_value(key, value):
    if key in ("window", "stride"):
        parts = value.split("x")
        try:
            dims = tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{key}={value!r} is not an int or an "
                              f"AxB / AxBxC size") from None
        return dims[0] if len(dims) == 1 else dims
    if key == "units":
        if value == "num_classes":
            return "num_classes"
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"units={value!r} must be an integer or "
                              f"num_classes") from None
    if key in ("q_floor", "q_init"):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key}={value!r} must be a number") from None
    return value  # mode, activation: validated by the layer itself


def parse_layer_line(text, where):
    """`kind key=value ...` -> LayerSpec."""
    parts = text.split()
    if not parts:
        raise ConfigError(f"{where}: empty layer line")
    kind, opts = parts[0], {}
    for part in parts[1:]:
        if "=" not in part:
            raise ConfigError(f"{where}: expected key=value, got {part!r}")
        key, value = part.split("=", 1)
        opts[key] = _parse_option_value(key, value)
    try:
        return LayerSpec(kind, opts)
    except ConfigError as err:
        raise ConfigError(f"{where}: {err}") from None


def _collect_layers(section):
    layers = []
    i = 0
    while f"layer{i}" in section:
        layers.append(parse_layer_line(section[f"layer{i}"], f"layer{i}"))
        i += 1
    stray = [k for k in section if k.startswith("layer")
             and k not in {f"layer{j}" for j in range(i)}]
    if stray:
        raise ConfigError(f"layer lines must be contiguous from layer0; "
                          f"found {', '.join(sorted(stray))} after layer{i - 1}")
    return layers


def _get(section, key, cast, where):
    raw = section.get(key, "")
    try:
        return cast(raw)
    except (ValueError, TypeError):
        raise ConfigError(f"[{where}] {key} = {raw!r} is not a valid "
                          f"{cast.__name__}") from None


def load_experiment_config(path=None, overrides=None):
    """Defaults, then the file at `path` (if any), then CLI overrides.

    overrides: optional dict with any of seed (sets both the split and
    train seeds), out, precision.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(DEFAULT_CONFIG_TEXT)
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
    unknown = set(parser.sections()) - {"dataset", "pipeline", "model",
                                        "train", "output"}
    if unknown:
        raise ConfigError(f"unknown config section(s): "
                          f"{', '.join(sorted(unknown))}")

    dataset = parser["dataset"]
    pipeline = parser["pipeline"]
    model = parser["model"]
    train = parser["train"]
    output = parser["output"]
    overrides = overrides or {}

    names = [n.strip() for n in dataset.get("class_names", "").split(",")
             if n.strip()]
    fractions = tuple(_get(pipeline, key, float, "pipeline")
                      for key in ("train_fraction", "val_fraction",
                                  "test_fraction"))
    config = ExperimentConfig(
        cube=dataset.get("cube", ""),
        labels=dataset.get("labels", ""),
        class_names=names,
        bands=_get(pipeline, "bands", int, "pipeline"),
        patch=_get(pipeline, "patch", int, "pipeline"),
        fractions=fractions,
        split_seed=int(overrides.get("seed",
                                     _get(pipeline, "split_seed", int, "pipeline"))),
        architecture=model.get("architecture", "scsnet").strip(),
        layers=_collect_layers(model),
        epochs=_get(train, "epochs", int, "train"),
        batch_size=_get(train, "batch_size", int, "train"),
        learning_rate=_get(train, "learning_rate", float, "train"),
        beta1=_get(train, "beta1", float, "train"),
        beta2=_get(train, "beta2", float, "train"),
        adam_eps=_get(train, "adam_eps", float, "train"),
        train_seed=int(overrides.get("seed", _get(train, "seed", int, "train"))),
        out_dir=str(overrides.get("out", output.get("dir", "out"))),
        precision=str(overrides.get("precision",
                                    output.get("precision", "f64"))),
    )
    return config
