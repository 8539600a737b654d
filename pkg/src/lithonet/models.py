"""The four CNN topologies, parameter counting and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .errors import CheckpointError, ShapeError, UsageError
from .layers import (
    GAP,
    SPP,
    Conv3x3,
    Dense,
    Dropout,
    Layer,
    MaxPool,
    PyramidSpec,
    ReLU,
    SoftmaxOutput,
    he_init,
)

VARIANTS = ("Model1", "Model2", "Model3", "Model4")
FIXED_INPUT = 256
# two 2x2 pools before the pyramid; 32 keeps every variant comfortably above the 4x4 grid
MIN_VARIABLE_INPUT = 32

CHECKPOINT_MAGIC = b"LITHONET-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


def normalize_variant(variant: Union[str, int]) -> str:
    if isinstance(variant, int) or (isinstance(variant, str) and variant.isdigit()):
        name = f"Model{int(variant)}"
    else:
        name = str(variant).strip()
        name = name[:1].upper() + name[1:]
    if name not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return name


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "Model2"
    filters: tuple[int, ...] = (64, 48, 32)
    dense_units: int = 200
    classes: int = 3
    drop_probability: float = 0.5
    levels: tuple[int, ...] = (1, 2, 4)
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "levels", tuple(int(g) for g in self.levels))

    @property
    def fixed_size(self) -> bool:
        return self.variant == "Model1"

    def check_input(self, height: int, width: int) -> None:
        if self.fixed_size:
            if (height, width) != (FIXED_INPUT, FIXED_INPUT):
                raise ShapeError(
                    f"{self.variant} only accepts {FIXED_INPUT}x{FIXED_INPUT} inputs, got "
                    f"{height}x{width}; resize the images first"
                )
        elif height < MIN_VARIABLE_INPUT or width < MIN_VARIABLE_INPUT:
            raise ShapeError(
                f"{self.variant} needs inputs of at least {MIN_VARIABLE_INPUT}x{MIN_VARIABLE_INPUT}, "
                f"got {height}x{width}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class ParamEntry:
    layer_id: str
    weight: np.ndarray
    bias: np.ndarray


ParamSet = list[ParamEntry]


def count_params(params: Iterable[ParamEntry]) -> int:
    return sum(p.weight.size + p.bias.size for p in params)


class Model:
    """A layer stack ending in a softmax over the classes."""

    def __init__(self, spec: ModelSpec, layers: list[Layer], seed: Optional[int] = None):
        self.spec = spec
        self.layers = layers
        self.seed = seed

    @property
    def parameterized(self) -> list[tuple[str, Layer]]:
        out = []
        counters: dict[str, int] = {}
        for layer in self.layers:
            if layer.params:
                prefix = "conv" if isinstance(layer, Conv3x3) else "dense"
                counters[prefix] = counters.get(prefix, 0) + 1
                out.append((f"{prefix}{counters[prefix]}", layer))
        return out

    def params(self) -> ParamSet:
        """Live views of the trainable arrays; mutating them updates the model."""
        return [ParamEntry(name, layer.weight, layer.bias) for name, layer in self.parameterized]

    def grads(self) -> ParamSet:
        return [ParamEntry(name, layer.grad_weight, layer.grad_bias) for name, layer in self.parameterized]

    def param_arrays(self) -> list[np.ndarray]:
        return [a for _, layer in self.parameterized for a in layer.params]

    def grad_arrays(self) -> list[np.ndarray]:
        return [a for _, layer in self.parameterized for a in layer.grads]

    def count_params(self) -> int:
        return count_params(self.params())

    def set_params(self, params: ParamSet) -> None:
        mine = self.params()
        if len(mine) != len(params):
            raise ShapeError(f"expected {len(mine)} parameter groups, got {len(params)}")
        for dst, src in zip(mine, params):
            if dst.weight.shape != src.weight.shape or dst.bias.shape != src.bias.shape:
                raise ShapeError(
                    f"{dst.layer_id}: shapes {src.weight.shape}/{src.bias.shape} do not match "
                    f"{dst.weight.shape}/{dst.bias.shape}"
                )
            dst.weight[...] = src.weight
            dst.bias[...] = src.bias

    def snapshot(self) -> ParamSet:
        return [ParamEntry(p.layer_id, p.weight.copy(), p.bias.copy()) for p in self.params()]

    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected (N, {self.spec.in_channels}, H, W) input, got {x.shape}")
        self.spec.check_input(x.shape[2], x.shape[3])
        return x

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Class probabilities ``(N, classes)``. Accepts ``(H, W)``, ``(C, H, W)`` or a batch."""
        out = self._as_batch(x)
        for layer in self.layers:
            out = layer.forward(out, train=train, rng=rng)
        return out

    def backward(self, grad: np.ndarray, from_logits: bool = False) -> np.ndarray:
        """Back-propagate and fill every layer's gradients.

        With ``from_logits`` the gradient is taken to be with respect to the
        softmax input and the output layer is skipped.
        """
        layers = self.layers
        if from_logits:
            layers[-1]._take_cache()
            layers = layers[:-1]
        for layer in reversed(layers):
            grad = layer.backward(grad)
        return grad

    def predict(self, x) -> np.ndarray:
        return self.forward(x, train=False).argmax(axis=-1)

    def summary(self) -> str:
        return " -> ".join(repr(layer) for layer in self.layers)


def build_layers(spec: ModelSpec) -> list[Layer]:
    f1, f2, f3 = spec.filters
    pyramid = PyramidSpec(spec.levels)
    layers: list[Layer] = [
        Conv3x3(spec.in_channels, f1), ReLU(), MaxPool(),
        Conv3x3(f1, f2), ReLU(), MaxPool(),
        Conv3x3(f2, f3), ReLU(),
    ]
    if spec.variant == "Model1":
        side = FIXED_INPUT // 8
        layers.append(MaxPool())
        features = f3 * side * side
    elif spec.variant == "Model2":
        layers.append(SPP(pyramid))
        features = f3 * pyramid.bins
    elif spec.variant == "Model3":
        layers.append(GAP())
        features = f3
    else:
        layers += [SPP(pyramid), GAP()]
        features = f3
    layers += [
        Dense(features, spec.dense_units), ReLU(), Dropout(spec.drop_probability),
        Dense(spec.dense_units, spec.classes), SoftmaxOutput(),
    ]
    layers[0].propagate = False
    return layers


def build(variant: Union[str, int, ModelSpec] = "Model2", seed: int = 0) -> Model:
    """Construct a variant with He-initialised weights drawn from ``seed``."""
    spec = variant if isinstance(variant, ModelSpec) else ModelSpec(variant=variant)
    layers = build_layers(spec)
    he_init(layers, np.random.default_rng(seed))
    return Model(spec, layers, seed=seed)


def save_checkpoint(model: Model, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
    """Write a text header line followed by all parameters as little-endian float64."""
    path = Path(path)
    params = model.params()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "dtype": "<f8",
        "layers": [
            {"id": p.layer_id, "weight": list(p.weight.shape), "bias": list(p.bias.shape)}
            for p in params
        ],
        "param_count": count_params(params),
    }
    if extra:
        header["extra"] = extra
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for p in params for a in (p.weight, p.bias)
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(blob)
    return path


def read_checkpoint_header(path: Union[str, Path]) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: magic: not a lithonet checkpoint")
    rest = data[len(CHECKPOINT_MAGIC):]
    newline = rest.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: header: missing header terminator")
    try:
        header = json.loads(rest[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header: corrupt JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header: expected an object")
    return header, rest[newline + 1:]


def load_checkpoint(path: Union[str, Path]) -> Model:
    """Rebuild the model recorded in ``path`` with its saved parameters."""
    header, blob = read_checkpoint_header(path)
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format_version: unsupported value {version!r}")
    raw_spec = header.get("spec")
    if not isinstance(raw_spec, dict):
        raise CheckpointError(f"{path}: spec: missing model description")
    try:
        spec = ModelSpec.from_dict(raw_spec)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: variant: {exc}") from exc
    model = Model(spec, build_layers(spec), seed=header.get("seed"))
    expected = [(p.layer_id, list(p.weight.shape), list(p.bias.shape)) for p in model.params()]
    try:
        declared = [(d["id"], list(d["weight"]), list(d["bias"])) for d in header["layers"]]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: layers: malformed layer table ({exc})") from exc
    if declared != expected:
        raise CheckpointError(f"{path}: layers: shapes {declared} do not match {spec.variant}")
    total = sum(math.prod(w) + math.prod(b) for _, w, b in declared)
    if len(blob) != 8 * total:
        raise CheckpointError(
            f"{path}: length: parameter blob holds {len(blob)} bytes, header declares {8 * total}"
        )
    flat = np.frombuffer(blob, dtype="<f8")
    offset = 0
    for array in model.param_arrays():
        array[...] = flat[offset:offset + array.size].reshape(array.shape)
        offset += array.size
    return model
