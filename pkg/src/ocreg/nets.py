"""MLP backbone, bias-free prototype classifier, SGD with momentum, checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError, FormatError, ShapeError

CKPT_MAGIC = b"OCRCKPT1"


class Backbone:
    """Fully connected ReLU network; no activation after the last layer."""

    def __init__(self, layers: list[tuple[Parameter, Parameter]]):
        for (w1, _), (w2, _) in zip(layers, layers[1:]):
            if w1.shape[0] != w2.shape[1]:
                raise ShapeError(f"layer dims do not chain: {w1.shape} then {w2.shape}")
        self.layers = layers

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer]

    def layer_forward(self, i: int, h: Tensor) -> Tensor:
        w, b = self.layers[i]
        out = ad.add(ad.matmul(h, ad.transpose(w)), ad.tile_rows(b, h.shape[0]))
        if i < len(self.layers) - 1:
            out = ad.relu(out)
        return out

    def forward(self, x: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
        """Run layers ``start..stop-1``; the defaults run the whole network."""
        if x.data.ndim != 2 or x.shape[1] != self.layers[start][0].shape[1]:
            raise ShapeError(f"backbone layer {start} expects [b, {self.layers[start][0].shape[1]}], got {x.shape}")
        stop = len(self.layers) if stop is None else stop
        h = x
        for i in range(start, stop):
            h = self.layer_forward(i, h)
        return h

    __call__ = forward


class PrototypeHead:
    """Logits are inner products between a representation and class prototypes."""

    def __init__(self, prototypes: Parameter):
        if prototypes.data.ndim != 2 or prototypes.shape[0] < 2:
            raise ShapeError(f"prototypes must be [C>=2, d], got {prototypes.shape}")
        self.prototypes = prototypes

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.prototypes]

    def forward(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.prototypes.shape[1]:
            raise ShapeError(f"head expects [b, {self.prototypes.shape[1]}], got {z.shape}")
        return ad.matmul(z, ad.transpose(self.prototypes))

    __call__ = forward


def mlp_init(dims: list[int], seed: int) -> Backbone:
    """He-style uniform fan-in init, zero biases; fully determined by ``seed``."""
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least input and output dims")
    if any(int(d) <= 0 for d in dims):
        raise ConfigError(f"dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / fan_in)
        w = Parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)), f"backbone.{i}.weight")
        b = Parameter(np.zeros(fan_out), f"backbone.{i}.bias")
        layers.append((w, b))
    return Backbone(layers)


def head_init(num_classes: int, dim: int, seed: int) -> PrototypeHead:
    if num_classes < 2 or dim <= 0:
        raise ConfigError(f"head needs C>=2 and d>0, got C={num_classes}, d={dim}")
    rng = np.random.default_rng([seed, 1])
    bound = 1.0 / np.sqrt(dim)
    return PrototypeHead(Parameter(rng.uniform(-bound, bound, size=(num_classes, dim)), "head.prototypes"))


class Model:
    """h = F(G(x)) with a fixed input shift so pixels in [0,1] enter centred.

    Representation levels are named ``input``, ``hidden1`` ... and ``repr`` (the
    backbone output, i.e. the input of the head).
    """

    def __init__(self, backbone: Backbone, head: PrototypeHead, input_shift: float = 0.5):
        if backbone.out_dim != head.prototypes.shape[1]:
            raise ShapeError("backbone output dim does not match head")
        self.backbone = backbone
        self.head = head
        self.input_shift = input_shift

    @classmethod
    def create(cls, dims: list[int], num_classes: int, seed: int) -> "Model":
        return cls(mlp_init(dims, seed), head_init(num_classes, dims[-1], seed))

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def parameters(self) -> list[Parameter]:
        return self.backbone.parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def level_names(self) -> list[str]:
        n = len(self.backbone.layers)
        return ["input"] + [f"hidden{i}" for i in range(1, n)] + ["repr"]

    def level_index(self, level: str) -> int:
        names = self.level_names()
        if level == "penultimate":
            level = "repr"
        if level not in names:
            raise ConfigError(f"unknown layer {level!r}; valid names: {', '.join(names)}")
        return names.index(level)

    def prepare(self, images: np.ndarray, requires_grad: bool = False) -> Tensor:
        """Flatten ``[b, 3, h, w]`` pixels into the network input."""
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1) - self.input_shift
        return Tensor(x, requires_grad=requires_grad)

    def features(self, x: Tensor, level: str = "repr") -> Tensor:
        k = self.level_index(level)
        return self.backbone.forward(x, 0, k) if k else x

    def logits_from(self, h: Tensor, level: str = "repr") -> Tensor:
        """Finish the forward pass from a representation at ``level``."""
        k = self.level_index(level)
        if k < len(self.backbone.layers):
            h = self.backbone.forward(h, k)
        return self.head(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.backbone(x))

    __call__ = forward

    def predict_logits(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = [self.forward(self.prepare(images[i:i + batch_size])).data
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.num_classes))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise FormatError(f"checkpoint parameters {sorted(state)} do not match model {sorted(params)}")
        for name, value in state.items():
            if value.shape != params[name].shape:
                raise FormatError(f"{name}: checkpoint shape {value.shape} vs model {params[name].shape}")
            params[name].data = np.array(value, dtype=np.float64)
            params[name].zero_grad()
            params[name].velocity = np.zeros_like(params[name].data)

    def clone(self) -> "Model":
        dims = self.backbone.dims
        m = Model.create(dims, self.num_classes, 0)
        m.input_shift = self.input_shift
        m.load_state_dict(self.state_dict())
        return m


@dataclass
class SGD:
    """SGD with heavy-ball momentum and L2 weight decay; buffers live on the parameters."""

    params: list[Parameter]
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")

    def step(self) -> None:
        sgd_step(self, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(state: SGD, params: Iterable[Parameter], grads: Iterable[np.ndarray] | None = None) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v. Grads are left in place."""
    params = list(params)
    grads = [p.grad for p in params] if grads is None else list(grads)
    for p, g in zip(params, grads):
        if g is None:
            raise ContractError(f"parameter {getattr(p, 'name', '?')} has no gradient")
        if p.velocity.shape != p.shape:
            raise ContractError(f"momentum buffer shape mismatch for {p.name}")
        p.velocity = state.momentum * p.velocity + (g + state.weight_decay * p.data)
        p.data = p.data - state.lr * p.velocity


# -- checkpoint file ----------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """Write ``OCRCKPT1`` then per parameter: u32 name len, name, u32 ndim, u32 dims, f64 values."""
    chunks = [CKPT_MAGIC]
    for p in model.parameters():
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)) + name)
        chunks.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"bad magic: expected {CKPT_MAGIC!r}, found {buf[:8]!r}", 0)
    pos = 8
    state: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    while pos < len(buf):
        start = pos
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", start + 4) from None
        (ndim,) = struct.unpack("<I", take(4))
        if ndim > 8:
            raise FormatError(f"implausible dimension count {ndim}", pos - 4)
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if name in state:
            raise FormatError(f"duplicate parameter {name!r}", start)
        state[name] = values.reshape(dims)
    return state


def load_checkpoint(path, num_classes: int | None = None) -> Model:
    """Rebuild a model from a checkpoint; architecture is inferred from the shapes."""
    state = read_checkpoint(path)
    n = sum(1 for k in state if k.endswith(".weight"))
    try:
        weights = [state[f"backbone.{i}.weight"] for i in range(n)]
        protos = state["head.prototypes"]
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing parameter {exc}") from None
    dims = [weights[0].shape[1]] + [w.shape[0] for w in weights]
    model = Model.create(dims, protos.shape[0], 0)
    model.load_state_dict(state)
    if num_classes is not None and model.num_classes != num_classes:
        raise FormatError(f"checkpoint has {model.num_classes} classes, expected {num_classes}")
    return model
