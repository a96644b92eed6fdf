"""Encoder/head models ``f(x) = head(encoder(x))`` with a freezable encoder."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

ACTIVATIONS = {"relu": ad.relu, "gelu": ad.gelu}


class SpecError(ValueError):
    pass


@dataclass
class EncoderSpec:
    input_dim: int
    hidden_widths: list[int]
    output_dim: int
    activation: str = "relu"

    def validate(self) -> None:
        if not self.hidden_widths:
            raise SpecError("encoder needs at least one hidden layer")
        widths = [self.input_dim, *self.hidden_widths, self.output_dim]
        if any(int(w) < 1 for w in widths):
            raise SpecError(f"zero-width layer in encoder spec {widths}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.output_dim]


@dataclass
class HeadSpec:
    kind: str
    n_in: int
    n_out: int
    n_hidden: int | None = None
    activation: str = "relu"

    def validate(self) -> None:
        if self.kind not in ("linear", "mlp"):
            raise SpecError(f"unknown head kind {self.kind!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise SpecError("head dimensions must be positive")
        if self.kind == "mlp" and (self.n_hidden is None or self.n_hidden < 1):
            raise SpecError("mlp head needs a positive n_hidden")

    @property
    def layer_dims(self) -> list[int]:
        if self.kind == "linear":
            return [self.n_in, self.n_out]
        return [self.n_in, self.n_hidden, self.n_out]


def head_hidden_size(n_in: int, n_out: int, regime: str) -> int:
    """Hidden width of an MLP head: ``n_in`` for students, ``sqrt(n_in*n_out)`` for large teachers."""
    if regime == "student":
        return n_in
    if regime == "large-teacher":
        return max(1, round(math.sqrt(n_in * n_out)))
    raise SpecError(f"unknown head regime {regime!r}")


def _init_affine(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


class MLP:
    """Stack of affine layers with an activation between consecutive layers."""

    def __init__(self, dims: list[int], activation: str, seed: int):
        rng = np.random.default_rng(seed)
        self.dims = list(dims)
        self.activation = activation
        self.params: list[Tensor] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w, b = _init_affine(rng, fan_in, fan_out)
            self.params.append(Tensor(w, requires_grad=True))
            self.params.append(Tensor(b, requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.dims[0]:
            raise DimensionError(f"expected input of width {self.dims[0]}, got shape {x.shape}")
        act = ACTIVATIONS[self.activation]
        n_layers = len(self.params) // 2
        h = x
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = ad.add(ad.matmul(h, w), b)
            if i < n_layers - 1:
                h = act(h)
        return h

    @property
    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params]))


class Encoder(MLP):
    def __init__(self, spec: EncoderSpec, seed: int):
        spec.validate()
        self.spec = spec
        self.seed = seed
        super().__init__(spec.layer_dims, spec.activation, seed)


class Head(MLP):
    def __init__(self, spec: HeadSpec, seed: int):
        spec.validate()
        self.spec = spec
        self.seed = seed
        super().__init__(spec.layer_dims, spec.activation, seed)


def build_encoder(spec: EncoderSpec, seed: int) -> Encoder:
    return Encoder(spec, seed)


def build_head(spec: HeadSpec, seed: int) -> Head:
    return Head(spec, seed)


@dataclass
class Model:
    encoder: Encoder
    head: Head
    encoder_frozen: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.spec.output_dim != self.head.spec.n_in:
            raise DimensionError(
                f"encoder output {self.encoder.spec.output_dim} != head input {self.head.spec.n_in}"
            )
        set_frozen(self, self.encoder_frozen)

    @property
    def num_classes(self) -> int:
        return self.head.spec.n_out

    @property
    def parameters(self) -> list[Tensor]:
        return self.encoder.params + self.head.params

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters if p.requires_grad]

    def embed(self, x) -> Tensor:
        return self.encoder(x if isinstance(x, Tensor) else Tensor(x))

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def forward(model: Model, batch) -> Tensor:
    """Logits for a ``(b, d_in)`` batch."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    return model.head(model.encoder(x))


def set_frozen(model: Model, frozen: bool) -> Model:
    model.encoder_frozen = bool(frozen)
    for p in model.encoder.params:
        p.requires_grad = not frozen
        p.grad = None
    return model


def checksum(params) -> str:
    """SHA-256 over the raw bytes of a parameter list (or a model/encoder)."""
    if hasattr(params, "params"):
        params = params.params
    elif isinstance(params, Model):
        params = params.parameters
    h = hashlib.sha256()
    for p in params:
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def model_checksum(model: Model) -> str:
    return checksum(model.parameters)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(obj: Model | Encoder, path: str | Path) -> Path:
    """Write a model or a bare encoder to an ``.npz`` container.

    Specs and seeds travel in a JSON header; arrays are stored verbatim so a
    round trip is bit-exact.
    """
    path = Path(path)
    if isinstance(obj, Model):
        header = {
            "type": "model",
            "encoder": asdict(obj.encoder.spec),
            "encoder_seed": obj.encoder.seed,
            "head": asdict(obj.head.spec),
            "head_seed": obj.head.seed,
            "encoder_frozen": obj.encoder_frozen,
            "meta": obj.meta,
        }
        params = obj.parameters
    else:
        header = {"type": "encoder", "encoder": asdict(obj.spec), "encoder_seed": obj.seed}
        params = obj.params
    arrays = {f"p{i:03d}": p.data for i, p in enumerate(params)}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: str | Path) -> Model | Encoder:
    with np.load(Path(path), allow_pickle=False) as npz:
        header = json.loads(str(npz["header"]))
        arrays = [npz[k] for k in sorted(k for k in npz.files if k.startswith("p"))]
    encoder = Encoder(EncoderSpec(**header["encoder"]), header["encoder_seed"])
    if header["type"] == "encoder":
        params = encoder.params
        result: Model | Encoder = encoder
    else:
        head = Head(HeadSpec(**header["head"]), header["head_seed"])
        result = Model(encoder, head, header["encoder_frozen"], header.get("meta", {}))
        params = result.parameters
    if len(arrays) != len(params):
        raise SpecError(f"checkpoint holds {len(arrays)} arrays, spec expects {len(params)}")
    for p, arr in zip(params, arrays):
        if arr.shape != p.shape:
            raise SpecError(f"checkpoint array shape {arr.shape} != expected {p.shape}")
        p.data = arr.astype(np.float64, copy=True)
    return result
