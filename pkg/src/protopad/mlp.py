"""Trainable embedding function: a small MLP with exact analytic gradients.

The network is a chain of affine layers with ReLU or Tanh hidden activations
and an identity output layer, evaluated in float64. Forward passes retain the
per-layer inputs and pre-activations so backward passes can return exact
parameter gradients without any autodiff dependency.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError

CHECKPOINT_MAGIC = "protopad-ckpt v1"


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


@dataclass(frozen=True)
class EmbeddingConfig:
    """Shape and initialization scheme of the embedding network."""

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    output_dim: int = 64
    activation: Activation = Activation.RELU
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "activation", Activation(self.activation))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise DataError(f"all layer dimensions must be positive, got {dims}")

    @property
    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        """(fan_in, fan_out) per layer, input to output."""
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return tuple((dims[i], dims[i + 1]) for i in range(len(dims) - 1))


@dataclass(frozen=True)
class MlpParameters:
    """Per-layer weight matrices (fan_out x fan_in) and bias vectors."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DataError("parameters need one weight and one bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DataError(f"layer {i}: weight {w.shape} and bias {b.shape} do not chain")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DataError(
                    f"layer {i}: fan_in {w.shape[1]} does not match previous fan_out "
                    f"{self.weights[i - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataError(f"layer {i}: non-finite parameter values")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def n_layers(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class ForwardCache:
    """Per-layer inputs and pre-activations retained from one forward pass."""

    layer_inputs: tuple[np.ndarray, ...]
    pre_activations: tuple[np.ndarray, ...]


def init_parameters(cfg: EmbeddingConfig) -> MlpParameters:
    """Fan-in-scaled zero-mean Gaussian weights, zero biases, seeded.

    Scale is sqrt(2/fan_in) for ReLU and sqrt(1/fan_in) for Tanh.
    """
    rng = np.random.default_rng(cfg.seed)
    weights = []
    biases = []
    for fan_in, fan_out in cfg.layer_dims:
        gain = 2.0 if cfg.activation is Activation.RELU else 1.0
        scale = np.sqrt(gain / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParameters(tuple(weights), tuple(biases))


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def embed_forward_batch(
    params: MlpParameters, x: np.ndarray, activation: Activation
) -> tuple[np.ndarray, ForwardCache]:
    """Embed a batch of row vectors; returns (n, output_dim) plus the cache.

    Hidden layers apply the configured activation; the output layer is
    identity so prototypes live in an unconstrained space.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DataError(f"input has shape {x.shape}, expected (n, {params.input_dim})")
    h = x
    layer_inputs = []
    pre_activations = []
    last = params.n_layers() - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w.T + b
        pre_activations.append(z)
        h = z if i == last else _activate(z, activation)
    return h, ForwardCache(tuple(layer_inputs), tuple(pre_activations))


def embed_forward(
    params: MlpParameters, x: np.ndarray, activation: Activation
) -> tuple[np.ndarray, ForwardCache]:
    """Embed a single feature vector; returns (output_dim,) plus the cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"expected a 1-D input vector, got shape {x.shape}")
    out, cache = embed_forward_batch(params, x[None, :], activation)
    return out[0], cache


def embed_backward(
    params: MlpParameters,
    cache: ForwardCache,
    grad_wrt_embedding: np.ndarray,
    activation: Activation,
) -> MlpParameters:
    """Exact parameter gradients given the gradient at the embedding output.

    *grad_wrt_embedding* is (n, output_dim) for a batch cache or
    (output_dim,) for a single-vector cache; gradients are summed over the
    batch. The return value mirrors MlpParameters layer by layer.
    """
    g = np.asarray(grad_wrt_embedding, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    n_cached = cache.layer_inputs[0].shape[0]
    if g.shape != (n_cached, params.output_dim):
        raise DataError(
            f"gradient has shape {grad_wrt_embedding.shape}, expected "
            f"({n_cached}, {params.output_dim})"
        )
    grad_w: list[np.ndarray] = [np.empty(0)] * params.n_layers()
    grad_b: list[np.ndarray] = [np.empty(0)] * params.n_layers()
    for i in range(params.n_layers() - 1, -1, -1):
        grad_w[i] = g.T @ cache.layer_inputs[i]
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i]) * _activate_grad(cache.pre_activations[i - 1], activation)
    return MlpParameters(tuple(grad_w), tuple(grad_b))


def save_checkpoint(params: MlpParameters, cfg: EmbeddingConfig, path: str | Path) -> None:
    """Write a versioned, self-describing text checkpoint.

    Floats use shortest round-trip repr, so load_checkpoint reproduces the
    parameters bit for bit.
    """
    lines = [CHECKPOINT_MAGIC]
    lines.append(f"input_dim {cfg.input_dim}")
    hidden = ",".join(str(h) for h in cfg.hidden_dims) if cfg.hidden_dims else "-"
    lines.append(f"hidden_dims {hidden}")
    lines.append(f"output_dim {cfg.output_dim}")
    lines.append(f"activation {cfg.activation.value}")
    lines.append(f"seed {cfg.seed}")
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        lines.append(f"layer {i} weight {w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(f"layer {i} bias {b.shape[0]}")
        lines.append(" ".join(repr(float(v)) for v in b))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[MlpParameters, EmbeddingConfig]:
    """Load a checkpoint written by save_checkpoint.

    Raises:
        DataError: missing file, wrong magic line, or a truncated/corrupt
            section (named in the message).
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    it = iter(lines)

    def take(section: str) -> str:
        try:
            return next(it)
        except StopIteration:
            raise DataError(f"checkpoint {path} is truncated: missing {section}") from None

    if take("magic line") != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path} does not start with '{CHECKPOINT_MAGIC}'")

    header: dict[str, str] = {}
    for key in ("input_dim", "hidden_dims", "output_dim", "activation", "seed"):
        line = take(f"'{key}' header")
        parts = line.split(maxsplit=1)
        if len(parts) != 2 or parts[0] != key:
            raise DataError(f"checkpoint {path}: expected '{key} ...' header, got {line!r}")
        header[key] = parts[1]
    hidden = () if header["hidden_dims"] == "-" else tuple(
        int(h) for h in header["hidden_dims"].split(",")
    )
    try:
        cfg = EmbeddingConfig(
            input_dim=int(header["input_dim"]),
            hidden_dims=hidden,
            output_dim=int(header["output_dim"]),
            activation=Activation(header["activation"]),
            seed=int(header["seed"]),
        )
    except ValueError as exc:
        raise DataError(f"checkpoint {path}: bad header value ({exc})") from exc

    def parse_floats(line: str, count: int, section: str) -> np.ndarray:
        values = line.split()
        if len(values) != count:
            raise DataError(
                f"checkpoint {path}: {section} expected {count} values, got {len(values)}"
            )
        try:
            return np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"checkpoint {path}: {section} has a bad float ({exc})") from exc

    weights = []
    biases = []
    for i, (fan_in, fan_out) in enumerate(cfg.layer_dims):
        tag = take(f"'layer {i} weight' section")
        if tag != f"layer {i} weight {fan_out} {fan_in}":
            raise DataError(f"checkpoint {path}: expected 'layer {i} weight {fan_out} {fan_in}', got {tag!r}")
        rows = [
            parse_floats(take(f"layer {i} weight row {r}"), fan_in, f"layer {i} weight row {r}")
            for r in range(fan_out)
        ]
        weights.append(np.stack(rows))
        tag = take(f"'layer {i} bias' section")
        if tag != f"layer {i} bias {fan_out}":
            raise DataError(f"checkpoint {path}: expected 'layer {i} bias {fan_out}', got {tag!r}")
        biases.append(parse_floats(take(f"layer {i} bias values"), fan_out, f"layer {i} bias"))
    if take("'end' marker") != "end":
        raise DataError(f"checkpoint {path} is missing its 'end' marker")
    return MlpParameters(tuple(weights), tuple(biases)), cfg


def zeros_like(params: MlpParameters) -> MlpParameters:
    return MlpParameters(
        tuple(np.zeros_like(w) for w in params.weights),
        tuple(np.zeros_like(b) for b in params.biases),
    )


def add_scaled(params: MlpParameters, other: MlpParameters, scale: float) -> MlpParameters:
    """params + scale * other, layer by layer."""
    return MlpParameters(
        tuple(w + scale * ow for w, ow in zip(params.weights, other.weights)),
        tuple(b + scale * ob for b, ob in zip(params.biases, other.biases)),
    )


def flatten(params: MlpParameters) -> np.ndarray:
    """All parameters as one vector (weights row-major, bias after each layer)."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(vector: np.ndarray, template: MlpParameters) -> MlpParameters:
    """Inverse of flatten, using *template* for the layer shapes."""
    weights = []
    biases = []
    offset = 0
    for w, b in zip(template.weights, template.biases):
        weights.append(vector[offset : offset + w.size].reshape(w.shape).copy())
        offset += w.size
        biases.append(vector[offset : offset + b.size].copy())
        offset += b.size
    if offset != vector.size:
        raise DataError(f"vector has {vector.size} entries, template needs {offset}")
    return MlpParameters(tuple(weights), tuple(biases))
