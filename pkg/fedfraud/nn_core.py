#!/usr/bin/env python3
"""
fedfraud Neural Network Core
Dense 3-layer binary classifier (ReLU, ReLU, sigmoid) with analytic gradients,
SGD and Adam steps, seeded minibatch training and canonical JSON serialization.

All arithmetic is float64. Parameter containers are immutable: every step
returns new arrays and the stored arrays are marked read-only.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from fedfraud.errors import ConfigError, DimensionError, EmptyDatasetError, ParamsFormatError
from fedfraud.seeding import make_rng

if TYPE_CHECKING:
    from fedfraud.data_pipeline import ProcessedDataset

logger = logging.getLogger(__name__)

# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log.
PROB_EPS = 1e-12
PARAMS_FORMAT = "fedfraud.params"
PARAMS_VERSION = 1
LAYER_COUNT = 3


@dataclass(frozen=True)
class ModelConfig:
    """Shape and initialization seed of the 3-layer network."""
    input_dim: int
    hidden1: int = 64
    hidden2: int = 32
    output: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden1 < 1 or self.hidden2 < 1:
            raise ConfigError("input_dim and hidden sizes must be >= 1")
        if self.output != 1:
            raise ConfigError("output layer size is fixed at 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def layer_shapes(self) -> List[Tuple[Tuple[int, int], Tuple[int]]]:
        dims = [self.input_dim, self.hidden1, self.hidden2, self.output]
        return [((dims[i], dims[i + 1]), (dims[i + 1],)) for i in range(LAYER_COUNT)]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid model_config: {e}") from e


@dataclass(frozen=True)
class TrainingConfig:
    """Local optimization settings."""
    learning_rate: float = 0.001
    epochs: int = 2
    batch_size: int = 32
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be a positive finite number")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}' (expected sgd or adam)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ConfigError("adam betas must lie in [0, 1) and epsilon must be positive")
        if not 0 <= self.shuffle_seed < 2 ** 64:
            raise ConfigError("shuffle_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainingConfig":
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid training config: {e}") from e


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Layer:
    """One dense layer: ``weight`` is (fan_in, fan_out), ``bias`` is (fan_out,)."""
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.ndim != 2 or self.bias.ndim != 1 or self.weight.shape[1] != self.bias.shape[0]:
            raise DimensionError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")


@dataclass(frozen=True)
class ModelParams:
    """Ordered layers of the network (the global or local weights W)."""
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) != LAYER_COUNT:
            raise DimensionError(f"expected {LAYER_COUNT} layers, got {len(layers)}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise DimensionError("layer shapes do not chain")
        if layers[-1].weight.shape[1] != 1:
            raise DimensionError("output layer must have exactly one unit")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ParamsFormatError("parameters contain NaN or Inf", reason="nonfinite_params")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    def arrays(self) -> List[np.ndarray]:
        """Flat list in canonical order: W1, b1, W2, b2, W3, b3."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def shapes(self) -> List[Tuple[int, ...]]:
        return [a.shape for a in self.arrays()]

    def model_config(self, seed: int = 0) -> ModelConfig:
        return ModelConfig(
            input_dim=self.input_dim,
            hidden1=self.layers[0].weight.shape[1],
            hidden2=self.layers[1].weight.shape[1],
            seed=seed,
        )

    def matches(self, config: ModelConfig) -> bool:
        expected = []
        for w_shape, b_shape in config.layer_shapes():
            expected.extend([w_shape, b_shape])
        return self.shapes() == expected

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of all arrays."""
        return self.shapes() == other.shapes() and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ModelParams":
        if len(arrays) != 2 * LAYER_COUNT:
            raise DimensionError(f"expected {2 * LAYER_COUNT} arrays, got {len(arrays)}")
        return cls(tuple(Layer(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)))


@dataclass(frozen=True)
class Gradients:
    """Gradient arrays, same canonical order and shapes as ``ModelParams.arrays()``."""
    arrays: Tuple[np.ndarray, ...]

    def norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(g * g)) for g in self.arrays)))


@dataclass
class AdamState:
    """First/second moment accumulators and step counter."""
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in params.arrays()],
            v=[np.zeros_like(a) for a in params.arrays()],
            t=0,
        )


def _check_congruent(params: ModelParams, arrays: Sequence[np.ndarray], what: str):
    if [np.shape(a) for a in arrays] != params.shapes():
        raise DimensionError(f"{what} are not shape-congruent with the parameters")


def init_model(config: ModelConfig) -> ModelParams:
    """Xavier-uniform weights from a generator seeded by ``config.seed``; zero biases."""
    rng = make_rng(config.seed)
    layers = []
    for (fan_in, fan_out), bias_shape in config.layer_shapes():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(Layer(weight, np.zeros(bias_shape)))
    return ModelParams(tuple(layers))


def _as_batch(params: ModelParams, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"batch shape {x.shape} does not match input_dim {params.input_dim}")
    return x


def _forward_cache(params: ModelParams, x: np.ndarray):
    """Pre-activations and activations of every layer; last entry is the raw sigmoid."""
    w1, w2, w3 = (layer.weight for layer in params.layers)
    b1, b2, b3 = (layer.bias for layer in params.layers)
    z1 = x @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2 + b2
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ w3 + b3
    p = expit(z3[:, 0])
    return z1, a1, z2, a2, p


def forward(params: ModelParams, batch) -> np.ndarray:
    """Probabilities of the positive (fraud) class, one per row, strictly inside (0, 1)."""
    x = _as_batch(params, batch)
    p = _forward_cache(params, x)[-1]
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def predict_labels(params: ModelParams, batch, threshold: float = 0.5) -> np.ndarray:
    return (forward(params, batch) >= threshold).astype(np.int64)


def _as_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"{n} predictions but {y.shape[0]} labels")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DimensionError("labels must be 0 or 1")
    return y


def bce_loss(probabilities, labels) -> float:
    """Mean binary cross-entropy with probabilities clamped before the log."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = _as_labels(labels, p.shape[0])
    if p.shape[0] == 0:
        return 0.0
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def backward(params: ModelParams, batch, labels) -> Tuple[float, Gradients]:
    """Loss and analytic gradients of mean BCE.

    ReLU'(0) is 0. A row saturated on the side of its label sits on the flat
    part of the clamped loss and contributes no gradient; a row saturated on
    the wrong side keeps the logit gradient p - y.
    """
    x = _as_batch(params, batch)
    n = x.shape[0]
    if n == 0:
        raise EmptyDatasetError("cannot differentiate over an empty batch")
    y = _as_labels(labels, n)
    z1, a1, z2, a2, p = _forward_cache(params, x)
    loss = bce_loss(p, y)

    settled = ((p >= 1.0 - PROB_EPS) & (y == 1.0)) | ((p <= PROB_EPS) & (y == 0.0))
    dz3 = (np.where(settled, 0.0, p - y) / n)[:, None]
    w2, w3 = params.layers[1].weight, params.layers[2].weight

    dw3 = a2.T @ dz3
    db3 = dz3.sum(axis=0)
    dz2 = (dz3 @ w3.T) * (z2 > 0.0)
    dw2 = a1.T @ dz2
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w2.T) * (z1 > 0.0)
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    return loss, Gradients((dw1, db1, dw2, db2, dw3, db3))


def sgd_step(params: ModelParams, grads: Gradients, learning_rate: float) -> ModelParams:
    """W_{t+1} = W_t - eta * grad."""
    _check_congruent(params, grads.arrays, "gradients")
    return ModelParams.from_arrays([w - learning_rate * g for w, g in zip(params.arrays(), grads.arrays)])


def adam_step(params: ModelParams, grads: Gradients, state: AdamState,
              cfg: TrainingConfig) -> Tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update. Returns new params and a new state."""
    _check_congruent(params, grads.arrays, "gradients")
    _check_congruent(params, state.m, "adam moments")
    _check_congruent(params, state.v, "adam moments")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_arrays, new_m, new_v = [], [], []
    for w, g, m, v in zip(params.arrays(), grads.arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_arrays.append(w - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon))
        new_m.append(m)
        new_v.append(v)
    return ModelParams.from_arrays(new_arrays), AdamState(m=new_m, v=new_v, t=t)


def train_local(params: ModelParams, dataset: "ProcessedDataset",
                cfg: TrainingConfig) -> Tuple[ModelParams, List[float]]:
    """Run ``cfg.epochs`` passes of shuffled minibatch updates.

    The final short batch is kept. The shuffle generator is seeded once per
    call from ``cfg.shuffle_seed``; Adam state starts fresh.
    """
    n = dataset.n_samples
    if n == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    x, y = dataset.features, dataset.labels
    rng = make_rng(cfg.shuffle_seed)
    state = AdamState.zeros_like(params)
    epoch_losses = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = backward(params, x[idx], y[idx])
            total += loss * len(idx)
            if cfg.optimizer == "adam":
                params, state = adam_step(params, grads, state, cfg)
            else:
                params = sgd_step(params, grads, cfg.learning_rate)
        epoch_losses.append(total / n)
        logger.debug("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, epoch_losses[-1])

    return params, epoch_losses


# Serialization

def params_to_payload(params: ModelParams) -> Dict[str, Any]:
    """Wire/file representation: layer-major, row-major, weights before bias."""
    return {
        "layers": [
            {
                "weight_shape": list(layer.weight.shape),
                "weight": layer.weight.reshape(-1).tolist(),
                "bias_shape": list(layer.bias.shape),
                "bias": layer.bias.tolist(),
            }
            for layer in params.layers
        ]
    }


def _array_from(entry: Dict[str, Any], key: str) -> np.ndarray:
    shape = entry.get(f"{key}_shape")
    values = entry.get(key)
    if not isinstance(shape, list) or not isinstance(values, list):
        raise ParamsFormatError(f"layer is missing '{key}' or '{key}_shape'", reason="malformed")
    if not all(isinstance(s, int) and s >= 1 for s in shape):
        raise ParamsFormatError(f"invalid {key}_shape {shape}", reason="shape_mismatch")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise ParamsFormatError(f"non-numeric entry in '{key}'", reason="malformed")
    array = np.asarray(values, dtype=np.float64)
    if array.size != int(np.prod(shape)):
        raise ParamsFormatError(
            f"'{key}' has {array.size} values for shape {shape}", reason="shape_mismatch")
    if not np.all(np.isfinite(array)):
        raise ParamsFormatError(f"'{key}' contains NaN or Inf", reason="nonfinite_params")
    return array.reshape(shape)


def params_from_payload(payload: Dict[str, Any], model_config: Optional[ModelConfig] = None) -> ModelParams:
    """Inverse of ``params_to_payload``; optionally checks shapes against a config."""
    layers = payload.get("layers") if isinstance(payload, dict) else None
    if not isinstance(layers, list):
        raise ParamsFormatError("payload has no 'layers' list", reason="malformed")
    arrays = []
    for entry in layers:
        if not isinstance(entry, dict):
            raise ParamsFormatError("layer entry is not an object", reason="malformed")
        arrays.extend([_array_from(entry, "weight"), _array_from(entry, "bias")])
    try:
        params = ModelParams.from_arrays(arrays)
    except DimensionError as e:
        raise ParamsFormatError(str(e), reason="shape_mismatch") from e
    if model_config is not None and not params.matches(model_config):
        raise ParamsFormatError("parameter shapes do not match model_config", reason="shape_mismatch")
    return params


def serialize_params(params: ModelParams, model_config: Optional[ModelConfig] = None) -> bytes:
    """Canonical params document. Floats use shortest round-trip repr (<= 17 digits)."""
    config = model_config or params.model_config()
    if not params.matches(config):
        raise DimensionError("params do not match the given model_config")
    document = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "model_config": asdict(config),
        **params_to_payload(params),
    }
    return json.dumps(document, allow_nan=False).encode("utf-8")


def deserialize_params_document(data: Union[bytes, str]) -> Tuple[ModelParams, ModelConfig]:
    try:
        document = json.loads(data)
    except (ValueError, UnicodeDecodeError) as e:
        raise ParamsFormatError(f"cannot parse params document: {e}", reason="malformed") from e
    if not isinstance(document, dict) or document.get("format") != PARAMS_FORMAT:
        raise ParamsFormatError("not a fedfraud params document", reason="malformed")
    if document.get("version") != PARAMS_VERSION:
        raise ParamsFormatError(f"unsupported params version {document.get('version')}", reason="malformed")
    config_data = document.get("model_config")
    if not isinstance(config_data, dict):
        raise ParamsFormatError("missing model_config", reason="malformed")
    try:
        config = ModelConfig.from_dict(config_data)
    except ConfigError as e:
        raise ParamsFormatError(str(e), reason="malformed") from e
    return params_from_payload(document, config), config


def deserialize_params(data: Union[bytes, str]) -> ModelParams:
    return deserialize_params_document(data)[0]


def save_params(path: Union[str, Path], params: ModelParams, model_config: Optional[ModelConfig] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_params(params, model_config))
    return path


def load_params(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Params file not found: {path}")
    return deserialize_params(path.read_bytes())
