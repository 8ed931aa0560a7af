"""Model container and factories for the four architecture families.

Families:

* ``fbf-cnn``    frame-by-frame CNN,
  ``C(64,5,1) -> P -> C(32,5,1) -> P -> FC(1000) -> Softmax(2)``
* ``cnn-lstm``   time-distributed CNN trunk feeding an LSTM,
  ``C(16,3,1) -> C(16,3,1) -> P -> D -> FC(200) -> FC(50) -> LSTM(q,20) -> Softmax(2)``
* ``ft-softmax`` dense softmax over externally computed frame features
* ``ft-lstm``    LSTM(q,20) over a feature sequence, then softmax

Semantic mask transfer is not a family of its own: it is the ``masked``
input mode of ``fbf-cnn`` or ``cnn-lstm``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, TimeDistributed
from .lstm import LSTMCell

FAMILIES = ("fbf-cnn", "cnn-lstm", "ft-softmax", "ft-lstm")
FRAME_FAMILIES = ("fbf-cnn", "ft-softmax")
INPUT_MODES = ("raw", "masked", "features")
RISKY = 1  # index of the risky class in the softmax output

LSTM_HIDDEN = 20
FEATURE_DIM = 50
DROPOUT_P = 0.2

_DISPLAY = {
    ("fbf-cnn", "raw"): "FbF CNN",
    ("fbf-cnn", "masked"): "FbF SMT+CNN",
    ("cnn-lstm", "raw"): "CNN+LSTM",
    ("cnn-lstm", "masked"): "SMT+CNN+LSTM",
    ("ft-softmax", "features"): "FbF FT",
    ("ft-lstm", "features"): "FT+LSTM",
}


def _as_resolution(resolution) -> tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    h, w = resolution
    return int(h), int(w)


@dataclass(frozen=True)
class ModelSpec:
    """What to build. ``T`` is the number of frames the network consumes."""

    family: str
    input_mode: str = "raw"
    T: int = 1
    resolution: tuple[int, int] = (32, 32)
    feature_dim: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown architecture family {self.family!r}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"unknown input mode {self.input_mode!r}")
        object.__setattr__(self, "resolution", _as_resolution(self.resolution))
        ft = self.family.startswith("ft-")
        if ft and self.input_mode != "features":
            raise ConfigError(f"{self.family} requires the features input mode")
        if not ft and self.input_mode == "features":
            raise ConfigError(f"{self.family} takes images, not features")
        if ft and (self.feature_dim is None or self.feature_dim < 1):
            raise ConfigError(f"{self.family} needs feature_dim >= 1")
        if self.family in FRAME_FAMILIES and self.T != 1:
            raise ConfigError(f"frame-by-frame family {self.family} has T=1, got {self.T}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")

    @property
    def frame_level(self) -> bool:
        return self.family in FRAME_FAMILIES

    @property
    def name(self) -> str:
        return _DISPLAY[(self.family, self.input_mode)]

    def with_T(self, T: int) -> "ModelSpec":
        if self.frame_level:
            return self
        return ModelSpec(self.family, self.input_mode, T, self.resolution, self.feature_dim)

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """Ordered stack of layers ending in a 2-way softmax."""

    def __init__(self, layers: list[Layer], spec: ModelSpec | None = None):
        self.layers = list(layers)
        self.spec = spec

    @property
    def frame_level(self) -> bool:
        return self.spec is not None and self.spec.frame_level

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:
                break

    def named_params(self):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{i:02d}.{layer.kind}.")

    def named_grads(self):
        for i, layer in enumerate(self.layers):
            yield from layer.named_grads(f"{i:02d}.{layer.kind}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(
                f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, value in own.items():
            if state[name].shape != value.shape:
                raise DimensionError(
                    f"{name}: checkpoint shape {state[name].shape} != {value.shape}"
                )
            value[...] = state[name]

    def dropout_layers(self):
        stack = list(self.layers)
        while stack:
            layer = stack.pop(0)
            if isinstance(layer, TimeDistributed):
                stack = list(layer.layers) + stack
            elif isinstance(layer, Dropout):
                yield layer

    def seed_dropout(self, rng: np.random.Generator) -> None:
        for layer in self.dropout_layers():
            layer.rng = rng

    def predict_proba(self, x, batch_size=64) -> np.ndarray:
        """Inference-mode class probabilities for a batch, in chunks."""
        out = [
            self.forward(x[i : i + batch_size], training=False)
            for i in range(0, len(x), batch_size)
        ]
        if not out:
            return np.zeros((0, 2))
        return np.concatenate(out)


def count_params(model: Model) -> int:
    return sum(layer.param_count() for layer in model.layers)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _mark_input_layer(layers):
    """Skip the input gradient of the first trainable layer; nothing consumes it."""
    first = layers[0]
    if isinstance(first, TimeDistributed):
        first = first.layers[0]
    if hasattr(first, "need_input_grad"):
        first.need_input_grad = False


def build_fbf_cnn(resolution=(32, 32), seed=0, channels=3, input_mode="raw") -> Model:
    h, w = _as_resolution(resolution)
    if h % 4 or w % 4:
        raise ConfigError(f"FbF CNN resolution must be divisible by 4, got {h}x{w}")
    rng = _rng(seed)
    layers = [
        Conv2D(channels, 64, 5, 1, rng=rng),
        MaxPool2D(),
        Conv2D(64, 32, 5, 1, rng=rng),
        MaxPool2D(),
        Flatten(),
        Dense((h // 4) * (w // 4) * 32, 1000, "sigmoid", rng=rng),
        Dense(1000, 2, "softmax", rng=rng),
    ]
    _mark_input_layer(layers)
    return Model(layers, ModelSpec("fbf-cnn", input_mode, 1, (h, w)))


def build_cnn_lstm(resolution=(32, 32), q=10, seed=0, channels=3, input_mode="raw") -> Model:
    h, w = _as_resolution(resolution)
    if q < 1:
        raise ConfigError(f"CNN+LSTM needs q >= 1, got {q}")
    if h % 2 or w % 2:
        raise ConfigError(f"CNN+LSTM resolution must be divisible by 2, got {h}x{w}")
    rng = _rng(seed)
    trunk = [
        Conv2D(channels, 16, 3, 1, rng=rng),
        Conv2D(16, 16, 3, 1, rng=rng),
        MaxPool2D(),
        Dropout(DROPOUT_P, rng=np.random.default_rng(0)),
        Flatten(),
        Dense((h // 2) * (w // 2) * 16, 200, "sigmoid", rng=rng),
        Dense(200, FEATURE_DIM, "sigmoid", rng=rng),
    ]
    layers = [
        TimeDistributed(trunk),
        LSTMCell(FEATURE_DIM, LSTM_HIDDEN, q, rng=rng),
        Dense(LSTM_HIDDEN, 2, "softmax", rng=rng),
    ]
    _mark_input_layer(layers)
    return Model(layers, ModelSpec("cnn-lstm", input_mode, q, (h, w)))


def build_ft_softmax(d, seed=0) -> Model:
    if d < 1:
        raise ConfigError(f"feature dimension must be >= 1, got {d}")
    layers = [Dense(d, 2, "softmax", rng=_rng(seed))]
    _mark_input_layer(layers)
    return Model(layers, ModelSpec("ft-softmax", "features", 1, feature_dim=d))


def build_ft_lstm(d, q=10, seed=0) -> Model:
    if d < 1 or q < 1:
        raise ConfigError(f"FT+LSTM needs d >= 1 and q >= 1, got d={d}, q={q}")
    rng = _rng(seed)
    layers = [
        LSTMCell(d, LSTM_HIDDEN, q, rng=rng),
        Dense(LSTM_HIDDEN, 2, "softmax", rng=rng),
    ]
    _mark_input_layer(layers)
    return Model(layers, ModelSpec("ft-lstm", "features", q, feature_dim=d))


def build_model(spec: ModelSpec, seed=0) -> Model:
    if spec.family == "fbf-cnn":
        return build_fbf_cnn(spec.resolution, seed, input_mode=spec.input_mode)
    if spec.family == "cnn-lstm":
        return build_cnn_lstm(spec.resolution, spec.T, seed, input_mode=spec.input_mode)
    if spec.family == "ft-softmax":
        return build_ft_softmax(spec.feature_dim, seed)
    return build_ft_lstm(spec.feature_dim, spec.T, seed)


def score_clips(model: Model, clips, batch_size=32) -> np.ndarray:
    """Risk scores for a batch of clips shaped ``(B, T, ...)``.

    Frame-level models score each frame and average the risky probability
    over the clip's frames.
    """
    clips = np.asarray(clips, dtype=np.float64)
    if model.frame_level:
        n, t = clips.shape[:2]
        frames = clips.reshape(n * t, *clips.shape[2:])
        probs = model.predict_proba(frames, batch_size * t)[:, RISKY]
        return probs.reshape(n, t).mean(axis=1)
    expected = model.spec.T if model.spec is not None else clips.shape[1]
    if clips.shape[1] != expected:
        raise DimensionError(f"model consumes {expected} frames, clips carry {clips.shape[1]}")
    return model.predict_proba(clips, batch_size)[:, RISKY]


def predict_clip(model: Model, frames) -> float:
    """Risk score in ``[0, 1]`` for one clip given as ``(T, ...)`` frames."""
    frames = np.asarray(frames, dtype=np.float64)
    return float(score_clips(model, frames[None])[0])
