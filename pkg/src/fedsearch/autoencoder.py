"""Convolutional autoencoder feature extractor.

Encoder: stride-2 3x3 convolutions with the configured filter counts
(each halves the spatial grid).  A residual block with a skip connection
sits between the encoder and the bottleneck: 1x1 channel reduction,
3x3 convolution, 1x1 expansion back to the encoder width, block input
added to block output.  The bottleneck is a dense layer producing one
feature vector per image (200 values by default); a second dense layer
maps back to the grid and stride-2 transpose convolutions mirror the
encoder, ending in a sigmoid so reconstructions live in [0, 1].

Dropping everything after the bottleneck turns the trained model into
the feature extractor used for indexing and search.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, TrainingError

ENCODER_KERNEL = 3  # stride-2, padding-1 downsampling
DECODER_KERNEL = 4  # stride-2, padding-1 upsampling; exactly doubles the grid


@dataclass(frozen=True)
class AutoencoderConfig:
    """Architecture hyperparameters; the defaults are the full-size model."""

    image_size: tuple[int, int, int] = (3, 64, 64)  # (channels, height, width)
    encoder_filters: tuple[int, ...] = (32, 64, 128, 256)
    residual_filters: tuple[int, int, int] = (64, 32, 256)
    bottleneck_dim: int = 200
    decoder_filters: tuple[int, ...] = (128, 64, 32, 3)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        c, h, w = self.image_size
        n = len(self.encoder_filters)
        if n == 0:
            raise ConfigError("encoder_filters must not be empty")
        factor = 2**n
        if h % factor or w % factor:
            raise ConfigError(
                f"image size {h}x{w} must be divisible by {factor} "
                f"({n} stride-2 encoder layers)"
            )
        if len(self.decoder_filters) != n:
            raise ConfigError("decoder_filters must mirror encoder_filters in depth")
        if self.decoder_filters[-1] != c:
            raise ConfigError(
                f"final decoder filter count {self.decoder_filters[-1]} must equal "
                f"input channels {c}"
            )
        if len(self.residual_filters) != 3:
            raise ConfigError("residual_filters must hold three filter counts")
        if self.residual_filters[-1] != self.encoder_filters[-1]:
            raise ConfigError("residual block must project back to the encoder width")
        if self.bottleneck_dim < 1:
            raise ConfigError("bottleneck_dim must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        """Channels and spatial size of the encoder output."""
        c, h, w = self.image_size
        factor = 2 ** len(self.encoder_filters)
        return (self.encoder_filters[-1], h // factor, w // factor)


def tiny_config(**overrides) -> AutoencoderConfig:
    """A desk-scale configuration for fast tests; same wiring, few weights."""
    base = dict(
        image_size=(3, 16, 16),
        encoder_filters=(4, 8),
        residual_filters=(4, 2, 8),
        bottleneck_dim=16,
        decoder_filters=(4, 3),
        seed=0,
    )
    base.update(overrides)
    return AutoencoderConfig(**base)


def weights_layout(config: AutoencoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs; serialization and flattening depend on this order."""
    layout: list[tuple[str, tuple[int, ...]]] = []
    c_prev = config.image_size[0]
    for i, f in enumerate(config.encoder_filters):
        layout.append((f"enc{i}.kernel", (f, c_prev, ENCODER_KERNEL, ENCODER_KERNEL)))
        layout.append((f"enc{i}.bias", (f,)))
        c_prev = f
    r1, r2, r3 = config.residual_filters
    layout.append(("res.reduce.kernel", (r1, c_prev, 1, 1)))
    layout.append(("res.reduce.bias", (r1,)))
    layout.append(("res.conv.kernel", (r2, r1, 3, 3)))
    layout.append(("res.conv.bias", (r2,)))
    layout.append(("res.expand.kernel", (r3, r2, 1, 1)))
    layout.append(("res.expand.bias", (r3,)))
    grid_c, grid_h, grid_w = config.grid_shape
    flat = grid_c * grid_h * grid_w
    layout.append(("bottleneck.in.weight", (flat, config.bottleneck_dim)))
    layout.append(("bottleneck.in.bias", (config.bottleneck_dim,)))
    layout.append(("bottleneck.out.weight", (config.bottleneck_dim, flat)))
    layout.append(("bottleneck.out.bias", (flat,)))
    c_prev = grid_c
    for i, f in enumerate(config.decoder_filters):
        layout.append((f"dec{i}.kernel", (c_prev, f, DECODER_KERNEL, DECODER_KERNEL)))
        layout.append((f"dec{i}.bias", (f,)))
        c_prev = f
    return layout


def layout_id(config: AutoencoderConfig) -> bytes:
    """8-byte digest binding weights and indexes to an architecture."""
    text = "|".join(f"{name}:{','.join(map(str, shape))}" for name, shape in weights_layout(config))
    return hashlib.sha256(text.encode()).digest()[:8]


def n_parameters(config: AutoencoderConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in weights_layout(config))


@dataclass
class AutoencoderModel:
    """Configuration plus the parameter arrays, keyed by layout name."""

    config: AutoencoderConfig
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return weights_layout(self.config)

    @property
    def layout_id(self) -> bytes:
        return layout_id(self.config)


@dataclass(frozen=True)
class FeatureVector:
    """One bottleneck activation vector, tagged with the image it came from."""

    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.values.ndim != 1:
            raise DimensionError(f"feature vector must be 1-D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite feature vector for {self.source_id!r}")

    def __len__(self):
        return self.values.shape[0]


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("dec"):  # transpose kernel [c_in, c_out, kh, kw]
        return shape[0] * shape[2] * shape[3]
    if len(shape) == 4:  # conv kernel [c_out, c_in, kh, kw]
        return shape[1] * shape[2] * shape[3]
    return shape[0]  # dense weight [f_in, f_out]


def build_model(config: AutoencoderConfig) -> AutoencoderModel:
    """Deterministic He-uniform initialization from ``config.seed``; biases zero."""
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    params: dict[str, np.ndarray] = {}
    for name, shape in weights_layout(config):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return AutoencoderModel(config=config, params=params)


def flatten_weights(model: AutoencoderModel) -> np.ndarray:
    """Concatenate all parameters into one flat vector in layout order."""
    return np.concatenate([model.params[name].ravel() for name, _ in model.layout])


def with_weights(model: AutoencoderModel, flat: np.ndarray) -> AutoencoderModel:
    """A new model carrying ``flat`` unpacked along the layout."""
    flat = np.asarray(flat)
    expected = n_parameters(model.config)
    if flat.shape != (expected,):
        raise DimensionError(f"flat weights shape {flat.shape} != ({expected},)")
    params: dict[str, np.ndarray] = {}
    offset = 0
    dtype = np.dtype(model.config.dtype)
    for name, shape in model.layout:
        size = int(np.prod(shape))
        params[name] = flat[offset : offset + size].reshape(shape).astype(dtype, copy=True)
        offset += size
    return AutoencoderModel(config=model.config, params=params)


def residual_block(x, params: dict) -> ad.Tensor:
    """Reduce/convolve/expand with the input added back.

    With all-zero block weights and biases this is exactly the identity.
    """
    r = ad.relu(ad.conv2d(x, params["res.reduce.kernel"], params["res.reduce.bias"], stride=1, padding=0))
    r = ad.relu(ad.conv2d(r, params["res.conv.kernel"], params["res.conv.bias"], stride=1, padding=1))
    r = ad.conv2d(r, params["res.expand.kernel"], params["res.expand.bias"], stride=1, padding=0)
    return ad.add(x, r)


def _check_image_shape(config: AutoencoderConfig, data: np.ndarray) -> bool:
    expected = tuple(config.image_size)
    if data.ndim == 3 and tuple(data.shape) == expected:
        return False
    if data.ndim == 4 and tuple(data.shape[1:]) == expected:
        return True
    raise DimensionError(f"image shape {data.shape} does not match configured {expected}")


def _param_tensors(model: AutoencoderModel) -> dict[str, ad.Tensor]:
    return {name: ad.Tensor(arr, is_param=True, name=name) for name, arr in model.params.items()}


def _forward_graph(config: AutoencoderConfig, params: dict, image: np.ndarray):
    """Build the full reconstruction graph; returns (reconstruction, bottleneck)."""
    batched = _check_image_shape(config, image)
    x = ad.Tensor(image)
    for i in range(len(config.encoder_filters)):
        x = ad.relu(ad.conv2d(x, params[f"enc{i}.kernel"], params[f"enc{i}.bias"], stride=2, padding=1))
    x = residual_block(x, params)
    grid_c, grid_h, grid_w = config.grid_shape
    flat = grid_c * grid_h * grid_w
    n = image.shape[0] if batched else None
    x = ad.reshape(x, (n, flat) if batched else (flat,))
    bottleneck = ad.relu(ad.dense(x, params["bottleneck.in.weight"], params["bottleneck.in.bias"]))
    x = ad.relu(ad.dense(bottleneck, params["bottleneck.out.weight"], params["bottleneck.out.bias"]))
    x = ad.reshape(x, (n, grid_c, grid_h, grid_w) if batched else (grid_c, grid_h, grid_w))
    last = len(config.decoder_filters) - 1
    for i in range(last):
        x = ad.relu(ad.transpose_conv2d(x, params[f"dec{i}.kernel"], params[f"dec{i}.bias"], stride=2, padding=1))
    x = ad.sigmoid(
        ad.transpose_conv2d(x, params[f"dec{last}.kernel"], params[f"dec{last}.bias"], stride=2, padding=1)
    )
    return x, bottleneck


def _encode_graph(config: AutoencoderConfig, params: dict, image: np.ndarray) -> ad.Tensor:
    """Encoder-only path; identical ops (and bits) up to the bottleneck."""
    batched = _check_image_shape(config, image)
    x = ad.Tensor(image)
    for i in range(len(config.encoder_filters)):
        x = ad.relu(ad.conv2d(x, params[f"enc{i}.kernel"], params[f"enc{i}.bias"], stride=2, padding=1))
    x = residual_block(x, params)
    grid_c, grid_h, grid_w = config.grid_shape
    flat = grid_c * grid_h * grid_w
    x = ad.reshape(x, (image.shape[0], flat) if batched else (flat,))
    return ad.relu(ad.dense(x, params["bottleneck.in.weight"], params["bottleneck.in.bias"]))


def forward(model: AutoencoderModel, image: np.ndarray, *, want_bottleneck: bool = False):
    """Reconstruct ``image`` (single ``[C,H,W]`` or batch ``[N,C,H,W]``)."""
    image = np.asarray(image, dtype=model.config.dtype)
    recon, bottleneck = _forward_graph(model.config, _param_tensors(model), image)
    if want_bottleneck:
        return recon.data, bottleneck.data
    return recon.data


def encode(model: AutoencoderModel, image: np.ndarray, source_id: str = "") -> FeatureVector:
    """Feature vector for one image: exactly the bottleneck activations."""
    image = np.asarray(image, dtype=model.config.dtype)
    if image.ndim != 3:
        raise DimensionError(f"encode expects one [C,H,W] image, got shape {image.shape}")
    values = _encode_graph(model.config, _param_tensors(model), image).data
    return FeatureVector(values=values, source_id=source_id)


def encode_batch(model: AutoencoderModel, images: np.ndarray) -> np.ndarray:
    """Bottleneck activations for a batch; row i encodes image i."""
    images = np.asarray(images, dtype=model.config.dtype)
    if images.ndim != 4:
        raise DimensionError(f"encode_batch expects [N,C,H,W], got shape {images.shape}")
    return _encode_graph(model.config, _param_tensors(model), images).data


def loss_and_gradient(model: AutoencoderModel, batch: np.ndarray) -> tuple[float, np.ndarray]:
    """Reconstruction MSE over ``batch`` and its gradient as a flat vector."""
    batch = np.asarray(batch, dtype=model.config.dtype)
    params = _param_tensors(model)
    recon, _ = _forward_graph(model.config, params, batch)
    loss = ad.mse(recon, ad.Tensor(batch))
    ad.backward(loss)
    grads = [
        params[name].grad.ravel() if params[name].grad is not None else np.zeros(int(np.prod(shape)), model.config.dtype)
        for name, shape in model.layout
    ]
    return float(loss.data), np.concatenate(grads)


def train(
    model: AutoencoderModel,
    dataset: np.ndarray,
    epochs: int,
    optimizer: ad.OptimizerState,
    batch_size: int,
    shuffle_seed: int | None = None,
) -> tuple[AutoencoderModel, list[float]]:
    """Minibatch training on reconstruction error.

    Returns a new model and the per-epoch mean loss trace; the input
    model is left untouched.  The shuffle stream is fixed by
    ``shuffle_seed`` (defaults to a stream derived from the config
    seed), so identical calls produce identical weights.
    """
    dataset = np.asarray(dataset, dtype=model.config.dtype)
    if dataset.ndim != 4 or dataset.shape[0] == 0:
        raise TrainingError(f"dataset must be a non-empty [N,C,H,W] array, got shape {dataset.shape}")
    if batch_size < 1:
        raise TrainingError(f"batch_size must be positive, got {batch_size}")
    if epochs < 0:
        raise TrainingError(f"epochs must be non-negative, got {epochs}")
    _check_image_shape(model.config, dataset)

    seed = shuffle_seed if shuffle_seed is not None else [model.config.seed, 0x5F5F]
    rng = np.random.default_rng(seed)
    current = with_weights(model, flatten_weights(model))
    layout = current.layout
    trace: list[float] = []
    n = dataset.shape[0]
    for epoch in range(epochs):
        # A full batch sees every sample regardless of order; keeping dataset
        # order there makes full-batch runs bit-stable across epoch splits.
        order = rng.permutation(n) if batch_size < n else np.arange(n)
        total, weighted = 0, 0.0
        for start in range(0, n, batch_size):
            batch = dataset[order[start : start + batch_size]]
            loss, grad = loss_and_gradient(current, batch)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            new_flat = ad.optimizer_step(optimizer, flatten_weights(current), grad, layout=layout)
            current = with_weights(current, new_flat)
            weighted += loss * batch.shape[0]
            total += batch.shape[0]
        trace.append(weighted / total)
    return current, trace
