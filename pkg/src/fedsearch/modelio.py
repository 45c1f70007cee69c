"""Model files on disk: a weight payload plus a JSON architecture sidecar.

The weight format carries only the flat vector and a layout digest, so
the architecture needed to rebuild the model travels in a small
``<model>.config.json`` beside it.  Loading verifies that the sidecar's
layout digest matches the payload.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from . import autoencoder as ae
from . import federation as fed
from .errors import ConfigError


def config_to_dict(config: ae.AutoencoderConfig) -> dict:
    return asdict(config)


def config_from_dict(data: dict) -> ae.AutoencoderConfig:
    try:
        return ae.AutoencoderConfig(
            image_size=tuple(data["image_size"]),
            encoder_filters=tuple(data["encoder_filters"]),
            residual_filters=tuple(data["residual_filters"]),
            bottleneck_dim=int(data["bottleneck_dim"]),
            decoder_filters=tuple(data["decoder_filters"]),
            seed=int(data["seed"]),
            dtype=data.get("dtype", "float32"),
        )
    except KeyError as exc:
        raise ConfigError(f"model config sidecar missing field {exc}") from None


def sidecar_path(model_path) -> Path:
    return Path(str(model_path) + ".config.json")


def save_model(model: ae.AutoencoderModel, path) -> None:
    fed.save_weights(fed.model_weights(model), path)
    with open(sidecar_path(path), "w") as fh:
        json.dump(config_to_dict(model.config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> ae.AutoencoderModel:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise ConfigError(f"missing model config sidecar {sidecar}")
    with open(sidecar) as fh:
        config = config_from_dict(json.load(fh))
    weights = fed.load_weights(path, expected_layout_id=ae.layout_id(config))
    return ae.with_weights(ae.build_model(config), weights.values)
