"""
Checkpoint container: a versioned JSON document holding the model configuration, named
parameter arrays (base64 of little-endian float64), optimiser state, RNG state and free-form
metadata.

JSON with sorted keys keeps repeated runs byte-identical, which a zip-based format would not.
"""

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from avse_policy_tuner.logging.log_types import LogType
from avse_policy_tuner.logging.tuner_error import (
    InvalidArgumentError,
    TunerIOError,
    UnsupportedFormatError,
)
from avse_policy_tuner.model import Adam, AdamState, EnhancerModel, ModelConfig
from avse_policy_tuner.utils import write_json

CHECKPOINT_FORMAT = "avse-policy-tuner-checkpoint"
CHECKPOINT_VERSION = 1
ARRAY_DTYPE = "<f8"


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    array = np.ascontiguousarray(array, dtype=ARRAY_DTYPE)
    return {
        "dtype": ARRAY_DTYPE,
        "shape": list(array.shape),
        "data": base64.b64encode(array.tobytes()).decode("ascii"),
    }


def decode_array(blob: Dict[str, Any]) -> np.ndarray:
    if blob.get("dtype") != ARRAY_DTYPE:
        raise UnsupportedFormatError(f"Unsupported array dtype {blob.get('dtype')!r}.")
    raw = base64.b64decode(blob["data"])
    array = np.frombuffer(raw, dtype=ARRAY_DTYPE).astype(np.float64)
    shape = tuple(blob["shape"])
    if array.size != int(np.prod(shape)):
        raise UnsupportedFormatError(f"Array payload does not match declared shape {shape}.")
    return array.reshape(shape)


@dataclass
class Checkpoint:
    """The restored contents of a checkpoint file."""

    model: EnhancerModel
    optimizer_state: Optional[AdamState] = None
    optimizer_lr: Optional[float] = None
    rng_state: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def optimizer(self, lr: Optional[float] = None) -> Adam:
        """An Adam optimiser over `model`, resuming the saved moments if present."""
        adam = Adam(self.model.params, lr=lr if lr is not None else (self.optimizer_lr or 1e-3))
        if self.optimizer_state is not None:
            adam.state = self.optimizer_state
        return adam

    def rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        generator = np.random.default_rng()
        generator.bit_generator.state = self.rng_state
        return generator


def save_checkpoint(
    path: Path,
    model: EnhancerModel,
    optimizer: Optional[Adam] = None,
    rng: Optional[np.random.Generator] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write `model` (and optionally its optimiser and RNG) to `path`.
    """
    payload: Dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {name: encode_array(values) for name, values in model.state_dict().items()},
        "optimizer": None,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "metadata": metadata or {},
    }
    if optimizer is not None:
        payload["optimizer"] = {
            "lr": optimizer.lr,
            "step": optimizer.state.step,
            "m": {name: encode_array(v) for name, v in optimizer.state.m.items()},
            "v": {name: encode_array(v) for name, v in optimizer.state.v.items()},
        }
    return write_json(path, payload)


def load_checkpoint(path: Path, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Read a checkpoint written by `save_checkpoint`.

    :param expected_config: If given, the stored configuration must equal it.
    :raises TunerIOError: The file is missing or unreadable.
    :raises UnsupportedFormatError: The file is not a checkpoint of a known version.
    :raises InvalidArgumentError: The configuration or a parameter shape does not match.
    """
    path = Path(path)
    if not path.is_file():
        raise TunerIOError(f"No checkpoint at {path}.", log_as=LogType.FATAL_MISSING_INPUT)
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise UnsupportedFormatError(f"{path} is not valid JSON: {e}") from e
    except OSError as e:
        raise TunerIOError(f"Could not read {path}: {e}") from e

    if payload.get("format") != CHECKPOINT_FORMAT:
        raise UnsupportedFormatError(f"{path} is not an {CHECKPOINT_FORMAT} file.")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedFormatError(
            f"{path} has checkpoint version {payload.get('version')}, "
            f"expected {CHECKPOINT_VERSION}."
        )

    try:
        config = ModelConfig(**payload["config"])
    except (KeyError, TypeError) as e:
        raise UnsupportedFormatError(f"{path} holds an unreadable model configuration: {e}") from e
    if expected_config is not None and config != expected_config:
        raise InvalidArgumentError(
            f"Checkpoint {path} was written for {config}, but the run expects {expected_config}."
        )
    model = EnhancerModel(config)
    model.load_state_dict({name: decode_array(blob) for name, blob in payload["params"].items()})

    checkpoint = Checkpoint(
        model=model, rng_state=payload.get("rng_state"), metadata=payload.get("metadata", {})
    )
    if payload.get("optimizer") is not None:
        saved = payload["optimizer"]
        checkpoint.optimizer_lr = saved["lr"]
        checkpoint.optimizer_state = AdamState(
            step=saved["step"],
            m={name: decode_array(v) for name, v in saved["m"].items()},
            v={name: decode_array(v) for name, v in saved["v"].items()},
        )
        for name, moment in checkpoint.optimizer_state.m.items():
            if name not in model.params or moment.shape != model.params[name].shape:
                raise InvalidArgumentError(f"Optimizer state for {name} does not match the model.")
    return checkpoint
