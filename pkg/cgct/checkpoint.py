"""
Checkpoint container.

A checkpoint is a UTF-8 JSON document with sorted keys:

    {
      "format": "cgct-checkpoint",
      "version": 1,
      "architecture": {...ArchitectureConfig fields...},
      "state": {"<parameter or buffer name>": {"dtype": "float32",
                                               "shape": [..],
                                               "data": "<base64, little-endian>"}},
      "rng": {"torch": "<base64 torch cpu rng state>", "numpy": {...bit generator state...}},
      "meta": {...free-form run information (variant, seed, step)...}
    }

The state covers all five networks (feature_extractor.*, mlp_head.*, edge_net.*,
node_net.*, discriminator.*) including normalization buffers. Saving a loaded
checkpoint reproduces the file byte for byte.
"""
import base64
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from .errors import ConfigurationError
from .models import ArchitectureConfig, ModelBundle

logger = logging.getLogger(__name__)

FORMAT_NAME = "cgct-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    bundle: ModelBundle
    torch_rng: Optional[torch.Tensor] = None
    numpy_rng: Optional[Dict[str, Any]] = None
    meta: Dict[str, Any] = field(default_factory=dict)


def _encode_tensor(tensor: torch.Tensor) -> Dict[str, Any]:
    array = tensor.detach().cpu().numpy()
    little = array.astype(array.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": str(array.dtype),
        "shape": list(array.shape),
        "data": base64.b64encode(np.ascontiguousarray(little).tobytes()).decode("ascii"),
    }


def _decode_tensor(entry: Dict[str, Any]) -> torch.Tensor:
    dtype = np.dtype(entry["dtype"]).newbyteorder("<")
    array = np.frombuffer(base64.b64decode(entry["data"]), dtype=dtype)
    array = array.astype(np.dtype(entry["dtype"])).reshape(entry["shape"])
    return torch.from_numpy(array.copy())


def serialize_checkpoint(checkpoint: Checkpoint) -> str:
    document = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "architecture": checkpoint.bundle.config.to_dict(),
        "state": {k: _encode_tensor(v) for k, v in checkpoint.bundle.state_dict().items()},
        "rng": {
            "torch": (
                base64.b64encode(checkpoint.torch_rng.numpy().tobytes()).decode("ascii")
                if checkpoint.torch_rng is not None
                else None
            ),
            "numpy": checkpoint.numpy_rng,
        },
        "meta": checkpoint.meta,
    }
    return json.dumps(document, sort_keys=True, indent=1)


def deserialize_checkpoint(text: str) -> Checkpoint:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Checkpoint is not valid JSON: {e}") from e
    if document.get("format") != FORMAT_NAME:
        raise ConfigurationError(f"Not a cgct checkpoint (format={document.get('format')!r})")
    if document.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"Unsupported checkpoint version {document.get('version')!r}")

    bundle = ModelBundle(ArchitectureConfig.from_dict(document["architecture"]))
    state = {k: _decode_tensor(v) for k, v in document["state"].items()}
    bundle.load_state_dict(state)
    rng = document.get("rng", {})
    torch_rng = None
    if rng.get("torch") is not None:
        torch_rng = torch.from_numpy(
            np.frombuffer(base64.b64decode(rng["torch"]), dtype=np.uint8).copy()
        )
    return Checkpoint(bundle, torch_rng, rng.get("numpy"), document.get("meta", {}))


@retry(
    stop=stop_after_attempt(3),
    wait=wait_fixed(0.5),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def save_checkpoint(
    path: str,
    bundle: ModelBundle,
    numpy_rng: Optional[np.random.Generator] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> str:
    """
    Writes a bundle with the current rng state to `path`.

    Args:
        path (str): Destination file, parent directories are created.
        bundle (ModelBundle): Networks to save.
        numpy_rng (np.random.Generator, optional): Generator whose state is stored.
        meta (dict, optional): JSON-serializable run information.

    Returns:
        str: The path written.
    """
    checkpoint = Checkpoint(
        bundle=bundle,
        torch_rng=torch.get_rng_state(),
        numpy_rng=numpy_rng.bit_generator.state if numpy_rng is not None else None,
        meta=meta or {},
    )
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_checkpoint(checkpoint))
    logger.debug("Saved checkpoint %s", path)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    """Reads a checkpoint written by `save_checkpoint`."""
    if not os.path.exists(path):
        raise ConfigurationError(f"Checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return deserialize_checkpoint(f.read())


def restore_rng(checkpoint: Checkpoint) -> Tuple[Optional[np.random.Generator], bool]:
    """
    Restores the torch rng from a checkpoint and rebuilds its numpy generator.

    Returns:
        tuple: (numpy generator or None, whether the torch state was restored).
    """
    restored = False
    if checkpoint.torch_rng is not None:
        torch.set_rng_state(checkpoint.torch_rng)
        restored = True
    generator = None
    if checkpoint.numpy_rng is not None:
        generator = np.random.default_rng()
        generator.bit_generator.state = checkpoint.numpy_rng
    return generator, restored
