"""
Checkpoint directories: ``manifest.json`` plus ``params.bin``.

``params.bin`` holds every buffer as little-endian float64, concatenated in
manifest order. The manifest records layer/parameter names and shapes, the
model config, the seed and free-form provenance (task, training log...).
"""

import hashlib
import json
import logging
import os

import numpy as np

from .errors import ContractViolation
from .model import ModelConfig, ParameterSet

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PARAMS = "params.bin"
FORMAT_VERSION = 1


def params_digest(params):
    return hashlib.sha256(params.flat().astype("<f8").tobytes()).hexdigest()


def save_checkpoint(params, path, seed=None, provenance=None):
    """Write ``params`` to directory ``path`` (created if needed)."""
    os.makedirs(path, exist_ok=True)
    blob = params.flat().astype("<f8").tobytes()
    manifest = {
        "format": FORMAT_VERSION,
        "layers": params.manifest(),
        "manifest_hash": params.manifest_hash,
        "config": params.config.to_dict() if params.config is not None else None,
        "seed": seed,
        "provenance": provenance or {},
        "params_sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(os.path.join(path, PARAMS), "wb") as f:
        f.write(blob)
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.debug("wrote checkpoint %s (%d parameters)", path, params.size)
    return manifest


def read_manifest(path):
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError("no checkpoint manifest at {}".format(manifest_path))
    with open(manifest_path, encoding="utf-8") as f:
        return json.load(f)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(params, manifest)``."""
    manifest = read_manifest(path)
    with open(os.path.join(path, PARAMS), "rb") as f:
        blob = f.read()
    if manifest.get("params_sha256") not in (None, hashlib.sha256(blob).hexdigest()):
        raise ContractViolation("params.bin does not match its manifest in {}".format(path))
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)

    layers = []
    start = 0
    for layer in manifest["layers"]:
        entries = []
        for param in layer["params"]:
            shape = tuple(param["shape"])
            stop = start + int(np.prod(shape))
            if stop > flat.size:
                raise ContractViolation("params.bin is shorter than its manifest in {}".format(path))
            entries.append((param["name"], flat[start:stop].reshape(shape)))
            start = stop
        layers.append((layer["name"], entries))
    if start != flat.size:
        raise ContractViolation("params.bin is longer than its manifest in {}".format(path))

    config = ModelConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    params = ParameterSet(layers, config=config)
    if params.manifest_hash != manifest.get("manifest_hash", params.manifest_hash):
        raise ContractViolation("manifest hash mismatch in {}".format(path))
    return params, manifest
