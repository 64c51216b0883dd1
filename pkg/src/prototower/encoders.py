"""MLP towers and projection heads, plus checkpoint serialization.

Towers map raw modality inputs to embeddings z; heads map z to the lower
dimensional h used for prototype scoring. Both are plain linear-ReLU
stacks whose last layer has no activation, so one forward routine serves
either role.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError

CHECKPOINT_MAGIC = b"PROTO-CKPT1"


@dataclass
class Mlp:
    """Weights (fan_in, fan_out) and biases (1, fan_out) per layer."""

    weights: list
    biases: list

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def n_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def init_params(widths, seed):
    """Build an Mlp with uniform(-1, 1)/sqrt(fan_in) weights, zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ConfigError(f"an encoder needs at least two widths, got {widths}")
    if any(w <= 0 for w in widths):
        raise ConfigError(f"encoder widths must be positive, got {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.uniform(-1.0, 1.0, size=(fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros((1, fan_out)))
    return Mlp(weights, biases)


def as_leaves(params):
    """Trainable node pairs for each layer of an Mlp."""
    return [(ad.leaf(w), ad.leaf(b)) for w, b in zip(params.weights, params.biases)]


def _layers(params):
    if isinstance(params, Mlp):
        return [
            (ad.constant(w), ad.constant(b))
            for w, b in zip(params.weights, params.biases)
        ]
    return [(ad.as_node(w), ad.as_node(b)) for w, b in params]


def encode(params, x):
    """Forward a batch through a tower; ReLU between layers, linear output.

    params is either an Mlp (treated as constants) or the node pairs from
    as_leaves when gradients are needed.
    """
    layers = _layers(params)
    h = ad.as_node(x)
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if i != last:
            h = ad.relu(h)
    return h


def project(params, z):
    """Forward embeddings through a projection head; same stack semantics."""
    return encode(params, z)


def forward_values(params, x):
    """Convenience inference pass returning a plain array."""
    return encode(params, x).value.values


def save_checkpoint(path, named):
    """Write named 2-D float64 arrays in a fixed little-endian layout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in named.items():
            a = np.ascontiguousarray(arr, dtype=np.float64)
            if a.ndim != 2:
                raise DataError(f"checkpoint tensor {name!r} must be 2-D, got {a.shape}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", a.shape[0], a.shape[1]))
            fh.write(a.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a checkpoint file")
    named = {}
    pos = len(CHECKPOINT_MAGIC)
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise DataError(f"{path} is truncated")
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 8 > len(blob):
            raise DataError(f"{path} is truncated")
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        count = rows * cols
        if pos + 8 * count > len(blob):
            raise DataError(f"{path} is truncated")
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        pos += count * 8
        named[name] = data.reshape(rows, cols).astype(np.float64)
    return named
