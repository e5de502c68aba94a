"""
Latent-variable neural process.

A DeepSet encoder h(x, y) is mean-pooled over a point set and mapped to a
diagonal Gaussian over z by the heads g_mu, g_sigma. The same encoder and
heads serve the conditional prior q(z|C) and the posterior q(z|C,T), so
prior and posterior share one parameter set. The decoder maps (x, z) to a
diagonal Gaussian over y.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Literal, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from models.rnp_v1 import __version__
from models.rnp_v1.errors import DomainError, IntegrityError, NumericError
from models.rnp_v1.numkit import DTYPE, RngStream, as_tensor, gaussian_log_pdf
from models.rnp_v1.taskgen import Task

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RNPXCKPT"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    x_dim: int = Field(1, ge=1)
    y_dim: int = Field(1, ge=1)
    hidden: int = Field(64, ge=1)
    layers: int = Field(2, ge=1)
    z_dim: int = Field(32, ge=1)
    latent_std_floor: float = Field(1e-3, gt=0)
    decoder_std_floor: float = Field(0.1, gt=0, lt=1)
    activation: Literal["relu", "tanh"] = "relu"


@dataclass(frozen=True)
class DiagGaussian:
    """N(mean, diag(std^2)) over the latent z."""

    mean: torch.Tensor
    std: torch.Tensor

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        """Log density summed over the last (latent) dimension."""
        return gaussian_log_pdf(z, self.mean, self.std).sum(-1)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.std.detach())


@dataclass(frozen=True)
class PredictiveGaussian:
    """Per-point Gaussian over outputs; shape (..., N, Dy)."""

    mean: torch.Tensor
    std: torch.Tensor

    def point_log_likelihood(self, y: torch.Tensor) -> torch.Tensor:
        """log p(y_n | x_n, z) per point, summed over output dimensions."""
        return gaussian_log_pdf(as_tensor(y), self.mean, self.std).sum(-1)

    def joint_log_likelihood(self, y: torch.Tensor) -> torch.Tensor:
        """Factorised joint log-likelihood over all points and dimensions."""
        return self.point_log_likelihood(y).sum(-1)


def reparam_sample(dist: DiagGaussian, eps: torch.Tensor) -> torch.Tensor:
    """z = mean + std * eps."""
    return dist.mean + dist.std * eps


_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh}


def _mlp(in_dim: int, hidden: int, layers: int, activate_last: bool,
         activation: str = "relu") -> nn.Sequential:
    modules = []
    width = in_dim
    for _ in range(layers):
        modules += [nn.Linear(width, hidden), _ACTIVATIONS[activation]()]
        width = hidden
    if not activate_last:
        modules.append(nn.Linear(width, hidden))
    return nn.Sequential(*modules)


class NeuralProcess(nn.Module):
    """
    Latent NP with a shared DeepSet encoder.

    Parameters:
        point_encoder: h(x, y), `layers` activated layers of `hidden` units plus a linear embedding
        latent_mean, latent_std: g_mu, g_sigma heads (embedding -> z_dim)
        decoder: trunk over (x, z); decoder_mean, decoder_std heads (-> y_dim)
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        c = config

        self.point_encoder = _mlp(c.x_dim + c.y_dim, c.hidden, c.layers, activate_last=False,
                                  activation=c.activation)
        self.latent_mean = nn.Linear(c.hidden, c.z_dim)
        self.latent_std = nn.Linear(c.hidden, c.z_dim)

        self.decoder = _mlp(c.x_dim + c.z_dim, c.hidden, c.layers, activate_last=True,
                            activation=c.activation)
        self.decoder_mean = nn.Linear(c.hidden, c.y_dim)
        self.decoder_std = nn.Linear(c.hidden, c.y_dim)

        self.to(DTYPE)

    @staticmethod
    def _run(block: nn.Module, h: torch.Tensor, name: str) -> torch.Tensor:
        layers = block if isinstance(block, nn.Sequential) else [block]
        for i, layer in enumerate(layers):
            h = layer(h)
            if not bool(torch.isfinite(h).all()):
                raise NumericError(f"non-finite activation in {name} layer {i}")
        return h

    def encode_set(self, xs, ys) -> torch.Tensor:
        """Mean of per-point embeddings h(x, y) over a set of K >= 1 points."""
        xs, ys = as_tensor(xs), as_tensor(ys)
        if xs.shape[0] == 0:
            raise DomainError("cannot encode an empty point set")
        per_point = self._run(self.point_encoder, torch.cat([xs, ys], dim=-1), "point_encoder")
        return per_point.mean(dim=0)

    def latent_dist(self, embedding: torch.Tensor) -> DiagGaussian:
        if not bool(torch.isfinite(embedding).all()):
            raise NumericError("non-finite embedding fed to the latent heads")
        mean = self._run(self.latent_mean, embedding, "latent_mean")
        raw = self._run(self.latent_std, embedding, "latent_std")
        return DiagGaussian(mean, self.config.latent_std_floor + F.softplus(raw))

    def prior(self, task: Task) -> DiagGaussian:
        """q(z | C): reads the context set only."""
        return self.latent_dist(self.encode_set(task.x_ctx, task.y_ctx))

    def posterior(self, task: Task) -> DiagGaussian:
        """q(z | C, T): the same encoder over the union of context and target."""
        xs = np.concatenate([task.x_ctx, task.x_tgt])
        ys = np.concatenate([task.y_ctx, task.y_tgt])
        return self.latent_dist(self.encode_set(xs, ys))

    def decode(self, x, z: torch.Tensor) -> PredictiveGaussian:
        """p(y | x, z) for N inputs and latent(s) z of shape (..., z_dim)."""
        x = as_tensor(x)
        n = x.shape[0]
        batch = z.shape[:-1]
        z_rep = z.unsqueeze(-2).expand(*batch, n, z.shape[-1])
        x_rep = x.expand(*batch, n, x.shape[-1])
        h = self._run(self.decoder, torch.cat([x_rep, z_rep], dim=-1), "decoder")
        mean = self._run(self.decoder_mean, h, "decoder_mean")
        raw = self._run(self.decoder_std, h, "decoder_std")
        floor = self.config.decoder_std_floor
        return PredictiveGaussian(mean, floor + (1.0 - floor) * F.softplus(raw))


def init_parameters(model: NeuralProcess, rng: RngStream):
    """Uniform He-style fan-in init for weights, zero biases; keyed by parameter name."""
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.dim() == 2:
                bound = float(np.sqrt(6.0 / param.shape[1]))
                draws = rng.child(name).uniform(-bound, bound, tuple(param.shape))
                param.copy_(torch.from_numpy(draws))
            else:
                param.zero_()


def build_model(config: ModelConfig, seed: int) -> NeuralProcess:
    model = NeuralProcess(config)
    init_parameters(model, RngStream(seed, "init"))
    return model


# --- Checkpoints ---------------------------------------------------------------------

@dataclass(frozen=True)
class CheckpointHeader:
    config_hash: str
    seed: int
    code_version: str
    model: ModelConfig
    layers: Tuple[Dict, ...]
    payload_sha256: str


def save_checkpoint(model: NeuralProcess, path, config_hash: str = "", seed: int = 0) -> Path:
    """Self-describing checkpoint: magic, u64 header length, JSON header, little-endian f8 payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    layers, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        values = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f8")
        layers.append({"name": name, "shape": list(values.shape), "offset": offset,
                       "count": int(values.size)})
        chunks.append(values.tobytes(order="C"))
        offset += values.size
    payload = b"".join(chunks)

    header = {
        "format": "rnpx-checkpoint",
        "version": 1,
        "code_version": __version__,
        "config_hash": config_hash,
        "seed": int(seed),
        "model": model.config.model_dump(mode="json"),
        "layers": layers,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    logger.debug(f"Saved checkpoint {path} ({offset} values)")
    return path


LAYER_FIELDS = ("name", "shape", "offset", "count")


def _layer_entry(entry) -> Dict:
    if not isinstance(entry, dict):
        raise TypeError(f"layer entry {entry!r} is not an object")
    missing = [field for field in LAYER_FIELDS if field not in entry]
    if missing:
        raise KeyError(f"layer entry {entry.get('name', '?')} lacks {missing}")
    if not isinstance(entry["shape"], list) or not all(isinstance(d, int) for d in entry["shape"]):
        raise TypeError(f"layer {entry['name']} has a malformed shape")
    if not isinstance(entry["offset"], int) or not isinstance(entry["count"], int):
        raise TypeError(f"layer {entry['name']} has a malformed offset or count")
    return entry


def _read_checkpoint(path) -> Tuple[CheckpointHeader, bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IntegrityError(f"cannot read checkpoint {path}: {e}") from e
    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise IntegrityError(f"{path} is not an RNPx checkpoint")
    start = len(CHECKPOINT_MAGIC) + 8
    (length,) = struct.unpack("<Q", raw[len(CHECKPOINT_MAGIC):start])
    try:
        meta = json.loads(raw[start:start + length].decode("utf-8"))
        header = CheckpointHeader(
            config_hash=meta["config_hash"], seed=int(meta["seed"]),
            code_version=meta["code_version"], model=ModelConfig(**meta["model"]),
            layers=tuple(_layer_entry(entry) for entry in meta["layers"]),
            payload_sha256=meta["payload_sha256"],
        )
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise IntegrityError(f"{path}: corrupt manifest ({e})") from e
    return header, raw[start + length:]


def read_checkpoint_header(path) -> CheckpointHeader:
    return _read_checkpoint(path)[0]


def load_checkpoint(path) -> NeuralProcess:
    """Rebuild a model from a checkpoint, verifying names, shapes, offsets and payload hash."""
    header, payload = _read_checkpoint(path)
    model = NeuralProcess(header.model)
    expected = model.state_dict()

    names = [layer["name"] for layer in header.layers]
    if names != list(expected):
        raise IntegrityError(f"{path}: layer names do not match the model architecture")
    if hashlib.sha256(payload).hexdigest() != header.payload_sha256:
        raise IntegrityError(f"{path}: payload hash mismatch")

    state, offset = {}, 0
    for layer in header.layers:
        shape = tuple(layer["shape"])
        if shape != tuple(expected[layer["name"]].shape):
            raise IntegrityError(f"{path}: layer {layer['name']} has shape {shape}, "
                                 f"expected {tuple(expected[layer['name']].shape)}")
        count = int(np.prod(shape, dtype=np.int64))
        if layer["count"] != count or layer["offset"] != offset:
            raise IntegrityError(f"{path}: layer {layer['name']} offset/count mismatch")
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8)
        state[layer["name"]] = torch.from_numpy(values.reshape(shape).astype(np.float64))
        offset += count
    if offset * 8 != len(payload):
        raise IntegrityError(f"{path}: payload holds {len(payload)} bytes, manifest {offset * 8}")

    model.load_state_dict(state)
    return model
