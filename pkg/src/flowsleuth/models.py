"""The three detectors: variational autoencoder, deterministic autoencoder
baseline, and Gaussian z-score thresholding, plus training and persistence.

The VAE and AE share one architecture: encoder 53 -> 512 -> 512 -> 1024 (ReLU),
a 100-wide latent (Gaussian head for the VAE, plain linear for the AE), and a
mirrored decoder ending in a linear 53-wide output. Anomaly scores are mean
square reconstruction errors; the VAE decodes the latent mean (noise = 0), so
scoring is deterministic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import ClassVar, Optional, Sequence

import numpy as np

from .features import (EPS_STD, FEATURE_NAMES, EmptyDataset, Normalizer,
                       feature_list_hash)
from .nn import (AdamState, DenseLayer, GaussianHead, ShapeMismatch, Tape,
                 adam_step, gaussian_kl_per_row)

ENCODER_WIDTHS = (512, 512, 1024)
LATENT_WIDTH = 100
DECODER_WIDTHS = (1024, 512, 512)

MODEL_MAGIC = b"GEEM"
MODEL_VERSION = 1


class CorruptFile(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class FeatureListMismatch(ValueError):
    pass


class KindMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class NonFiniteActivation(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    minibatch: int = 300
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    shuffle: bool = True
    mc_samples: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.minibatch < 1 or self.learning_rate <= 0 \
                or self.weight_decay < 0 or self.mc_samples < 1:
            raise ValueError(f"invalid training configuration: {self}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "minibatch": self.minibatch,
            "learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
            "seed": self.seed, "shuffle": self.shuffle, "mc_samples": self.mc_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


AE_DEFAULT_CONFIG = TrainConfig(minibatch=256)


@dataclass
class VaeModel:
    kind: ClassVar[str] = "vae"

    encoder: list
    head: GaussianHead
    decoder: list
    normalizer: Optional[Normalizer]
    feature_names: tuple = FEATURE_NAMES
    config: TrainConfig = TrainConfig()
    seed: int = 0
    loss_history: list = field(default_factory=list)

    @property
    def feature_list_hash(self) -> str:
        return feature_list_hash(self.feature_names)

    def layers(self) -> list:
        return list(self.encoder) + [self.head.mu_layer, self.head.logvar_layer] + list(self.decoder)

    def params(self) -> list:
        out = []
        for layer in self.layers():
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def grads(self) -> list:
        out = []
        for layer in self.layers():
            gw = layer.grad_weights if layer.grad_weights is not None else np.zeros_like(layer.weights)
            gb = layer.grad_bias if layer.grad_bias is not None else np.zeros_like(layer.bias)
            out.append(gw)
            out.append(gb)
        return out

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()

    def astype(self, dtype) -> "VaeModel":
        return VaeModel([l.astype(dtype) for l in self.encoder], self.head.astype(dtype),
                        [l.astype(dtype) for l in self.decoder], self.normalizer,
                        self.feature_names, self.config, self.seed, list(self.loss_history))


@dataclass
class AeModel:
    kind: ClassVar[str] = "ae"

    encoder: list
    latent: DenseLayer
    decoder: list
    normalizer: Optional[Normalizer]
    feature_names: tuple = FEATURE_NAMES
    config: TrainConfig = AE_DEFAULT_CONFIG
    seed: int = 0
    loss_history: list = field(default_factory=list)

    @property
    def feature_list_hash(self) -> str:
        return feature_list_hash(self.feature_names)

    def layers(self) -> list:
        return list(self.encoder) + [self.latent] + list(self.decoder)

    def params(self) -> list:
        out = []
        for layer in self.layers():
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def grads(self) -> list:
        out = []
        for layer in self.layers():
            gw = layer.grad_weights if layer.grad_weights is not None else np.zeros_like(layer.weights)
            gb = layer.grad_bias if layer.grad_bias is not None else np.zeros_like(layer.bias)
            out.append(gw)
            out.append(gb)
        return out

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()


@dataclass
class GbtModel:
    """Independent per-feature Gaussians; scores are built from |z| statistics."""

    kind: ClassVar[str] = "gbt"

    means: np.ndarray
    stds: np.ndarray
    normalizer: Optional[Normalizer]
    feature_names: tuple = FEATURE_NAMES
    seed: int = 0

    @property
    def feature_list_hash(self) -> str:
        return feature_list_hash(self.feature_names)


def _build_stack(widths: Sequence[int], activations: Sequence[str],
                 rng: np.random.Generator, dtype) -> list:
    return [DenseLayer.glorot(widths[i], widths[i + 1], activations[i], rng, dtype)
            for i in range(len(widths) - 1)]


def build_vae(feature_names: Sequence[str] = FEATURE_NAMES,
              normalizer: Optional[Normalizer] = None,
              config: TrainConfig = TrainConfig(),
              dtype=np.float32) -> VaeModel:
    """Freshly initialized VAE (Glorot-uniform weights, zero biases, seeded)."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    f = len(feature_names)
    enc = _build_stack((f,) + ENCODER_WIDTHS, ["relu"] * 3, rng, dtype)
    head = GaussianHead.glorot(ENCODER_WIDTHS[-1], LATENT_WIDTH, rng, dtype)
    dec = _build_stack((LATENT_WIDTH,) + DECODER_WIDTHS + (f,),
                       ["relu"] * 3 + ["linear"], rng, dtype)
    return VaeModel(enc, head, dec, normalizer, tuple(feature_names), config, config.seed)


def build_ae(feature_names: Sequence[str] = FEATURE_NAMES,
             normalizer: Optional[Normalizer] = None,
             config: TrainConfig = AE_DEFAULT_CONFIG,
             dtype=np.float32) -> AeModel:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    f = len(feature_names)
    enc = _build_stack((f,) + ENCODER_WIDTHS, ["relu"] * 3, rng, dtype)
    latent = DenseLayer.glorot(ENCODER_WIDTHS[-1], LATENT_WIDTH, "linear", rng, dtype)
    dec = _build_stack((LATENT_WIDTH,) + DECODER_WIDTHS + (f,),
                       ["relu"] * 3 + ["linear"], rng, dtype)
    return AeModel(enc, latent, dec, normalizer, tuple(feature_names), config, config.seed)


def vae_objective(model: VaeModel, X: np.ndarray, noise: np.ndarray,
                  tape: Optional[Tape] = None):
    """Recorded forward pass of the variational objective on a batch.

    Returns (x_leaf, loss_node, per_row_losses, tape). The loss node is the
    batch SUM of per-sample losses 0.5*||x - xhat||^2 + KL; callers seed
    backward() with 1/B for a mean-loss gradient.
    """
    if tape is None:
        tape = Tape()
    x = tape.leaf(X)
    h = tape.chain(model.encoder, x)
    mu = tape.dense(model.head.mu_layer, h)
    logvar = tape.dense(model.head.logvar_layer, h)
    if noise.ndim == 3:  # (mc_samples, B, latent)
        recon = None
        recon_rows = 0.0
        for s in range(noise.shape[0]):
            z = tape.reparameterize(mu, logvar, noise[s])
            xhat = tape.chain(model.decoder, z)
            term = tape.half_sq_residual_sum(xhat, x)
            recon = term if recon is None else tape.add(recon, term)
            recon_rows = recon_rows + 0.5 * ((xhat.value - X) ** 2).sum(axis=1)
        recon = tape.scale(recon, 1.0 / noise.shape[0])
        recon_rows = recon_rows / noise.shape[0]
    else:
        z = tape.reparameterize(mu, logvar, noise)
        xhat = tape.chain(model.decoder, z)
        recon = tape.half_sq_residual_sum(xhat, x)
        recon_rows = 0.5 * ((xhat.value - X) ** 2).sum(axis=1)
    kl = tape.gaussian_kl_sum(mu, logvar)
    loss = tape.add(recon, kl)
    if not np.isfinite(loss.value):
        raise NonFiniteActivation("non-finite value in variational objective")
    per_row = recon_rows + gaussian_kl_per_row(mu.value, logvar.value)
    return x, loss, per_row, tape


def vae_loss(model: VaeModel, x: np.ndarray, noise: np.ndarray) -> float:
    """Negative variational lower bound (up to constants) at one data point."""
    X = np.atleast_2d(np.asarray(x))
    nz = np.atleast_2d(np.asarray(noise))
    _, loss, _, _ = vae_objective(model, X, nz)
    return float(loss.value)


def _ae_objective(model: AeModel, X: np.ndarray, tape: Optional[Tape] = None):
    """Sum of 0.5*||x - xhat||^2 over the batch for the deterministic AE."""
    if tape is None:
        tape = Tape()
    x = tape.leaf(X)
    h = tape.chain(model.encoder, x)
    z = tape.dense(model.latent, h)
    xhat = tape.chain(model.decoder, z)
    loss = tape.half_sq_residual_sum(xhat, x)
    if not np.isfinite(loss.value):
        raise NonFiniteActivation("non-finite value in reconstruction objective")
    per_row = ((xhat.value - X) ** 2).mean(axis=1)
    return x, loss, per_row, tape


def _check_dataset(dataset: np.ndarray, width: int) -> np.ndarray:
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyDataset("training dataset is empty")
    if data.shape[1] != width:
        raise ShapeMismatch(f"expected {width}-wide features, got {data.shape[1]}")
    if not np.isfinite(data).all():
        raise ValueError("non-finite values in training dataset")
    return data


def train_vae(dataset: np.ndarray, config: TrainConfig = TrainConfig(),
              feature_names: Sequence[str] = FEATURE_NAMES,
              normalizer: Optional[Normalizer] = None) -> VaeModel:
    """Train the VAE by Adam on the mean minibatch loss; labels never enter.

    Deterministic for a fixed seed: initialization, epoch shuffles and noise
    draws all come from one seeded generator.
    """
    data = _check_dataset(dataset, len(feature_names))
    n = data.shape[0]
    model = build_vae(feature_names, normalizer, config)
    rng = np.random.Generator(np.random.PCG64((config.seed, 1)))
    adam = AdamState(learning_rate=config.learning_rate,
                     weight_decay=config.weight_decay)
    params = model.params()
    mb = config.minibatch
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            X = data[idx]
            b = X.shape[0]
            shape = (b, LATENT_WIDTH) if config.mc_samples == 1 \
                else (config.mc_samples, b, LATENT_WIDTH)
            noise = rng.standard_normal(shape, dtype=np.float32)
            model.zero_grad()
            try:
                x_leaf, loss, per_row, tape = vae_objective(model, X, noise)
            except NonFiniteActivation as exc:
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: {exc}") from exc
            tape.backward(loss, seed=1.0 / b)
            adam_step(adam, params, model.grads())
            epoch_loss += float(per_row.sum())
        model.loss_history.append(epoch_loss / n)
    return model


def train_ae(dataset: np.ndarray, config: TrainConfig = AE_DEFAULT_CONFIG,
             feature_names: Sequence[str] = FEATURE_NAMES,
             normalizer: Optional[Normalizer] = None) -> AeModel:
    """Train the AE baseline by Adam on the minibatch mean square error."""
    data = _check_dataset(dataset, len(feature_names))
    n = data.shape[0]
    f = data.shape[1]
    model = build_ae(feature_names, normalizer, config)
    rng = np.random.Generator(np.random.PCG64((config.seed, 1)))
    adam = AdamState(learning_rate=config.learning_rate,
                     weight_decay=config.weight_decay)
    params = model.params()
    mb = config.minibatch
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, mb):
            X = data[order[start:start + mb]]
            b = X.shape[0]
            model.zero_grad()
            try:
                x_leaf, loss, per_row, tape = _ae_objective(model, X)
            except NonFiniteActivation as exc:
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: {exc}") from exc
            # Seed converts the recorded 0.5*sum(..) into the MSE gradient.
            tape.backward(loss, seed=2.0 / (b * f))
            adam_step(adam, params, model.grads())
            epoch_loss += float(per_row.sum())
        model.loss_history.append(epoch_loss / n)
    return model


def _forward_chain(layers: Sequence[DenseLayer], X: np.ndarray) -> np.ndarray:
    for layer in layers:
        X = X @ layer.weights.T + layer.bias
        if layer.activation == "relu":
            np.maximum(X, 0.0, out=X)
    return X


def decode_expectation(model, X: np.ndarray) -> np.ndarray:
    """Deterministic reconstruction: latent mean for the VAE, plain latent for the AE."""
    X = np.asarray(X, dtype=model.params()[0].dtype)
    h = _forward_chain(model.encoder, X)
    if isinstance(model, VaeModel):
        z = h @ model.head.mu_layer.weights.T + model.head.mu_layer.bias
    else:
        z = h @ model.latent.weights.T + model.latent.bias
    return _forward_chain(model.decoder, z)


def reconstruction_errors(model, X: np.ndarray) -> np.ndarray:
    """Mean square reconstruction error per row; the anomaly score."""
    X2 = np.atleast_2d(np.asarray(X, dtype=np.float32))
    xhat = decode_expectation(model, X2)
    return np.mean((X2.astype(np.float64) - xhat.astype(np.float64)) ** 2, axis=1)


def reconstruction_error(model, x: np.ndarray) -> float:
    return float(reconstruction_errors(model, np.atleast_2d(x))[0])


def gbt_fit(dataset: np.ndarray, feature_names: Sequence[str] = FEATURE_NAMES,
            normalizer: Optional[Normalizer] = None, seed: int = 0) -> GbtModel:
    """Fit per-feature mean and population std (floored at EPS_STD)."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyDataset("training dataset is empty")
    means = data.mean(axis=0)
    stds = np.maximum(data.std(axis=0), EPS_STD)
    return GbtModel(means, stds, normalizer, tuple(feature_names), seed)


def gbt_scores(model: GbtModel, X: np.ndarray) -> np.ndarray:
    """Per-row score: mean(|z|) * population-std(|z|) * max(|z|)."""
    X2 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    z = np.abs(X2 - model.means) / model.stds
    return z.mean(axis=1) * z.std(axis=1) * z.max(axis=1)


def gbt_score(model: GbtModel, x: np.ndarray) -> float:
    return float(gbt_scores(model, np.atleast_2d(x))[0])


# --- Persistence (GEEM) ------------------------------------------------------
#
# magic(4) | version u32 | header_len u32 + header JSON | blob_len u64 +
# float32 LE parameter blob | sha256 of everything before it (32 bytes).

def _architecture_table(model) -> list:
    table = []
    if isinstance(model, VaeModel):
        groups = ([("encoder", l) for l in model.encoder]
                  + [("head_mu", model.head.mu_layer), ("head_logvar", model.head.logvar_layer)]
                  + [("decoder", l) for l in model.decoder])
    else:
        groups = ([("encoder", l) for l in model.encoder]
                  + [("latent", model.latent)]
                  + [("decoder", l) for l in model.decoder])
    for role, layer in groups:
        table.append({"role": role, "shape": list(layer.weights.shape),
                      "activation": layer.activation})
    return table


def save_model(model, path: str) -> None:
    header = {
        "kind": model.kind,
        "feature_names": list(model.feature_names),
        "feature_list_hash": model.feature_list_hash,
        "normalizer": model.normalizer.to_dict() if model.normalizer else None,
        "seed": model.seed,
    }
    blob = b""
    if isinstance(model, GbtModel):
        header["gbt"] = {"means": [float(x) for x in model.means],
                         "stds": [float(x) for x in model.stds]}
    else:
        header["config"] = model.config.to_dict()
        header["loss_history"] = [float(x) for x in model.loss_history]
        header["architecture"] = _architecture_table(model)
        parts = []
        for layer in model.layers():
            parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
        blob = b"".join(parts)
    header_b = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (MODEL_MAGIC + struct.pack("<I", MODEL_VERSION)
            + struct.pack("<I", len(header_b)) + header_b
            + struct.pack("<Q", len(blob)) + blob)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_model(path: str):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 48 or data[:4] != MODEL_MAGIC:
        raise CorruptFile(f"{path}: not a model file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != MODEL_VERSION:
        raise VersionMismatch(f"{path}: model format version {version}, expected {MODEL_VERSION}")
    (header_len,) = struct.unpack_from("<I", body, 8)
    pos = 12
    header = json.loads(body[pos:pos + header_len])
    pos += header_len
    (blob_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    blob = body[pos:pos + blob_len]
    names = tuple(header["feature_names"])
    if feature_list_hash(names) != header["feature_list_hash"]:
        raise CorruptFile(f"{path}: stored feature list does not match its hash")
    norm = Normalizer.from_dict(header["normalizer"]) if header.get("normalizer") else None
    kind = header.get("kind")
    if kind == "gbt":
        g = header["gbt"]
        return GbtModel(np.asarray(g["means"], dtype=np.float64),
                        np.asarray(g["stds"], dtype=np.float64),
                        norm, names, header.get("seed", 0))
    if kind not in ("vae", "ae"):
        raise CorruptFile(f"{path}: unknown model kind {kind!r}")
    layers = []
    offset = 0
    for entry in header["architecture"]:
        out_w, in_w = entry["shape"]
        w = np.frombuffer(blob, dtype="<f4", count=out_w * in_w,
                          offset=offset).reshape(out_w, in_w).copy()
        offset += out_w * in_w * 4
        b = np.frombuffer(blob, dtype="<f4", count=out_w, offset=offset).copy()
        offset += out_w * 4
        layers.append((entry["role"], DenseLayer(w, b, entry["activation"])))
    if offset != len(blob):
        raise CorruptFile(f"{path}: parameter blob length mismatch")
    config = TrainConfig.from_dict(header["config"])
    history = list(header.get("loss_history", []))
    by_role = dict(layers)
    enc = [l for r, l in layers if r == "encoder"]
    dec = [l for r, l in layers if r == "decoder"]
    if kind == "vae":
        if "head_mu" not in by_role or "head_logvar" not in by_role:
            raise CorruptFile(f"{path}: VAE file lacks Gaussian head layers")
        head = GaussianHead(by_role["head_mu"], by_role["head_logvar"])
        return VaeModel(enc, head, dec, norm, names, config,
                        header.get("seed", 0), history)
    if "latent" not in by_role:
        raise CorruptFile(f"{path}: AE file lacks a latent layer")
    return AeModel(enc, by_role["latent"], dec, norm, names, config,
                   header.get("seed", 0), history)


def check_feature_hash(model, file_hash: str, context: str = "") -> None:
    if model.feature_list_hash != file_hash:
        raise FeatureListMismatch(
            f"feature list hash mismatch{(' in ' + context) if context else ''}: "
            f"model has {model.feature_list_hash[:12]}.., data has {file_hash[:12]}..")
