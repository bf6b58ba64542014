"""Attention-pooled multi-width text CNN for three-class triage.

For each window width m the document embedding matrix runs through a
valid convolution with full-width filters into a feature map of
L - m + 1 rows. The "acnn" architecture pools those rows with learned
additive attention (so every window position gets a weight); "kimcnn"
replaces the pooling with a per-column max. Pooled vectors from all
widths, concatenated with a small demographics vector, feed a relu MLP
with a softmax head.

Attention never attends to window positions that contain only padding:
those logits are masked out, so their weights are exactly zero and the
remaining weights still sum to one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PAD_ID, EncodedCase
from .embedding import ChecksumError, ConfigError, EmbeddingTable

FORMAT_NAME = "triagenet-model"
FORMAT_VERSION = 1
DEMOGRAPHICS_DIM = 3
ARCHITECTURES = ("acnn", "kimcnn")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture shape knobs; defaults follow the full-scale setup."""

    vocab_size: int
    max_len: int
    embedding_dim: int = 200
    widths: tuple[int, ...] = (1, 2, 3, 4, 5)
    filters: int = 128
    attention_size: int = 100
    mlp_layers: tuple[int, ...] = (256, 64)
    dropout: float = 0.2
    n_classes: int = 3
    arch: str = "acnn"

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover padding and unknown ids")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if not self.widths or len(set(self.widths)) != len(self.widths):
            raise ConfigError("widths must be nonempty and unique")
        if any(m < 1 for m in self.widths):
            raise ConfigError("widths must be positive")
        if max(self.widths) > self.max_len:
            raise ConfigError(
                f"width {max(self.widths)} exceeds max_len {self.max_len}"
            )
        if self.embedding_dim < 1 or self.filters < 1 or self.attention_size < 1:
            raise ConfigError("embedding_dim, filters, attention_size must be >= 1")
        if any(h < 1 for h in self.mlp_layers):
            raise ConfigError("mlp layer sizes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("widths", "mlp_layers"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @property
    def mlp_input_dim(self) -> int:
        return len(self.widths) * self.filters + DEMOGRAPHICS_DIM


@dataclass
class ModelParams:
    """All trainable tensors plus provenance for serialization."""

    config: ModelConfig
    embedding: Tensor
    conv_w: dict[int, Tensor]
    conv_b: dict[int, Tensor]
    attn_w: dict[int, Tensor]
    attn_b: dict[int, Tensor]
    attn_u: dict[int, Tensor]
    mlp: list[tuple[Tensor, Tensor]]
    seed: int = 0
    corpus_hash: str | None = None

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Every tensor under a stable name; this order defines the file layout."""
        out = [("embedding", self.embedding)]
        for m in sorted(self.conv_w):
            out.append((f"conv_w{m}", self.conv_w[m]))
            out.append((f"conv_b{m}", self.conv_b[m]))
            out.append((f"attn_w{m}", self.attn_w[m]))
            out.append((f"attn_b{m}", self.attn_b[m]))
            out.append((f"attn_u{m}", self.attn_u[m]))
        for i, (w, b) in enumerate(self.mlp):
            out.append((f"mlp_w{i}", w))
            out.append((f"mlp_b{i}", b))
        return out

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.data.size for _, t in self.parameters())


@dataclass
class AttentionRecord:
    """Per-width attention weights for one document.

    Each vector has one entry per window position (max_len - m + 1);
    entries whose window lies fully in padding are zero and the rest
    sum to one.
    """

    alphas: dict[int, np.ndarray]
    n_tokens: int


@dataclass
class Prediction:
    """Inference output for one case; ``attention`` is None for kimcnn."""

    probs: np.ndarray
    predicted: int
    attention: AttentionRecord | None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(
    config: ModelConfig,
    seed: int,
    pretrained: EmbeddingTable | None = None,
) -> ModelParams:
    """Scaled-uniform init, deterministic in seed; padding row stays zero.

    A pretrained embedding table replaces the random one after being
    rescaled to the initializer's root-mean-square entry size, so the
    layers above always start from inputs of the scale they expect.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    k, f, a = config.embedding_dim, config.filters, config.attention_size

    if pretrained is not None:
        if pretrained.vectors.shape != (config.vocab_size, k):
            raise ConfigError(
                f"pretrained table {pretrained.vectors.shape} does not match "
                f"({config.vocab_size}, {k})"
            )
        emb = pretrained.vectors.copy()
        # one global scalar brings the table to the scale the layers
        # above were initialized for; cosines and norm ratios survive
        rms = float(np.sqrt(np.mean(np.square(emb[PAD_ID + 1 :]))))
        if rms > 0.0:
            emb *= (0.05 / np.sqrt(3.0)) / rms
    else:
        emb = rng.uniform(-0.05, 0.05, size=(config.vocab_size, k))
    emb[PAD_ID] = 0.0
    embedding = Tensor(emb)
    embedding.frozen_rows = (PAD_ID,)

    conv_w, conv_b = {}, {}
    attn_w, attn_b, attn_u = {}, {}, {}
    for m in config.widths:
        conv_w[m] = Tensor(_glorot(rng, m * k, f, (m * k, f)))
        conv_b[m] = Tensor(np.zeros(f))
        attn_w[m] = Tensor(_glorot(rng, f, a, (f, a)))
        attn_b[m] = Tensor(np.zeros(a))
        attn_u[m] = Tensor(rng.uniform(-np.sqrt(3.0 / a), np.sqrt(3.0 / a), size=a))

    mlp: list[tuple[Tensor, Tensor]] = []
    dims = [config.mlp_input_dim, *config.mlp_layers, config.n_classes]
    for d_in, d_out in zip(dims, dims[1:]):
        mlp.append((Tensor(_glorot(rng, d_in, d_out, (d_in, d_out))), Tensor(np.zeros(d_out))))

    return ModelParams(
        config=config,
        embedding=embedding,
        conv_w=conv_w,
        conv_b=conv_b,
        attn_w=attn_w,
        attn_b=attn_b,
        attn_u=attn_u,
        mlp=mlp,
        seed=seed,
    )


def doc_length(ids: np.ndarray) -> int:
    """Number of leading non-padding positions."""
    nz = np.flatnonzero(np.asarray(ids) != PAD_ID)
    if nz.size == 0:
        raise ad.ShapeError("document contains no real tokens")
    return int(nz[-1]) + 1


def ngram_encode(params: ModelParams, emb: Tensor, m: int) -> Tensor:
    """Feature map for one width: relu conv of every m-token window."""
    windows = ad.unfold(emb, m)
    return ad.relu(ad.add(ad.dot(windows, params.conv_w[m]), params.conv_b[m]))


def attend(params: ModelParams, feats: Tensor, m: int) -> tuple[Tensor, Tensor]:
    """Additive attention over feature-map rows: returns (pooled, weights)."""
    u = ad.tanh(ad.add(ad.dot(feats, params.attn_w[m]), params.attn_b[m]))
    alpha = ad.softmax(ad.dot(u, params.attn_u[m]))
    return ad.dot(alpha, feats), alpha


def forward_graph(
    params: ModelParams,
    ids: np.ndarray,
    demographics: np.ndarray,
    train_mode: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict[int, tuple[Tensor, int]]]:
    """Differentiable forward pass for one document.

    Returns the class-probability tensor and, for acnn, each width's
    attention tensor with its count of unmasked window positions.
    """
    cfg = params.config
    ids = np.asarray(ids)
    if ids.shape != (cfg.max_len,):
        raise ad.ShapeError(f"ids must have shape ({cfg.max_len},), got {ids.shape}")
    n_tokens = doc_length(ids)
    if train_mode and cfg.dropout > 0.0 and dropout_rng is None:
        raise ConfigError("training forward with dropout needs a generator")

    emb = ad.lookup(params.embedding, ids)
    pooled: list[Tensor] = []
    attention: dict[int, tuple[Tensor, int]] = {}
    for m in cfg.widths:
        feats = ngram_encode(params, emb, m)
        if cfg.arch == "kimcnn":
            pooled.append(ad.max_rows(feats))
            continue
        n_valid = min(feats.shape[0], n_tokens)
        valid = feats if n_valid == feats.shape[0] else ad.take_rows(feats, n_valid)
        s, alpha = attend(params, valid, m)
        pooled.append(s)
        attention[m] = (alpha, n_valid)

    h = ad.concat(pooled + [Tensor(demographics)])
    for w, b in params.mlp[:-1]:
        h = ad.relu(ad.add(ad.dot(h, w), b))
        if train_mode and cfg.dropout > 0.0:
            h = ad.dropout(h, cfg.dropout, dropout_rng)
    w_out, b_out = params.mlp[-1]
    probs = ad.softmax(ad.add(ad.dot(h, w_out), b_out))
    return probs, attention


def attention_record(
    params: ModelParams, attention: dict[int, tuple[Tensor, int]], n_tokens: int
) -> AttentionRecord:
    """Zero-pad each width's weights out to its full feature-map length."""
    alphas = {}
    for m, (alpha, n_valid) in attention.items():
        full = np.zeros(params.config.max_len - m + 1)
        full[:n_valid] = alpha.data
        alphas[m] = full
    return AttentionRecord(alphas=alphas, n_tokens=n_tokens)


def predict(params: ModelParams, case: EncodedCase) -> Prediction:
    """Inference-mode forward: probabilities, argmax label, attention."""
    probs, attention = forward_graph(params, case.ids, case.demographics)
    record = None
    if params.config.arch == "acnn":
        record = attention_record(params, attention, doc_length(case.ids))
    return Prediction(
        probs=probs.data.copy(),
        predicted=int(np.argmax(probs.data)),
        attention=record,
    )


# -- persistence -------------------------------------------------------------


def save_model(params: ModelParams, path) -> None:
    """One JSON header line, then every parameter as little-endian float64."""
    named = params.parameters()
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "seed": params.seed,
        "corpus_hash": params.corpus_hash,
        "params": [[name, list(t.data.shape)] for name, t in named],
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise ChecksumError(f"unreadable header: {e}") from e
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ChecksumError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} file")
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise ChecksumError("model blob checksum mismatch")

    config = ModelConfig.from_dict(header["config"])
    params = init_params(config, seed=0)
    params.seed = header["seed"]
    params.corpus_hash = header["corpus_hash"]

    named = params.parameters()
    stored = {name: tuple(shape) for name, shape in header["params"]}
    expected_bytes = sum(int(np.prod(s)) for s in stored.values()) * 8
    if len(blob) != expected_bytes:
        raise ChecksumError(f"blob holds {len(blob)} bytes, header implies {expected_bytes}")
    offset = 0
    for name, tensor in named:
        if name not in stored or stored[name] != tensor.data.shape:
            raise ChecksumError(f"parameter {name} does not match the stored shapes")
        n = tensor.data.size * 8
        tensor.data = (
            np.frombuffer(blob[offset : offset + n], dtype="<f8")
            .reshape(tensor.data.shape)
            .astype(np.float64)
        )
        offset += n
    return params
