"""Classifier architectures, the training loop, and checkpointing.

Four model kinds share one interface:

* ``sacdnet`` — embeds the diagnosis-code sequence, runs multi-head
  self-attention over it, pools over valid positions, extracts dense
  features from vitals/demographics through a SELU MLP, concatenates
  both paths, applies dropout, and classifies through a small head.
* ``fcn`` / ``fcn-dropout`` — attention-free baselines over a multi-hot
  code vector concatenated with the dense features (four ReLU hidden
  layers, or three with dropout 0.3/0.2 after the first two).
* ``logreg`` — a single sigmoid unit over the same flat input.

Training is mini-batch Adam on binary cross-entropy, deterministic for
a given seed (dedicated shuffle and dropout streams). Training mutates
model state and needs exclusive access; with dropout inference-off the
forward pass is read-only, so a trained model may serve predictions
from multiple threads.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import (
    PAD_INDEX,
    Batch,
    EncodedExample,
    Standardizer,
    Vocabulary,
)
from .nn.layers import (
    ActivationKind,
    DenseLayer,
    DropoutMode,
    DropoutSpec,
    MultiHeadAttention,
    dropout_apply,
    glorot_uniform,
    multi_head_attention,
)
from .nn.optim import Adam
from .nn.rng import RngStream
from .nn.tensor import (
    Tensor,
    backward,
    bce_loss,
    concat,
    embedding_lookup,
    masked_mean,
    reshape,
)

MODEL_KINDS = ("sacdnet", "fcn", "fcn-dropout", "logreg")

CHECKPOINT_FORMAT_VERSION = 1

PREDICT_CHUNK = 512

_SHUFFLE_STREAM = 11
_DROPOUT_STREAM = 12


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite during training."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class CheckpointError(RuntimeError):
    """Raised for unreadable or incompatible checkpoint files."""


@dataclass(frozen=True)
class SACDNetConfig:
    """Architecture hyperparameters for the attention model."""

    vocab_size: int
    n_dense_features: int
    max_sequence_length: int = 64
    num_heads: int = 3
    d_q: int = 3
    d_k: int = 3
    d_v: int = 3
    d_model: int = 8
    dense_sizes: Tuple[int, ...] = (256, 128)
    dropout_rate: float = 0.1
    head_sizes: Tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.d_q != self.d_k:
            raise ValueError("query and key dimensions must match")
        sizes = (self.vocab_size, self.n_dense_features, self.max_sequence_length,
                 self.num_heads, self.d_q, self.d_v, self.d_model,
                 *self.dense_sizes, *self.head_sizes)
        if any(s < 1 for s in sizes):
            raise ValueError("all architecture sizes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")


@dataclass(frozen=True)
class BaselineConfig:
    """Layer plan for the attention-free models."""

    vocab_size: int
    n_dense_features: int
    max_sequence_length: int = 64
    hidden_sizes: Tuple[int, ...] = (256, 128, 64, 64)
    dropout_rates: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dropout_rates) != len(self.hidden_sizes):
            raise ValueError("need one dropout rate per hidden layer")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("training config values must be positive")


class SACDNet:
    """Attention-plus-dense classifier over code sequences and vitals."""

    kind = "sacdnet"

    def __init__(self, config: SACDNetConfig, rng: RngStream):
        self.config = config
        c = config
        self.embedding = Tensor(
            glorot_uniform(rng, c.vocab_size, c.d_model, (c.vocab_size, c.d_model)),
            requires_grad=True)
        self.attention = MultiHeadAttention.create(
            num_heads=c.num_heads, d_model=c.d_model, d_q=c.d_q, d_k=c.d_k,
            d_v=c.d_v, d_out=c.num_heads * c.d_v, rng=rng)
        self.dense_path: List[DenseLayer] = []
        width = c.n_dense_features
        for size in c.dense_sizes:
            self.dense_path.append(
                DenseLayer.create(width, size, ActivationKind.SELU, rng))
            width = size
        self.dropout = DropoutSpec(c.dropout_rate)
        feat_width = c.num_heads * c.d_v + width
        self.head: List[DenseLayer] = []
        acts = [ActivationKind.SELU] + [ActivationKind.NONE] * (len(c.head_sizes) - 1)
        for size, act in zip(c.head_sizes, acts):
            self.head.append(DenseLayer.create(feat_width, size, act, rng))
            feat_width = size
        self.output = DenseLayer.create(feat_width, 1, ActivationKind.SIGMOID, rng)
        # the architecture always includes the dropout layer; rate may be 0
        self.has_dropout = True

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {"embedding": self.embedding}
        for i in range(self.attention.num_heads):
            params[f"attention.head{i}.w_query"] = self.attention.w_query[i]
            params[f"attention.head{i}.w_key"] = self.attention.w_key[i]
            params[f"attention.head{i}.w_value"] = self.attention.w_value[i]
        params["attention.w_out"] = self.attention.w_out
        for i, layer in enumerate(self.dense_path):
            params[f"dense_path.{i}.weights"] = layer.weights
            params[f"dense_path.{i}.bias"] = layer.bias
        for i, layer in enumerate(self.head):
            params[f"head.{i}.weights"] = layer.weights
            params[f"head.{i}.bias"] = layer.bias
        params["output.weights"] = self.output.weights
        params["output.bias"] = self.output.bias
        return params

    def forward(self, batch: Batch, mode: DropoutMode = DropoutMode.INFERENCE_OFF,
                rng: Optional[RngStream] = None) -> Tensor:
        """Probabilities in (0, 1), one per batch row."""
        if batch.code_indices.max() >= self.config.vocab_size:
            raise ValueError("batch was encoded with a larger vocabulary "
                             "than this model's")
        trimmed = batch.trimmed()
        embedded = embedding_lookup(self.embedding, trimmed.code_indices,
                                    pad_index=PAD_INDEX)
        attended = multi_head_attention(self.attention, embedded, trimmed.mask)
        pooled = masked_mean(attended, trimmed.mask)

        dense = Tensor(batch.dense_features)
        for layer in self.dense_path:
            dense = layer(dense)

        features = concat([pooled, dense], axis=-1)
        features = dropout_apply(self.dropout.with_mode(mode), features, rng)
        for layer in self.head:
            features = layer(features)
        return reshape(self.output(features), (len(batch),))


class FeedForwardModel:
    """Multi-hot + dense-feature classifier used by the three baselines."""

    def __init__(self, kind: str, config: BaselineConfig, rng: RngStream):
        if kind not in ("fcn", "fcn-dropout", "logreg"):
            raise ValueError(f"unknown feed-forward kind {kind!r}")
        self.kind = kind
        self.config = config
        width = config.vocab_size + config.n_dense_features
        self.layers: List[DenseLayer] = []
        self.dropouts: List[DropoutSpec] = []
        for size, rate in zip(config.hidden_sizes, config.dropout_rates):
            self.layers.append(DenseLayer.create(width, size, ActivationKind.RELU, rng))
            self.dropouts.append(DropoutSpec(rate))
            width = size
        self.output = DenseLayer.create(width, 1, ActivationKind.SIGMOID, rng)
        self.has_dropout = kind == "fcn-dropout"

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.weights"] = layer.weights
            params[f"layers.{i}.bias"] = layer.bias
        params["output.weights"] = self.output.weights
        params["output.bias"] = self.output.bias
        return params

    def forward(self, batch: Batch, mode: DropoutMode = DropoutMode.INFERENCE_OFF,
                rng: Optional[RngStream] = None) -> Tensor:
        flat = np.concatenate(
            [batch.multi_hot(self.config.vocab_size), batch.dense_features], axis=1)
        x = Tensor(flat)
        for layer, spec in zip(self.layers, self.dropouts):
            x = layer(x)
            x = dropout_apply(spec.with_mode(mode), x, rng)
        return reshape(self.output(x), (len(batch),))


Model = Union[SACDNet, FeedForwardModel]


def build_model(kind: str, vocab_size: int, n_dense_features: int,
                max_sequence_length: int, rng: RngStream) -> Model:
    """Construct a model of the given kind with default architecture."""
    if kind == "sacdnet":
        return SACDNet(SACDNetConfig(vocab_size=vocab_size,
                                     n_dense_features=n_dense_features,
                                     max_sequence_length=max_sequence_length), rng)
    if kind == "fcn":
        cfg = BaselineConfig(vocab_size, n_dense_features, max_sequence_length,
                             hidden_sizes=(256, 128, 64, 64),
                             dropout_rates=(0.0, 0.0, 0.0, 0.0))
    elif kind == "fcn-dropout":
        cfg = BaselineConfig(vocab_size, n_dense_features, max_sequence_length,
                             hidden_sizes=(256, 128, 64),
                             dropout_rates=(0.3, 0.2, 0.0))
    elif kind == "logreg":
        cfg = BaselineConfig(vocab_size, n_dense_features, max_sequence_length,
                             hidden_sizes=(), dropout_rates=())
    else:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return FeedForwardModel(kind, cfg, rng)


def predict_proba(model: Model, examples: Union[Sequence[EncodedExample], Batch],
                  mode: DropoutMode = DropoutMode.INFERENCE_OFF,
                  rng: Optional[RngStream] = None) -> np.ndarray:
    """Forward a whole example list in chunks; one probability per example."""
    batch = examples if isinstance(examples, Batch) else Batch.stack(examples)
    probs = []
    for start in range(0, len(batch), PREDICT_CHUNK):
        chunk = batch.take(np.arange(start, min(start + PREDICT_CHUNK, len(batch))))
        probs.append(model.forward(chunk, mode, rng).data)
    return np.concatenate(probs)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float


def train(model: Model, train_examples: Sequence[EncodedExample],
          cfg: TrainConfig) -> List[EpochStats]:
    """Mini-batch Adam on binary cross-entropy; deterministic per seed."""
    if not train_examples:
        raise ValueError("cannot train on an empty example list")
    params = list(model.parameters().values())
    optimizer = Adam(params, lr=cfg.learning_rate)
    shuffle_rng = RngStream(cfg.seed).derive(_SHUFFLE_STREAM)
    dropout_rng = RngStream(cfg.seed).derive(_DROPOUT_STREAM)

    history: List[EpochStats] = []
    full = Batch.stack(train_examples)
    n = len(full)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        n_correct = 0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            batch = full.take(order[start:start + cfg.batch_size])
            optimizer.zero_grad()
            probs = model.forward(batch, DropoutMode.TRAIN, dropout_rng)
            loss = bce_loss(probs, batch.labels)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDiverged(epoch, batch_no, loss_value)
            backward(loss)
            optimizer.step()
            total_loss += loss_value * len(batch)
            n_correct += int(((probs.data >= 0.5) == (batch.labels == 1.0)).sum())
        history.append(EpochStats(epoch=epoch, loss=total_loss / n,
                                  train_accuracy=n_correct / n))
    return history


def write_history(history: Sequence[EpochStats], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "train_accuracy"])
        for row in history:
            writer.writerow([row.epoch, repr(row.loss), repr(row.train_accuracy)])


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(model: Model, vocab: Vocabulary, standardizer: Standardizer,
                    path: Path) -> None:
    """Write a versioned JSON checkpoint embedding the encoders."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_kind": model.kind,
        "config": dataclasses.asdict(model.config),
        "vocabulary": vocab.to_dict(),
        "standardizer": standardizer.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in model.parameters().items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: Path) -> Tuple[Model, Vocabulary, Standardizer]:
    """Reload a checkpoint; forward outputs match the saved model exactly."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} not supported "
                              f"(expected {CHECKPOINT_FORMAT_VERSION})")
    kind = payload["model_kind"]
    cfg = payload["config"]
    rng = RngStream(0)
    if kind == "sacdnet":
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
        model: Model = SACDNet(SACDNetConfig(**cfg), rng)
    else:
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
        model = FeedForwardModel(kind, BaselineConfig(**cfg), rng)
    params = model.parameters()
    saved = payload["params"]
    if set(saved) != set(params):
        raise CheckpointError("checkpoint parameter names do not match the "
                              "model architecture")
    for name, tensor in params.items():
        entry = saved[name]
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if shape != tensor.shape or values.size != tensor.size:
            raise CheckpointError(f"parameter {name}: shape {shape} does not "
                                  f"match architecture {tensor.shape}")
        tensor.data[...] = values.reshape(shape)
    vocab = Vocabulary.from_dict(payload["vocabulary"])
    standardizer = Standardizer.from_dict(payload["standardizer"])
    return model, vocab, standardizer
