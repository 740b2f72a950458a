"""Model head and training loop for multi-label trope detection.

A learned trope embedding queries each enabled comprehension stream,
a per-trope softmax over streams mixes the pooled results, and a
shared two-layer predictor maps concat(mixed, embedding) to one logit
per trope. Training minimizes positively-reweighted binary cross
entropy with Adam.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, MulComError, ValidationError
from .graph import FeatureDoc, SynopsisGraph, build_graph, label_matrix
from .ioutil import atomic_write_text, canonical_json
from .metrics import f1 as f1_metric
from .msrrn import ReasonerParams, init_reasoner
from .numerics import (
    MLPParams,
    Tensor,
    add,
    backward,
    concat,
    init_mlp,
    mlp_apply,
    mul,
    neg,
    param,
    reduce_mean,
    reshape,
    rng_from_seed,
    slice_last,
    softmax,
    softplus,
    stack,
    Tape,
)
from .streams import (
    StreamParams,
    init_stream,
    relation_stream,
    sentence_stream,
    word_stream,
)

log = logging.getLogger(__name__)

Array = np.ndarray

STREAM_NAMES = ("word", "sentence", "relation")

CHECKPOINT_FORMAT = "mulcom-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_tropes: int
    d_w: int  # word feature dim
    d_s: int  # sentence feature dim
    d_f: int = 64  # trope embedding dim
    d_a: int = 64  # stream attention dim
    d_h: int = 64  # reasoner hidden dim
    reasoner_steps: int = 3
    reasoner_heads: int = 4
    relation_reasoner: str = "msrrn"
    streams: tuple[str, ...] = STREAM_NAMES
    max_word_tokens: int = 4096

    def __post_init__(self):
        self.streams = tuple(self.streams)
        if self.num_tropes < 1:
            raise ConfigError(f"num_tropes must be >= 1, got {self.num_tropes}")
        for name, v in (("d_w", self.d_w), ("d_s", self.d_s), ("d_f", self.d_f),
                        ("d_a", self.d_a), ("d_h", self.d_h)):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if not self.streams:
            raise ConfigError("at least one stream must be enabled")
        if len(set(self.streams)) != len(self.streams):
            raise ConfigError(f"duplicate stream in {self.streams}")
        for s in self.streams:
            if s not in STREAM_NAMES:
                raise ConfigError(f"unknown stream {s!r}; valid: {STREAM_NAMES}")
        if self.relation_reasoner not in ("msrrn", "rrn"):
            raise ConfigError(
                f"relation_reasoner must be 'msrrn' or 'rrn', "
                f"got {self.relation_reasoner!r}"
            )
        if self.max_word_tokens < 1:
            raise ConfigError("max_word_tokens must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**{**d, "streams": tuple(d["streams"])})
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc


class MulComModel:
    """Parameter container; all computation lives in module functions."""

    def __init__(
        self,
        cfg: ModelConfig,
        E: Tensor,
        streams: dict[str, StreamParams],
        reasoner: ReasonerParams | None,
        stream_attn_mlp: MLPParams,
        predictor: MLPParams,
    ):
        self.cfg = cfg
        self.E = E
        self.streams = streams
        self.reasoner = reasoner
        self.stream_attn_mlp = stream_attn_mlp
        self.predictor = predictor

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"trope_embedding": self.E}
        for name in self.cfg.streams:
            out.update(self.streams[name].named(f"stream.{name}"))
        if self.reasoner is not None:
            out.update(self.reasoner.named("reasoner"))
        out.update(dict(self.stream_attn_mlp.named("stream_attn")))
        out.update(dict(self.predictor.named("predictor")))
        return out


def build_model(cfg: ModelConfig, seed: int = 0) -> MulComModel:
    rng = rng_from_seed(seed, stream=1)
    E = param(rng.standard_normal((cfg.num_tropes, cfg.d_f)) / math.sqrt(cfg.d_f))
    streams: dict[str, StreamParams] = {}
    reasoner = None
    for name in cfg.streams:
        if name == "word":
            streams[name] = init_stream(rng, cfg.d_w, cfg.d_f, cfg.d_a)
        elif name == "sentence":
            streams[name] = init_stream(
                rng, cfg.d_a, cfg.d_f, cfg.d_a, rnn_input=cfg.d_s
            )
        else:
            reasoner = init_reasoner(
                rng, cfg.d_s, cfg.d_h, cfg.reasoner_steps, cfg.reasoner_heads
            )
            streams[name] = init_stream(rng, cfg.d_h, cfg.d_f, cfg.d_a)
    attn_mlp = init_mlp(rng, (cfg.d_f, cfg.d_f, len(cfg.streams)))
    predictor = init_mlp(rng, (2 * cfg.d_f, cfg.d_f, 1))
    return MulComModel(cfg, E, streams, reasoner, attn_mlp, predictor)


def stream_attention(model: MulComModel) -> Tensor:
    """Per-trope softmax over enabled streams, [num_tropes, n_streams]."""
    return softmax(mlp_apply(model.E, model.stream_attn_mlp), axis=-1)


def organize(
    outputs: dict[str, Tensor], attn: Tensor, order: Sequence[str]
) -> Tensor:
    """Mix per-stream pooled rows with per-trope attention weights."""
    missing = [s for s in order if s not in outputs]
    if missing:
        raise MulComError(f"organize: missing stream outputs {missing}")
    mixed = None
    for s_idx, name in enumerate(order):
        weighted = mul(slice_last(attn, s_idx, s_idx + 1), outputs[name])
        mixed = weighted if mixed is None else add(mixed, weighted)
    return mixed


def predict_logits(model: MulComModel, mixed: Tensor) -> Tensor:
    """One raw logit per trope from concat(mixed row, embedding row)."""
    z = concat([mixed, model.E], axis=-1)
    return reshape(mlp_apply(z, model.predictor), (model.cfg.num_tropes,))


def bce_loss(logits: Tensor, targets: Array, pos_weight: float = 1.0) -> Tensor:
    """Mean over all cells of p*y*log-loss(+) + (1-y)*log-loss(-).

    Uses softplus identities -log sigmoid(x) = softplus(-x) and
    -log(1 - sigmoid(x)) = softplus(x), so large logits cannot overflow.
    """
    targets = np.asarray(targets)
    if not np.isin(targets, (0, 1)).all():
        raise ValidationError("bce_loss targets must be binary")
    if pos_weight <= 0:
        raise ValidationError(f"pos_weight must be positive, got {pos_weight}")
    y = targets.astype(np.float64)
    if logits.shape != y.shape:
        raise ValidationError(
            f"bce_loss shapes differ: logits {logits.shape}, targets {y.shape}"
        )
    pos = mul(Tensor(pos_weight * y), softplus(neg(logits)))
    neg_term = mul(Tensor(1.0 - y), softplus(logits))
    return reduce_mean(add(pos, neg_term))


def forward_logits(
    model: MulComModel, doc: FeatureDoc, graph: SynopsisGraph | None = None
) -> Tensor:
    """Raw per-trope logits for one document."""
    cfg = model.cfg
    outs: dict[str, Tensor] = {}
    for name in cfg.streams:
        if name == "word":
            outs[name] = word_stream(
                doc, model.E, model.streams[name], cfg.max_word_tokens
            )
        elif name == "sentence":
            outs[name] = sentence_stream(doc, model.E, model.streams[name])
        else:
            g = graph if graph is not None else build_graph(doc)
            outs[name] = relation_stream(
                g, model.E, model.reasoner, model.streams[name],
                kind=cfg.relation_reasoner,
            )
    mixed = organize(outs, stream_attention(model), cfg.streams)
    return predict_logits(model, mixed)


def forward(
    model: MulComModel, doc: FeatureDoc, graph: SynopsisGraph | None = None
) -> Array:
    """Per-trope scores in (0, 1); no gradients are recorded."""
    logits = forward_logits(model, doc, graph)
    return 1.0 / (1.0 + np.exp(-logits.data))


def score_dataset(
    model: MulComModel,
    docs: Sequence[FeatureDoc],
    graphs: Sequence[SynopsisGraph] | None = None,
) -> Array:
    scores = np.zeros((len(docs), model.cfg.num_tropes))
    for i, doc in enumerate(docs):
        scores[i] = forward(model, doc, None if graphs is None else graphs[i])
    return scores


class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    pos_weight: float | None = None  # None -> neg/pos of the split in [1, 20]
    threshold: float = 0.5
    early_stop_f1: float | None = None  # percentage; needs val docs

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise ConfigError("pos_weight must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    val_micro_f1: list[float] = field(default_factory=list)
    pos_weight: float = 1.0
    epochs_run: int = 0
    stopped_early: bool = False


def default_pos_weight(y: Array) -> float:
    """Negative/positive cell ratio of the split, clamped to [1, 20]."""
    pos = float(y.sum())
    if pos == 0:
        return 1.0
    ratio = (y.size - pos) / pos
    return float(min(max(ratio, 1.0), 20.0))


def _prebuild_graphs(
    model: MulComModel, docs: Sequence[FeatureDoc]
) -> list[SynopsisGraph] | None:
    if "relation" not in model.cfg.streams:
        return None
    return [build_graph(d) for d in docs]


def train(
    model: MulComModel,
    docs: Sequence[FeatureDoc],
    cfg: TrainConfig,
    val_docs: Sequence[FeatureDoc] | None = None,
) -> TrainResult:
    """Mini-batch Adam on weighted BCE; optional early stop on val F1."""
    if not docs:
        raise ValidationError("train: empty training split")
    num_tropes = model.cfg.num_tropes
    y = label_matrix(docs, num_tropes)
    pos_weight = cfg.pos_weight if cfg.pos_weight is not None else default_pos_weight(y)
    graphs = _prebuild_graphs(model, docs)
    val_graphs = (
        _prebuild_graphs(model, val_docs) if val_docs is not None else None
    )
    val_y = label_matrix(val_docs, num_tropes) if val_docs is not None else None

    params = model.named_parameters()
    opt = Adam(params, lr=cfg.learning_rate)
    shuffle_rng = rng_from_seed(cfg.seed, stream=3)
    result = TrainResult(pos_weight=pos_weight)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(docs))
        batch_losses = []
        for start in range(0, len(docs), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            tape = Tape()
            with tape:
                logits = stack(
                    [
                        forward_logits(
                            model, docs[i], None if graphs is None else graphs[i]
                        )
                        for i in idx
                    ],
                    axis=0,
                )
                loss = bce_loss(logits, y[idx], pos_weight)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise MulComError(
                    f"non-finite loss {loss_val} at epoch {epoch} "
                    f"batch starting {start} (docs {[docs[i].doc_id for i in idx]})"
                )
            backward(loss, tape)
            opt.step()
            batch_losses.append(loss_val)
        epoch_loss = float(np.mean(batch_losses))
        result.epoch_losses.append(epoch_loss)
        result.epochs_run = epoch + 1

        msg = f"epoch {epoch + 1}/{cfg.epochs} loss {epoch_loss:.4f}"
        if val_docs is not None:
            scores = score_dataset(model, val_docs, val_graphs)
            preds = (scores >= cfg.threshold).astype(np.int64)
            val_f1 = f1_metric(preds, val_y, mode="micro")
            result.val_micro_f1.append(val_f1)
            msg += f" val micro-F1 {val_f1:.2f}"
            if cfg.early_stop_f1 is not None and val_f1 >= cfg.early_stop_f1:
                log.info("%s (early stop)", msg)
                result.stopped_early = True
                break
        log.info(msg)
    return result


def save_checkpoint(model: MulComModel, path: str) -> None:
    """Bit-exact JSON container of config and every named parameter."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in model.named_parameters().items()
        },
    }
    atomic_write_text(path, canonical_json(payload) + "\n")


def load_checkpoint(path: str) -> MulComModel:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"checkpoint {path}: invalid JSON: {exc}", path=path)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(
            f"checkpoint {path}: unexpected format {payload.get('format')!r}",
            path=path,
        )
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(
            f"checkpoint {path}: unsupported version {payload.get('version')!r}",
            path=path,
        )
    model = build_model(ModelConfig.from_dict(payload["config"]), seed=0)
    params = model.named_parameters()
    stored = payload["params"]
    if set(stored) != set(params):
        raise DataFormatError(
            f"checkpoint {path}: parameter names do not match the config",
            path=path,
        )
    for name, t in params.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise DataFormatError(
                f"checkpoint {path}: {name} has shape {shape}, expected {t.shape}",
                path=path,
            )
        t.data[...] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    return model
