"""Per-trope comprehension streams over one document.

Each stream pools one view of the document (raw word features,
LSTM-encoded sentence features, or reasoner node states) into one
vector per trope. The trope embedding is projected to a query, the
view rows to keys and values, and the softmax-weighted value sum is
projected back to the trope dim, so every stream emits [num_tropes x
d_f] regardless of the view's length.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import EmptyDocumentError
from .graph import FeatureDoc, SynopsisGraph
from .msrrn import ReasonerParams, run_msrrn, run_rrn
from .numerics import (
    AffineParams,
    LSTMParams,
    Tensor,
    affine,
    concat,
    init_affine,
    init_lstm,
    lstm_cell,
    matmul,
    scale,
    softmax,
    transpose,
)

log = logging.getLogger(__name__)

MAX_WORD_TOKENS = 4096


@dataclass
class StreamParams:
    query_proj: AffineParams  # d_f -> d_a
    key_proj: AffineParams  # view dim -> d_a
    value_proj: AffineParams  # view dim -> d_a
    out_proj: AffineParams  # d_a -> d_f
    sent_rnn: LSTMParams | None = None  # sentence stream only

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.query_proj.named(f"{prefix}.query_proj")
        yield from self.key_proj.named(f"{prefix}.key_proj")
        yield from self.value_proj.named(f"{prefix}.value_proj")
        yield from self.out_proj.named(f"{prefix}.out_proj")
        if self.sent_rnn is not None:
            yield from self.sent_rnn.named(f"{prefix}.sent_rnn")


def init_stream(
    rng: np.random.Generator,
    view_dim: int,
    d_f: int,
    d_a: int,
    rnn_input: int | None = None,
) -> StreamParams:
    """`rnn_input` set => sentence stream; its view is the d_a RNN states."""
    return StreamParams(
        query_proj=init_affine(rng, d_f, d_a),
        key_proj=init_affine(rng, view_dim, d_a),
        value_proj=init_affine(rng, view_dim, d_a),
        out_proj=init_affine(rng, d_a, d_f),
        sent_rnn=None if rnn_input is None else init_lstm(rng, rnn_input, d_a),
    )


def attend(
    e: Tensor,
    feats: Tensor,
    p: StreamParams,
    return_weights: bool = False,
):
    """Trope-query attention pooling of `feats` rows, one result per trope."""
    if feats.shape[0] == 0:
        raise EmptyDocumentError("attend: no positions to attend over")
    d_a = p.query_proj.w.shape[1]
    q = affine(e, p.query_proj.w, p.query_proj.b)
    k = affine(feats, p.key_proj.w, p.key_proj.b)
    v = affine(feats, p.value_proj.w, p.value_proj.b)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_a))
    weights = softmax(scores, axis=-1)  # [num_tropes, L]
    out = affine(matmul(weights, v), p.out_proj.w, p.out_proj.b)
    if return_weights:
        return out, weights
    return out


def word_stream(
    doc: FeatureDoc,
    e: Tensor,
    p: StreamParams,
    max_tokens: int = MAX_WORD_TOKENS,
) -> Tensor:
    """Attention over raw word features, truncated to `max_tokens`."""
    if doc.n_tokens == 0:
        raise EmptyDocumentError(f"doc {doc.doc_id}: no word tokens")
    return attend(e, Tensor(doc.word_feats[:max_tokens]), p)


def sentence_stream(doc: FeatureDoc, e: Tensor, p: StreamParams) -> Tensor:
    """Attention over forward-LSTM states of the sentence sequence."""
    if doc.n_sents == 0:
        raise EmptyDocumentError(f"doc {doc.doc_id}: no sentences")
    if p.sent_rnn is None:
        raise ValueError("sentence stream params lack an RNN")
    d_a = p.sent_rnn.hidden_dim
    h = Tensor(np.zeros((1, d_a)))
    c = Tensor(np.zeros((1, d_a)))
    states = []
    for s in range(doc.n_sents):
        h, c = lstm_cell(h, c, Tensor(doc.sent_feats[s : s + 1]), p.sent_rnn)
        states.append(h)
    return attend(e, concat(states, axis=0), p)


def relation_stream(
    graph: SynopsisGraph,
    e: Tensor,
    reasoner: ReasonerParams,
    p: StreamParams,
    kind: str = "msrrn",
) -> Tensor:
    """Attention over reasoner node states; zero-node graphs yield zeros."""
    if graph.n_nodes == 0:
        log.warning("graph has no entities; relation stream emits zeros")
        return Tensor(np.zeros((e.shape[0], p.out_proj.w.shape[1])))
    run = run_msrrn if kind == "msrrn" else run_rrn
    return attend(e, run(graph, reasoner), p)
