"""The trainable reader: embeddings + encoding pass + ranking, batched.

A Batch packs padded id tensors and masks for a group of samples; the
forward pass builds one tape covering embedding, the full encoding
pass, the token distribution and the candidate distribution, plus the
mean negative log likelihood when every sample in the batch is
labeled. Padding never leaks: masked scans freeze states across padded
steps and both softmaxes mask padded positions to exact zeros, so a
sample's encodings and distributions are identical however much
padding its batch forces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tape, Tensor
from .corpus import PAD_ID, ClozeSample, Vocabulary
from .embed import EmbedConfig, TokenEmbedder, char_id_matrix
from .errors import ContractViolation
from .ranker import (
    PredictionDistribution,
    aggregate_candidates,
    find_occurrences,
    predict,
)
from .reader import AttentionTrace, ReaderConfig, ReaderParams, encode_full, qe_comm_features


@dataclass
class Batch:
    doc_ids: np.ndarray  # (B, n) int64
    doc_mask: np.ndarray  # (B, n) 0/1
    doc_char_ids: np.ndarray  # (B, n, Lc)
    doc_char_mask: np.ndarray
    qry_ids: np.ndarray  # (B, m)
    qry_mask: np.ndarray
    qry_char_ids: np.ndarray
    qry_char_mask: np.ndarray
    ph_idx: np.ndarray  # (B,) placeholder position per sample
    occurrence: np.ndarray  # (B, g_max, n) 0/1 candidate occurrence rows
    answer_idx: np.ndarray  # (B,) row into the candidate list, -1 if unlabeled
    qe: np.ndarray  # (B, n) query-occurrence feature
    samples: list[ClozeSample]

    @property
    def size(self) -> int:
        return len(self.samples)


def assemble_batch(samples: list[ClozeSample], vocab: Vocabulary) -> Batch:
    """Pad a group of samples into one Batch."""
    if not samples:
        raise ContractViolation("cannot assemble an empty batch")
    n = max(len(s.document) for s in samples)
    m = max(len(s.query) for s in samples)
    g = max(len(s.candidates) for s in samples)
    lc_doc = max(max(len(t) for t in s.document) for s in samples)
    lc_qry = max(max(len(t) for t in s.query) for s in samples)
    batch = len(samples)

    doc_ids = np.zeros((batch, n), dtype=np.int64)
    doc_mask = np.zeros((batch, n))
    qry_ids = np.zeros((batch, m), dtype=np.int64)
    qry_mask = np.zeros((batch, m))
    doc_char_ids = np.zeros((batch, n, lc_doc), dtype=np.int64)
    doc_char_mask = np.zeros((batch, n, lc_doc))
    qry_char_ids = np.zeros((batch, m, lc_qry), dtype=np.int64)
    qry_char_mask = np.zeros((batch, m, lc_qry))
    ph_idx = np.zeros(batch, dtype=np.int64)
    occurrence = np.zeros((batch, g, n))
    answer_idx = np.full(batch, -1, dtype=np.int64)
    qe = np.zeros((batch, n))

    for b, s in enumerate(samples):
        dn, qm = len(s.document), len(s.query)
        doc_ids[b, :dn] = [vocab.word_id(t) for t in s.document]
        doc_mask[b, :dn] = 1.0
        qry_ids[b, :qm] = [vocab.word_id(t) for t in s.query]
        qry_mask[b, :qm] = 1.0
        cd, md = char_id_matrix(vocab, s.document, lc_doc)
        doc_char_ids[b, :dn], doc_char_mask[b, :dn] = cd, md
        cq, mq = char_id_matrix(vocab, s.query, lc_qry)
        qry_char_ids[b, :qm], qry_char_mask[b, :qm] = cq, mq
        ph_idx[b] = s.placeholder_index
        occ = find_occurrences(s.document, s.candidates)
        occurrence[b, : len(s.candidates), :dn] = occ.matrix(dn, s.candidates)
        if s.answer is not None:
            answer_idx[b] = s.candidates.index(s.answer)
        qe[b, :dn] = qe_comm_features(s.document, s.query)
    return Batch(
        doc_ids, doc_mask, doc_char_ids, doc_char_mask,
        qry_ids, qry_mask, qry_char_ids, qry_char_mask,
        ph_idx, occurrence, answer_idx, qe, list(samples),
    )


@dataclass
class ForwardResult:
    tape: Tape
    loss: Tensor | None
    token_probs: Tensor  # (B, n)
    cand_probs: Tensor  # (B, g_max)
    doc_enc: Tensor  # (B, n, hidden)
    qry_enc: Tensor  # (B, m, hidden)
    trace: AttentionTrace


class Model:
    def __init__(
        self,
        vocab: Vocabulary,
        embed_cfg: EmbedConfig,
        reader_cfg: ReaderConfig,
        rng: np.random.Generator,
        word_table: Parameter | None = None,
    ):
        reader_cfg.validate()
        self.vocab = vocab
        self.embed_cfg = embed_cfg
        self.reader_cfg = reader_cfg
        self.embedder = TokenEmbedder(rng, vocab, embed_cfg, word_table)
        self.reader_params = ReaderParams.create(rng, reader_cfg, embed_cfg.token_dim)

    def parameters(self) -> list[Parameter]:
        out = self.embedder.parameters() + self.reader_params.parameters()
        ids = [p.id for p in out]
        if len(set(ids)) != len(ids):
            raise ContractViolation("parameter ids are not unique")
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def forward_batch(
        self,
        batch: Batch,
        train: bool = False,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> ForwardResult:
        tape = Tape()
        drop = (dropout, rng, train)
        doc = self.embedder.embed_batch(
            tape, batch.doc_ids, batch.doc_char_ids, batch.doc_char_mask, batch.doc_mask
        )
        qry = self.embedder.embed_batch(
            tape, batch.qry_ids, batch.qry_char_ids, batch.qry_char_mask, batch.qry_mask
        )
        doc = tape.dropout(doc, dropout, rng, train)
        qry = tape.dropout(qry, dropout, rng, train)

        qe = batch.qe if self.reader_cfg.qe_comm else None
        doc_enc, qry_enc, trace = encode_full(
            doc, qry, self.reader_cfg, self.reader_params,
            batch.doc_mask, batch.qry_mask, qe, drop,
        )

        size, n = batch.doc_ids.shape
        hidden = self.reader_cfg.hidden
        at_ph = tape.take_time(qry_enc, batch.ph_idx)  # (B, r)
        scores = tape.reshape(
            tape.matmul(doc_enc, tape.reshape(at_ph, (size, hidden, 1))), (size, n)
        )
        token_probs = tape.masked_softmax(scores, batch.doc_mask)
        raw = tape.reshape(
            tape.matmul(
                tape.constant(batch.occurrence), tape.reshape(token_probs, (size, n, 1))
            ),
            (size, batch.occurrence.shape[1]),
        )
        cand_probs = tape.div(raw, tape.sum_last(raw))

        loss = None
        if (batch.answer_idx >= 0).all():
            onehot = np.zeros(batch.occurrence.shape[:2])
            onehot[np.arange(size), batch.answer_idx] = 1.0
            picked = tape.sum_last(tape.mul(cand_probs, tape.constant(onehot)), keepdims=False)
            loss = tape.neg(tape.mean_all(tape.log(picked)))
        return ForwardResult(tape, loss, token_probs, cand_probs, doc_enc, qry_enc, trace)

    def predict_batch(self, result: ForwardResult, batch: Batch) -> list[PredictionDistribution]:
        """Per-sample distributions from a batched forward, trimmed to
        each sample's real length and candidate set."""
        out = []
        for b, sample in enumerate(batch.samples):
            n = len(sample.document)
            y = np.array(result.token_probs.data[b, :n])
            probs = aggregate_candidates(y, find_occurrences(sample.document, sample.candidates))
            out.append(PredictionDistribution(y, probs, predict(probs)))
        return out

    def predict_sample(self, sample: ClozeSample) -> PredictionDistribution:
        batch = assemble_batch([sample], self.vocab)
        result = self.forward_batch(batch)
        return self.predict_batch(result, batch)[0]

    def encode_sample(self, sample: ClozeSample) -> tuple[np.ndarray, np.ndarray, AttentionTrace]:
        """Final encodings (n, r) / (m, r) and attention trace for one
        sample, unpadded."""
        batch = assemble_batch([sample], self.vocab)
        result = self.forward_batch(batch)
        return (
            np.array(result.doc_enc.data[0]),
            np.array(result.qry_enc.data[0]),
            result.trace,
        )
