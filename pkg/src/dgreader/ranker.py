"""Candidate ranking: placeholder-to-document attention, occurrence
summation, and prediction dumps.

The token distribution is a softmax over document positions of the dot
product between each final document state and the final query state at
the placeholder. A candidate's score is the sum of that distribution
over the candidate's occurrence positions in ascending order (so the
result is bit-identical to a per-position scan), renormalized over the
candidate set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DimensionError, ParseError


@dataclass
class CandidateOccurrences:
    """Ascending occurrence positions per candidate."""

    positions: dict[str, list[int]]

    def matrix(self, doc_len: int, order: list[str]) -> np.ndarray:
        """0/1 matrix (num candidates, doc_len) in the given candidate
        order, for batched aggregation."""
        out = np.zeros((len(order), doc_len))
        for row, cand in enumerate(order):
            out[row, self.positions[cand]] = 1.0
        return out


def find_occurrences(document: list[str], candidates: list[str]) -> CandidateOccurrences:
    positions = {c: [] for c in candidates}
    for i, tok in enumerate(document):
        if tok in positions:
            positions[tok].append(i)
    for cand, pos in positions.items():
        if not pos:
            raise ContractViolation(f"candidate {cand!r} does not occur in the document")
    return CandidateOccurrences(positions)


def token_distribution(
    doc_enc: np.ndarray,
    qry_enc: np.ndarray,
    placeholder_index: int,
    doc_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Softmax over document positions of doc_enc @ qry_enc[placeholder]."""
    doc_enc = np.asarray(doc_enc, dtype=np.float64)
    qry_enc = np.asarray(qry_enc, dtype=np.float64)
    if doc_enc.ndim != 2 or qry_enc.ndim != 2 or doc_enc.shape[1] != qry_enc.shape[1]:
        raise DimensionError(
            f"encodings must be (n, r) and (m, r): {doc_enc.shape} vs {qry_enc.shape}"
        )
    if not 0 <= placeholder_index < qry_enc.shape[0]:
        raise ContractViolation(
            f"placeholder index {placeholder_index} outside query length {qry_enc.shape[0]}"
        )
    scores = doc_enc @ qry_enc[placeholder_index]
    if doc_mask is not None:
        mask = np.asarray(doc_mask, dtype=np.float64)
        if not mask.any():
            raise ContractViolation("token_distribution: document mask is all zero")
        scores = scores + (mask - 1.0) * 1e30
    shifted = np.exp(scores - scores.max())
    if doc_mask is not None:
        shifted = shifted * mask
    return shifted / shifted.sum()


def aggregate_candidates(
    y: np.ndarray, occurrences: CandidateOccurrences
) -> dict[str, float]:
    """Pointer-sum aggregation, renormalized over the candidate set.

    Each candidate's mass is accumulated over its positions in
    ascending order; keep that order when comparing against a direct
    per-position scan.
    """
    y = np.asarray(y, dtype=np.float64)
    raw: dict[str, float] = {}
    for cand, positions in occurrences.positions.items():
        total = 0.0
        for pos in positions:
            if pos >= y.shape[0]:
                raise ContractViolation(
                    f"occurrence position {pos} outside distribution length {y.shape[0]}"
                )
            total += float(y[pos])
        raw[cand] = total
    denom = 0.0
    for value in raw.values():
        denom += value
    if denom <= 0.0:
        raise ContractViolation("candidate occurrence mass is zero; nothing to rank")
    return {cand: value / denom for cand, value in raw.items()}


def predict(candidate_probs: dict[str, float]) -> str:
    """Highest-probability candidate; exact ties go to the
    lexicographically smallest string."""
    if not candidate_probs:
        raise ContractViolation("empty candidate distribution")
    return min(candidate_probs, key=lambda c: (-candidate_probs[c], c))


@dataclass
class PredictionDistribution:
    token_probs: np.ndarray
    candidate_probs: dict[str, float]
    predicted: str


def rank(
    doc_enc: np.ndarray,
    qry_enc: np.ndarray,
    placeholder_index: int,
    document: list[str],
    candidates: list[str],
    doc_mask: np.ndarray | None = None,
) -> PredictionDistribution:
    y = token_distribution(doc_enc, qry_enc, placeholder_index, doc_mask)
    probs = aggregate_candidates(y, find_occurrences(document, candidates))
    return PredictionDistribution(y, probs, predict(probs))


# ---------------------------------------------------------------------------
# Prediction dumps
# ---------------------------------------------------------------------------

PREDICTION_KEYS = (
    "sample_id",
    "predicted",
    "gold",
    "correct",
    "candidate_probs",
    "doc_len",
    "qry_len",
)


def prediction_record(
    sample_id: str,
    dist: PredictionDistribution,
    gold: str | None,
    doc_len: int,
    qry_len: int,
) -> dict:
    return {
        "sample_id": sample_id,
        "predicted": dist.predicted,
        "gold": gold,
        "correct": None if gold is None else dist.predicted == gold,
        "candidate_probs": dist.candidate_probs,
        "doc_len": doc_len,
        "qry_len": qry_len,
    }


def dump_predictions(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_predictions(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path} line {number}: invalid JSON: {exc}") from exc
            missing = [k for k in PREDICTION_KEYS if k not in record]
            if missing:
                raise ParseError(f"{path} line {number}: missing keys {missing}")
            records.append(record)
    return records
