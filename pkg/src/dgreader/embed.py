"""Token embeddings: a frozen word-vector table plus a trainable
character-level composition.

The word table is never updated during training; rows for tokens
missing from the vector file (and the unknown row) are seeded random,
and the padding row is zero. The character side runs a forward and a
backward GRU over the token's characters, concatenates the two final
states and applies a linear map; those parameters do train.

Pretrained vector text format: one token per line followed by its
space-separated float components.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import GRUParams, Parameter, Tape, Tensor, glorot, gru_scan
from .corpus import PAD_ID, Vocabulary
from .errors import ContractViolation, DimensionError, ParseError

INIT_RANGE = 0.05


@dataclass
class EmbedConfig:
    word_dim: int = 100
    char_dim: int = 16
    char_hidden: int = 25
    char_out: int = 50

    @property
    def token_dim(self) -> int:
        return self.word_dim + self.char_out


def random_word_table(vocab: Vocabulary, dim: int, rng: np.random.Generator) -> Parameter:
    """A frozen word table with all non-padding rows seeded random; used
    when no pretrained vectors are supplied."""
    data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(vocab.word_size, dim))
    data[PAD_ID] = 0.0
    return Parameter("embed.word", data, trainable=False)


def load_pretrained_vectors(
    path, vocab: Vocabulary, dim: int, rng: np.random.Generator
) -> tuple[Parameter, float]:
    """Build the frozen word table from a vector file.

    Returns the table and the coverage fraction over non-reserved
    vocabulary entries. A row of the wrong width is an error naming the
    line; a repeated token keeps the last occurrence with a warning.
    """
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                raise ParseError(f"{path} line {number}: no vector components")
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ParseError(
                    f"{path} line {number}: expected {dim} components, got {len(values)}"
                )
            try:
                row = np.array([float(v) for v in values])
            except ValueError as exc:
                raise ParseError(f"{path} line {number}: {exc}") from exc
            if token in vectors:
                warnings.warn(f"{path} line {number}: duplicate vector for {token!r}, last wins")
            vectors[token] = row

    data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(vocab.word_size, dim))
    data[PAD_ID] = 0.0
    covered = 0
    for idx, word in enumerate(vocab.id_to_word):
        if idx < 3:
            continue
        if word in vectors:
            data[idx] = vectors[word]
            covered += 1
    denom = max(vocab.word_size - 3, 1)
    return Parameter("embed.word", data, trainable=False), covered / denom


class CharEmbedder:
    """Composes a token vector from its characters with two directional
    GRUs and a linear projection."""

    def __init__(self, rng: np.random.Generator, char_vocab_size: int, cfg: EmbedConfig):
        self.cfg = cfg
        table = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(char_vocab_size, cfg.char_dim))
        table[PAD_ID] = 0.0
        self.table = Parameter("embed.char.table", table)
        self.fwd = GRUParams.create(rng, "embed.char.fwd", cfg.char_dim, cfg.char_hidden)
        self.bwd = GRUParams.create(rng, "embed.char.bwd", cfg.char_dim, cfg.char_hidden)
        self.proj_w = Parameter("embed.char.proj_w", glorot(rng, 2 * cfg.char_hidden, cfg.char_out))
        self.proj_b = Parameter("embed.char.proj_b", np.zeros(cfg.char_out))

    def parameters(self) -> list[Parameter]:
        return [self.table, *self.fwd.parameters(), *self.bwd.parameters(), self.proj_w, self.proj_b]

    def embed_ids(self, tape: Tape, char_ids: np.ndarray, char_mask: np.ndarray) -> Tensor:
        """(N, L) character ids with a 0/1 length mask -> (N, char_out).

        Rows whose mask is entirely zero (padding tokens) come out as
        the projection of the zero states; callers zero them with the
        token mask.
        """
        char_ids = np.asarray(char_ids, dtype=np.int64)
        if char_ids.ndim != 2:
            raise DimensionError(f"char id matrix must be (N, L), got {char_ids.shape}")
        table = tape.watch(self.table)
        emb = tape.gather_rows(table, char_ids)  # (N, L, char_dim)
        steps = char_ids.shape[1]
        out_f = gru_scan(emb, None, self.fwd, char_mask)
        final_f = tape.index_time(out_f, steps - 1)
        rev = tape.flip(emb, axis=1)
        rev_mask = np.ascontiguousarray(np.flip(np.asarray(char_mask, dtype=np.float64), axis=1))
        out_b = gru_scan(rev, None, self.bwd, rev_mask)
        final_b = tape.index_time(out_b, steps - 1)
        both = tape.concat_last([final_f, final_b])
        return tape.add(tape.matmul(both, tape.watch(self.proj_w)), tape.watch(self.proj_b))


def char_id_matrix(vocab: Vocabulary, tokens: list[str], width: int | None = None):
    """Pack per-token character ids into a padded (N, width) matrix plus
    its 0/1 mask. Padding tokens are passed as empty strings."""
    if width is None:
        width = max((len(t) for t in tokens), default=1)
        width = max(width, 1)
    ids = np.zeros((len(tokens), width), dtype=np.int64)
    mask = np.zeros((len(tokens), width))
    for i, tok in enumerate(tokens):
        cs = vocab.char_ids(tok)[:width]
        ids[i, : len(cs)] = cs
        mask[i, : len(cs)] = 1.0
    return ids, mask


class TokenEmbedder:
    """Word table plus character embedder behind one interface."""

    def __init__(
        self,
        rng: np.random.Generator,
        vocab: Vocabulary,
        cfg: EmbedConfig,
        word_table: Parameter | None = None,
    ):
        self.vocab = vocab
        self.cfg = cfg
        self.word_table = word_table if word_table is not None else random_word_table(
            vocab, cfg.word_dim, rng
        )
        if self.word_table.data.shape != (vocab.word_size, cfg.word_dim):
            raise DimensionError(
                f"word table shape {self.word_table.data.shape} does not match "
                f"vocab {vocab.word_size} x dim {cfg.word_dim}"
            )
        if self.word_table.trainable:
            raise ContractViolation("the word table must be frozen")
        self.char = CharEmbedder(rng, vocab.char_size, cfg)

    def parameters(self) -> list[Parameter]:
        return [self.word_table, *self.char.parameters()]

    def char_embed_token(self, tape: Tape, token: str) -> Tensor:
        """Character vector for a single non-empty token."""
        if not token:
            raise ContractViolation("cannot char-embed an empty token")
        ids, mask = char_id_matrix(self.vocab, [token])
        out = self.char.embed_ids(tape, ids, mask)
        return tape.reshape(out, (self.cfg.char_out,))

    def embed_batch(
        self,
        tape: Tape,
        word_ids: np.ndarray,
        char_ids: np.ndarray,
        char_mask: np.ndarray,
        token_mask: np.ndarray,
    ) -> Tensor:
        """(B, T) word ids + (B, T, L) char ids -> (B, T, token_dim).

        Padding positions (token_mask 0) map to the zero vector in both
        halves.
        """
        batch, steps = word_ids.shape
        words = tape.gather_rows(tape.watch(self.word_table), word_ids)
        chars = self.char.embed_ids(
            tape,
            char_ids.reshape(batch * steps, -1),
            np.asarray(char_mask, dtype=np.float64).reshape(batch * steps, -1),
        )
        chars = tape.reshape(chars, (batch, steps, self.cfg.char_out))
        chars = tape.mul(chars, tape.constant(np.asarray(token_mask, dtype=np.float64)[:, :, None]))
        return tape.concat_last([words, chars])

    def embed_tokens(self, tape: Tape, ids, tokens: list[str]) -> Tensor:
        """Single sequence (T,) ids + surface tokens -> (T, token_dim)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or len(tokens) != ids.shape[0]:
            raise DimensionError(
                f"ids shape {ids.shape} does not match {len(tokens)} tokens"
            )
        surfaces = ["" if i == PAD_ID else t for i, t in zip(ids, tokens)]
        char_ids, char_mask = char_id_matrix(self.vocab, surfaces)
        token_mask = (ids != PAD_ID).astype(float)
        out = self.embed_batch(
            tape, ids[None, :], char_ids[None, :, :], char_mask[None, :, :], token_mask[None, :]
        )
        return tape.reshape(out, (ids.shape[0], self.cfg.token_dim))
