"""Coarse/fine text bank and a deterministic toy text encoder.

The encoder maps every token to a fixed pseudo-random unit vector (seeded by
the encoder seed and the token bytes) and embeds a text as the normalized mean
of its token vectors. Precomputed embeddings from any other encoder can be
loaded from a file with ``encoder_kind="external"``.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, EncodingError, ParseError

EMBEDDING_FORMAT = "cocodiff-text-embeddings"

_SYNONYMS = {
    "throw": ["toss", "hurl"],
    "drink water": ["sip water", "take a drink"],
    "wave hand": ["wave", "hand wave"],
    "kick": ["kick something", "strike with foot"],
    "jump": ["hop", "leap"],
    "read": ["reading", "look at a book"],
    "sit down": ["take a seat", "be seated"],
    "stand up": ["rise", "get up"],
    "clap": ["applaud", "clap hands"],
    "point": ["point at", "indicate"],
    "push": ["shove", "push away"],
    "hug": ["embrace", "hold another person"],
}

_FINE_TEMPLATES = (
    "person doing {name} with arms",
    "body moves to {name}",
    "slowly {name} while standing",
)


@dataclass
class TextBank:
    coarse_texts: list  # per class: [label, synonym, ...]
    fine_texts: list  # per class: [description, ...]

    def __len__(self):
        return len(self.coarse_texts)


@dataclass
class TextEmbedding:
    vector: np.ndarray
    source_text: str


@dataclass
class TextEncoderConfig:
    embed_dim: int = 64
    encoder_kind: str = "toy_hash"
    encoder_seed: int = 0
    embedding_file: str | None = None

    def validate(self):
        if self.embed_dim < 8:
            raise ConfigError("embed_dim", "must be >= 8")
        if self.encoder_kind not in ("toy_hash", "external"):
            raise ConfigError("encoder_kind", f"unknown kind {self.encoder_kind!r}")
        if self.encoder_kind == "external" and not self.embedding_file:
            raise ConfigError("embedding_file", "required for external encoder")


def build_text_bank(class_names) -> TextBank:
    names = list(class_names)
    if not names:
        raise ConfigError("class_names", "must be nonempty")
    if len(set(names)) != len(names):
        raise ConfigError("class_names", "duplicate class names")
    if any(not n.strip() for n in names):
        raise ConfigError("class_names", "empty class name")
    coarse = []
    fine = []
    for name in names:
        syn = _SYNONYMS.get(name, [f"{name} action", f"act of {name}"])
        coarse.append([name, *syn])
        fine.append([t.format(name=name) for t in _FINE_TEMPLATES])
    return TextBank(coarse, fine)


_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=4096)
def _token_vector(seed: int, dim: int, token: str) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng([seed & 0xFFFFFFFF, int.from_bytes(digest, "little")])
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


@lru_cache(maxsize=16)
def _load_external(path: str):
    table = {}
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad header: {exc.msg}", line=1) from None
        if header.get("format") != EMBEDDING_FORMAT:
            raise ParseError("not a text embedding file", line=1)
        dim = int(header["dim"])
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            text, sep, rest = line.partition("\t")
            if not sep:
                raise ParseError("missing tab separator", line=lineno)
            try:
                vec = np.array(rest.split(), dtype=np.float64)
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if vec.shape != (dim,):
                raise ParseError(f"expected {dim} values, got {vec.size}", line=lineno)
            table[text] = vec
    return dim, table


def save_embedding_file(path, texts, vectors) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": EMBEDDING_FORMAT, "dim": vectors.shape[1]}) + "\n")
        for text, vec in zip(texts, vectors):
            if "\t" in text or "\n" in text:
                raise ConfigError("text", "texts may not contain tabs or newlines")
            fh.write(text + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")


def _unit(v: np.ndarray, text: str) -> np.ndarray:
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise EncodingError(f"zero-norm embedding for {text!r}")
    return v / norm


def encode_text(cfg: TextEncoderConfig, text: str) -> TextEmbedding:
    cfg.validate()
    if cfg.encoder_kind == "external":
        dim, table = _load_external(str(cfg.embedding_file))
        if dim != cfg.embed_dim:
            raise EncodingError(f"embedding file has dim {dim}, config wants {cfg.embed_dim}")
        if text not in table:
            raise EncodingError(f"no precomputed embedding for {text!r}")
        return TextEmbedding(_unit(table[text], text), text)
    tokens = tokenize(text)
    if not tokens:
        raise EncodingError(f"text {text!r} has no tokens")
    mean = np.mean([_token_vector(cfg.encoder_seed, cfg.embed_dim, t) for t in tokens], axis=0)
    return TextEmbedding(_unit(mean, text), text)


def _check_class(bank: TextBank, class_id: int):
    if not 0 <= class_id < len(bank):
        raise IndexError(f"class_id {class_id} outside [0, {len(bank)})")


def coarse_embedding(bank: TextBank, cfg: TextEncoderConfig, class_id: int) -> TextEmbedding:
    """Label-level embedding: normalized mean over the label and its synonyms."""
    _check_class(bank, class_id)
    texts = bank.coarse_texts[class_id]
    mean = np.mean([encode_text(cfg, t).vector for t in texts], axis=0)
    return TextEmbedding(_unit(mean, texts[0]), texts[0])


def fine_embedding(bank: TextBank, cfg: TextEncoderConfig, class_id: int, draw_index: int) -> TextEmbedding:
    _check_class(bank, class_id)
    texts = bank.fine_texts[class_id]
    return encode_text(cfg, texts[draw_index % len(texts)])


@dataclass
class TextTables:
    """Per-class embedding tables ready for batched lookup."""
    coarse: np.ndarray  # [num_classes, N]
    fine: np.ndarray  # [num_classes, max_fine, N]
    fine_counts: np.ndarray = field(default=None)

    def fine_for(self, labels, draw_indices) -> np.ndarray:
        labels = np.asarray(labels)
        k = np.asarray(draw_indices) % self.fine_counts[labels]
        return self.fine[labels, k]


def text_tables(bank: TextBank, cfg: TextEncoderConfig) -> TextTables:
    n = len(bank)
    coarse = np.stack([coarse_embedding(bank, cfg, c).vector for c in range(n)])
    counts = np.array([len(f) for f in bank.fine_texts])
    fine = np.zeros((n, counts.max(), cfg.embed_dim))
    for c in range(n):
        for k in range(counts[c]):
            fine[c, k] = fine_embedding(bank, cfg, c, k).vector
    return TextTables(coarse, fine, counts)
