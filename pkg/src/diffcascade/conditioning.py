"""Frozen text-encoder interface, offline embedding cache, conditioning
dropout, and the variance-preserving noise augmentation applied to the
super-resolution stage's low-resolution conditioning image."""

import dataclasses
import hashlib
import json
import os
import re
import struct
import tempfile

import numpy as np

from .diffusion import forward_noise
from .errors import CorruptionError
from .schedule import NoiseSchedule

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_CACHE_MAGIC = b"EMBC"
_CACHE_FORMAT_VERSION = 1


@dataclasses.dataclass
class TextConditioning:
    """Token-embedding sequence, validity mask, and pooled vector for one caption.

    Rows where ``mask`` is False are exactly zero, and ``pooled`` is the
    mask-weighted mean of the valid rows (all-zero when nothing is valid).
    """
    token_embeddings: np.ndarray   # (max_tokens, embed_dim) float32
    mask: np.ndarray               # (max_tokens,) bool
    pooled: np.ndarray             # (embed_dim,) float32

    def validate(self, atol=1e-6):
        if self.token_embeddings.ndim != 2 or self.mask.ndim != 1 or self.pooled.ndim != 1:
            raise ValueError("malformed TextConditioning shapes")
        if self.token_embeddings.shape[0] != self.mask.shape[0]:
            raise ValueError("mask length does not match token rows")
        if self.token_embeddings.shape[1] != self.pooled.shape[0]:
            raise ValueError("pooled dim does not match embedding dim")
        if np.any(self.token_embeddings[~self.mask] != 0.0):
            raise ValueError("masked token rows must be exactly zero")
        expect = pooled_from_tokens(self.token_embeddings, self.mask)
        if not np.allclose(self.pooled, expect, atol=atol):
            raise ValueError("pooled vector is not the mask-weighted token mean")


@dataclasses.dataclass
class AugmentedLowRes:
    """Noise-augmented LR conditioning image plus the level it was corrupted at."""
    image: np.ndarray
    aug_level: float


def pooled_from_tokens(token_embeddings, mask):
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return np.zeros(token_embeddings.shape[1], dtype=token_embeddings.dtype)
    return token_embeddings[mask].mean(axis=0).astype(token_embeddings.dtype)


def null_conditioning(max_tokens: int, embed_dim: int) -> TextConditioning:
    """The dropped-text conditioning: all-zero embeddings and pooled vector.

    The mask stays fully valid so attention over the (zero) sequence remains
    well defined.
    """
    return TextConditioning(
        token_embeddings=np.zeros((max_tokens, embed_dim), dtype=np.float32),
        mask=np.ones(max_tokens, dtype=bool),
        pooled=np.zeros(embed_dim, dtype=np.float32),
    )


def is_null_conditioning(cond: TextConditioning) -> bool:
    return not np.any(cond.token_embeddings) and not np.any(cond.pooled)


def tokenize(caption: str):
    return _TOKEN_RE.findall(caption.lower())


class HashTextEncoder:
    """Deterministic toy encoder: each token maps to a seeded pseudo-random
    unit vector.  Ships as the default backend so everything runs without an
    external language model; any frozen pretrained encoder can be adapted by
    implementing ``encode``.
    """

    name = "toy-hash"

    def __init__(self, embed_dim: int = 64, max_tokens: int = 32):
        self.embed_dim = embed_dim
        self.max_tokens = max_tokens

    @property
    def encoder_id(self) -> str:
        return f"{self.name}-d{self.embed_dim}-t{self.max_tokens}"

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        g = np.random.Generator(np.random.PCG64(seed))
        v = g.standard_normal(self.embed_dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def encode(self, caption: str) -> TextConditioning:
        return encode_text(self, caption)


def encode_text(encoder, caption: str) -> TextConditioning:
    """Encode one caption with a frozen encoder backend.

    Tokens beyond ``encoder.max_tokens`` are truncated.  Deterministic for a
    given (encoder, caption).
    """
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    tokens = tokenize(caption)[: encoder.max_tokens]
    if not tokens:
        raise ValueError(f"caption {caption!r} contains no usable tokens")
    emb = np.zeros((encoder.max_tokens, encoder.embed_dim), dtype=np.float32)
    mask = np.zeros(encoder.max_tokens, dtype=bool)
    for i, tok in enumerate(tokens):
        emb[i] = encoder._token_vector(tok)
        mask[i] = True
    return TextConditioning(token_embeddings=emb, mask=mask,
                            pooled=pooled_from_tokens(emb, mask))


def available_encoders():
    return {"toy-hash": HashTextEncoder}


def make_encoder(name: str, embed_dim: int = 64, max_tokens: int = 32):
    encoders = available_encoders()
    if name not in encoders:
        raise ValueError(f"unknown encoder id {name!r}; available: {sorted(encoders)}")
    return encoders[name](embed_dim=embed_dim, max_tokens=max_tokens)


def caption_hash(caption: str) -> str:
    return hashlib.sha256(caption.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Directory of per-caption embedding records keyed by caption hash.

    Record layout: magic, format_version, caption-hash digest, token_count,
    embed_dim, then the valid token rows (row-major float32) and the pooled
    vector.  Writes go through a temp file + rename, so readers never see a
    partial record.
    """

    def __init__(self, path, hash_fn=caption_hash):
        self.path = str(path)
        self.hash_fn = hash_fn
        os.makedirs(self.path, exist_ok=True)

    def _record_path(self, digest: str) -> str:
        return os.path.join(self.path, f"{digest}.emb")

    def contains(self, caption: str) -> bool:
        return os.path.exists(self._record_path(self.hash_fn(caption)))

    def put(self, caption: str, cond: TextConditioning):
        digest = self.hash_fn(caption)
        valid = cond.token_embeddings[cond.mask].astype("<f4")
        pooled = cond.pooled.astype("<f4")
        header = _CACHE_MAGIC + struct.pack(
            "<I32sII", _CACHE_FORMAT_VERSION, bytes.fromhex(digest.ljust(64, "0"))[:32],
            valid.shape[0], valid.shape[1])
        payload = header + valid.tobytes(order="C") + pooled.tobytes(order="C")
        fd, tmp = tempfile.mkstemp(dir=self.path, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
            os.replace(tmp, self._record_path(digest))
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    def get(self, caption: str, max_tokens: int):
        digest = self.hash_fn(caption)
        path = self._record_path(digest)
        if not os.path.exists(path):
            return None
        with open(path, "rb") as f:
            blob = f.read()
        head_len = len(_CACHE_MAGIC) + struct.calcsize("<I32sII")
        if len(blob) < head_len or blob[:4] != _CACHE_MAGIC:
            raise CorruptionError(f"cache record {path} has a bad header")
        version, stored_digest, token_count, embed_dim = struct.unpack(
            "<I32sII", blob[4:head_len])
        if version != _CACHE_FORMAT_VERSION:
            raise CorruptionError(f"cache record {path} has format_version {version}")
        if stored_digest != bytes.fromhex(digest.ljust(64, "0"))[:32]:
            raise CorruptionError(f"cache record {path} stores a different caption hash")
        expected = head_len + 4 * (token_count * embed_dim + embed_dim)
        if len(blob) != expected:
            raise CorruptionError(f"cache record {path} is truncated")
        if token_count > max_tokens:
            raise CorruptionError(
                f"cache record {path} holds {token_count} tokens > max_tokens {max_tokens}")
        flat = np.frombuffer(blob, dtype="<f4", offset=head_len)
        rows = flat[: token_count * embed_dim].reshape(token_count, embed_dim)
        pooled = flat[token_count * embed_dim:].copy()
        emb = np.zeros((max_tokens, embed_dim), dtype=np.float32)
        emb[:token_count] = rows
        mask = np.zeros(max_tokens, dtype=bool)
        mask[:token_count] = True
        return TextConditioning(token_embeddings=emb, mask=mask, pooled=pooled)

    def lookup_or_encode(self, encoder, caption: str) -> TextConditioning:
        """Cache-first fetch; the encoder runs only on a miss (and the result
        is persisted)."""
        cond = self.get(caption, encoder.max_tokens)
        if cond is not None:
            return cond
        cond = encode_text(encoder, caption)
        self.put(caption, cond)
        return cond


def precompute_embeddings(encoder, captions, cache_path, hash_fn=caption_hash):
    """Encode every caption once into the on-disk cache.

    Idempotent: re-running writes nothing for already-cached captions.
    Returns {"new": n_written, "existing": n_skipped, "distinct": n_unique}.
    """
    cache = EmbeddingCache(cache_path, hash_fn=hash_fn)
    seen = {}
    new = existing = 0
    meta_path = os.path.join(cache.path, "cache_meta.json")
    meta = {"encoder_id": encoder.encoder_id, "embed_dim": encoder.embed_dim,
            "max_tokens": encoder.max_tokens, "format_version": _CACHE_FORMAT_VERSION}
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            prior = json.load(f)
        if prior != meta:
            raise CorruptionError(
                f"cache at {cache.path} was built with {prior.get('encoder_id')!r}, "
                f"requested {meta['encoder_id']!r}")
    else:
        _atomic_write_text(meta_path, json.dumps(meta, indent=2))
    for caption in captions:
        digest = hash_fn(caption)
        if digest in seen:
            if seen[digest] != caption:
                raise CorruptionError(
                    f"caption hash collision: {seen[digest]!r} vs {caption!r}")
            continue
        seen[digest] = caption
        if cache.contains(caption):
            existing += 1
            continue
        cache.put(caption, encode_text(encoder, caption))
        new += 1
    return {"new": new, "existing": existing, "distinct": len(seen)}


def _atomic_write_text(path, text):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def dropout_conditioning(cond: TextConditioning, p: float, rng) -> TextConditioning:
    """With probability p, replace the conditioning with the null conditioning.

    Used during training so one model serves both guidance branches; both
    the token sequence and the pooled vector are zeroed.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    if rng.uniform() < p:
        return null_conditioning(cond.token_embeddings.shape[0], cond.token_embeddings.shape[1])
    return cond


def augment_lowres(lr_image, aug_level: float, schedule: NoiseSchedule, rng) -> AugmentedLowRes:
    """Variance-preserving Gaussian corruption of the LR conditioning image.

    The level is treated as a forward-process time, reusing the exact same
    noising map as training, so level 0 is (clamp-)near identity and level 1
    is close to pure noise.
    """
    aug_level = float(aug_level)
    if not 0.0 <= aug_level <= 1.0:
        raise ValueError(f"aug_level {aug_level} outside [0, 1]")
    lr_image = np.asarray(lr_image)
    eps = rng.standard_normal(lr_image.shape).astype(lr_image.dtype, copy=False)
    noised = forward_noise(lr_image, aug_level, eps, schedule)
    return AugmentedLowRes(image=noised.z_t, aug_level=aug_level)


def sample_train_aug_level(rng, max_train_aug: float = 0.5) -> float:
    """Training-time augmentation level, drawn uniformly from [0, max_train_aug]."""
    return float(rng.uniform(0.0, max_train_aug))
