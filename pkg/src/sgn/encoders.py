"""Image and ingredient feature providers.

Desk-scale stand-ins for pretrained backbones: a deterministic synthetic
embedding keyed by the dish template, a small trainable convnet over
procedurally rendered patches, a reader for precomputed feature files, and a
word-embedding ingredient encoder with order-invariant mean pooling.
"""

from __future__ import annotations

import re
import struct
import zlib

import numpy as np
import torch
import torch.nn as nn

from .corpus import PAD
from .errors import FeatureLookupError, InputError, ShapeError

_KEY_RE = re.compile(r"dish(\d+)(?::p(\d+))?:(\d+)$")


def parse_image_key(key: str) -> tuple[int, tuple[int, ...] | None, int]:
    """-> (dish template id, per-phase sentence counts when encoded, sample idx)."""
    m = _KEY_RE.match(key)
    if not m:
        raise FeatureLookupError(f"image key {key!r} does not name a dish template")
    profile = tuple(int(c) for c in m.group(2)) if m.group(2) else None
    return int(m.group(1)), profile, int(m.group(3))


def _seeded_vector(width: int, seed: int) -> torch.Tensor:
    gen = torch.Generator()
    gen.manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    v = torch.randn(width, generator=gen)
    return v / v.norm()


class SyntheticEmbeddingProvider:
    """Deterministic feature: unit template embedding, a structure component
    derived from the per-phase counts the key encodes (what a photograph of
    the finished dish would reveal about its elaborateness), and per-key noise."""

    def __init__(self, width: int = 128, seed: int = 0, noise_scale: float = 0.2,
                 structure_scale: float = 0.6):
        self.width = width
        self.seed = seed
        self.noise_scale = noise_scale
        self.structure_scale = structure_scale

    def features(self, key: str) -> torch.Tensor:
        dish_id, profile, _ = parse_image_key(key)
        base = _seeded_vector(self.width, self.seed * 1_000_003 + 7919 * dish_id)
        if profile is not None:
            for phase, count in enumerate(profile):
                component = _seeded_vector(
                    self.width, self.seed * 523 + 104_729 * phase + 1_299_709 * count
                )
                base = base + self.structure_scale * component
        noise = _seeded_vector(self.width, self.seed * 31 + zlib.crc32(key.encode()))
        return base + self.noise_scale * noise

    def parameters(self):
        return []


class TinyConvNetProvider(nn.Module):
    """Three conv blocks over a 32x32 patch rendered deterministically per key.

    Exists to exercise a real image -> feature gradient path; the patch pattern
    (orientation/frequency of a grating) is a function of the dish template.
    """

    def __init__(self, width: int = 128, seed: int = 0):
        super().__init__()
        self.width = width
        self.seed = seed
        torch.manual_seed(seed)
        self.blocks = nn.Sequential(
            nn.Conv2d(1, 8, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.out = nn.Linear(32 * 4 * 4, width)

    def render_patch(self, key: str) -> torch.Tensor:
        dish_id, profile, _ = parse_image_key(key)
        ys, xs = torch.meshgrid(
            torch.linspace(0, 1, 32), torch.linspace(0, 1, 32), indexing="ij"
        )
        freq = 2.0 + (dish_id % 8)
        angle = (dish_id // 8) * 0.6
        shift = (zlib.crc32(key.encode()) % 628) / 100.0
        wave = torch.sin(2 * torch.pi * freq * (xs * np.cos(angle) + ys * np.sin(angle)) + shift)
        if profile is not None:
            # one horizontal band per phase; brightness tracks the phase's length
            for phase, count in enumerate(profile):
                band = slice(phase * 8, (phase + 1) * 8)
                wave[band, :] = wave[band, :] + count / 5.0
        return wave.view(1, 1, 32, 32)

    def features(self, key: str) -> torch.Tensor:
        h = self.blocks(self.render_patch(key))
        return self.out(h.reshape(1, -1))[0]


_MAGIC = b"SGFV"
_VERSION = 1


def write_feature_file(path, vectors: dict[str, np.ndarray]) -> None:
    """Byte layout: magic 'SGFV', u32 version, u32 count, u32 width, then per
    key a u16 length + utf-8 bytes, then count*width float32 little-endian rows
    in key order."""
    keys = list(vectors)
    if not keys:
        raise InputError("no vectors to write")
    width = len(vectors[keys[0]])
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, len(keys), width))
        for key in keys:
            raw = key.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        for key in keys:
            row = np.asarray(vectors[key], dtype="<f4")
            if row.shape != (width,):
                raise ShapeError(f"vector for {key!r} has shape {row.shape}, want ({width},)")
            f.write(row.tobytes())


class PrecomputedFileProvider:
    """Looks up feature vectors exported with write_feature_file."""

    def __init__(self, path):
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MAGIC:
                raise FeatureLookupError(f"{path}: not a feature file")
            version, count, width = struct.unpack("<III", f.read(12))
            if version != _VERSION:
                raise FeatureLookupError(f"{path}: unsupported version {version}")
            keys = []
            for _ in range(count):
                (key_len,) = struct.unpack("<H", f.read(2))
                keys.append(f.read(key_len).decode())
            data = np.frombuffer(f.read(count * width * 4), dtype="<f4")
        self.width = width
        self._table = {
            key: torch.from_numpy(data[i * width : (i + 1) * width].copy())
            for i, key in enumerate(keys)
        }

    def features(self, key: str) -> torch.Tensor:
        try:
            return self._table[key]
        except KeyError:
            raise FeatureLookupError(f"image key {key!r} not in feature file") from None

    def parameters(self):
        return []


class IngredientEncoder(nn.Module):
    """Mean-pooled word embeddings over all ingredient tokens."""

    def __init__(self, vocab_size: int, width: int = 128):
        super().__init__()
        self.width = width
        self.embedding = nn.Embedding(vocab_size, width, padding_idx=PAD)

    def forward(self, ingredient_token_ids) -> torch.Tensor:
        """List of token-id sequences (one per ingredient) -> (width,) feature.

        Token ids are sorted before pooling so the mean is summed in a
        canonical order, making the output exactly ingredient-order invariant.
        """
        flat = sorted(tok for seq in ingredient_token_ids for tok in seq)
        if not flat:
            raise InputError("ingredient list is empty")
        ids = torch.tensor(flat, dtype=torch.long)
        return self.embedding(ids).mean(dim=0)

    def batch(self, per_sample_ids) -> torch.Tensor:
        return torch.stack([self(ids) for ids in per_sample_ids])


def make_provider(kind: str, width: int, seed: int, path=None):
    if kind == "synthetic-embedding":
        return SyntheticEmbeddingProvider(width, seed)
    if kind == "tiny-convnet":
        return TinyConvNetProvider(width, seed)
    if kind == "precomputed-file":
        provider = PrecomputedFileProvider(path)
        if provider.width != width:
            raise ShapeError(f"feature file width {provider.width} != configured {width}")
        return provider
    raise InputError(f"unknown provider kind {kind!r}")
