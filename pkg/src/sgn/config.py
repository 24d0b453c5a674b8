"""Experiment configuration: desk/paper presets, flat key-value files, fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class ExperimentConfig:
    # corpus
    corpus_source: str = "synthetic"   # synthetic | file
    corpus_path: str = ""
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    min_sentences: int = 4
    max_sentences: int = 10
    n_dishes: int = 16
    vocab_min_count: int = 5
    # recipe2tree
    embed_dim: int = 64
    word_hidden: int = 64
    word_layers: int = 3
    sent_hidden: int = 64
    sent_layers: int = 2
    chunk_size: int = 4
    distance_layer: int = 0
    qt_k: int = 3
    fixed_context: bool = False
    parser_optimizer: str = "adam"
    parser_lr: float = 3e-3
    parser_batch: int = 16
    parser_epochs: int = 6
    # feature providers
    provider: str = "synthetic-embedding"
    feature_path: str = ""
    feature_width: int = 128
    # img2tree
    rnn_hidden: int = 128
    rnn_layers: int = 2
    n_max: int = 39
    # tree2recipe
    gat_hidden: int = 64
    gat_heads: int = 4
    gat_layers: int = 2
    tree_tokens: str = "per-node"      # per-node | pooled
    # decoder
    dec_layers: int = 2
    dec_heads: int = 4
    dec_ffn: int = 256
    max_gen_len: int = 150
    # joint training
    lr: float = 1e-3
    lr_decay: float = 0.99
    batch_size: int = 16
    joint_epochs: int = 10
    lambda1: float = 1.0
    lambda2: float = 0.5
    use_tree: bool = True              # False: zero tree token (structure-unaware baseline)
    # stages
    train_parser: bool = True
    train_joint: bool = True
    seed: int = 0
    preset: str = "desk"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("trade-off weights must be non-negative")
        if self.batch_size < 1 or self.parser_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.rnn_hidden != self.feature_width:
            raise ConfigError("tree-generator hidden width must equal the feature width")
        if self.tree_tokens not in ("per-node", "pooled"):
            raise ConfigError(f"unknown tree token mode {self.tree_tokens!r}")
        if self.corpus_source not in ("synthetic", "file"):
            raise ConfigError(f"unknown corpus source {self.corpus_source!r}")

    @classmethod
    def desk(cls, **overrides) -> "ExperimentConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ExperimentConfig":
        """Published full-scale settings; recorded for documentation, not tested."""
        values = dict(
            preset="paper",
            embed_dim=400,
            word_hidden=400,
            word_layers=3,
            sent_hidden=400,
            chunk_size=10,
            parser_optimizer="sgd",
            parser_lr=1.0,
            parser_batch=60,
            parser_epochs=50,
            feature_width=512,
            rnn_hidden=512,
            rnn_layers=2,
            gat_hidden=512,
            gat_heads=6,
            dec_layers=16,
            dec_heads=8,
            dec_ffn=2048,
            lr=1e-3,
            lr_decay=0.99,
            batch_size=16,
            lambda1=1.0,
            lambda2=0.5,
            max_gen_len=150,
        )
        values.update(overrides)
        return cls(**values)

    def baseline_variant(self) -> "ExperimentConfig":
        """Structure-unaware configuration: no tree weight, zero tree token."""
        return dataclasses.replace(
            self, use_tree=False, lambda2=0.0, train_parser=False
        )

    # -- flat key-value form --------------------------------------------------

    def to_kv(self) -> dict[str, str]:
        out = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            out[field.name] = str(value)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            if kind in ("int", int):
                values[key] = int(raw)
            elif kind in ("float", float):
                values[key] = float(raw)
            elif kind in ("bool", bool):
                if raw not in ("True", "False", "true", "false", "1", "0"):
                    raise ConfigError(f"bad boolean for {key}: {raw!r}")
                values[key] = raw in ("True", "true", "1")
            else:
                values[key] = raw
        return cls(**values)

    def save(self, path) -> None:
        with open(path, "w") as f:
            for key, value in sorted(self.to_kv().items()):
                f.write(f"{key} = {value}\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        kv = {}
        with open(path) as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        return cls.from_kv(kv)

    def fingerprint(self) -> str:
        blob = "\n".join(f"{k}={v}" for k, v in sorted(self.to_kv().items()))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]
