"""Run configuration: flat "key = value" text files, overrides, hashing.

Defaults are desk-scale. configs/reference.ini in the repository carries the
full-scale reference settings (wide model, long warmup, rare-word cutoff 6);
they are not exercised by the test suite.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Bad configuration value, file, or checkpoint/config mismatch."""


@dataclass
class RunConfig:
    # model dimensions
    d_model: int = 64
    n_heads: int = 4
    n_vis_blocks: int = 2
    n_sem_blocks: int = 1
    n_dec_blocks: int = 2
    n_slots: int = 8
    n_positions: int = 0           # 0 means n_slots + max_cues
    max_cues: int = 12
    retrieve_k: int = 5
    max_caption_len: int = 20
    ffn_mult: int = 4
    # corpus
    n_images: int = 200
    captions_per_image: int = 5
    objects_min: int = 2
    objects_max: int = 3
    grid_cells: int = 16
    feature_dim: int = 64
    feature_noise: float = 0.1
    embed_dim: int = 64
    embed_seed: int = 0
    split_mode: str = "standard"
    val_frac: float = 0.15
    test_frac: float = 0.15
    holdout_frac: float = 0.3
    # vocabularies
    min_word_count: int = 1
    semantic_vocab_size: int = 64
    # losses
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    asym_margin: float = 0.05
    # optimizer
    batch_size: int = 16
    epochs: int = 30
    lr_factor: float = 1.0
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    # decoding
    beam_size: int = 3
    # ablation switches
    use_retrieval: bool = True
    use_filter_loss: bool = True
    use_missing_loss: bool = True
    use_ranker: bool = True
    # run bookkeeping
    seed: int = 13
    run_name: str = "run"
    checkpoint_every: int = 0      # epochs between periodic checkpoints; 0 = off
    # data file paths (resolved relative to the data directory)
    corpus_path: str = "corpus.jsonl"
    lexicon_path: str = "lexicon.tsv"
    split_path: str = "split.txt"
    pool_path: str = "pool.tsv"
    word_vocab_path: str = "word_vocab.txt"
    semantic_vocab_path: str = "semantic_vocab.txt"

    @property
    def effective_positions(self) -> int:
        return self.n_positions if self.n_positions > 0 else \
            self.n_slots + self.max_cues

    def validate(self):
        positive = ("d_model", "n_heads", "n_vis_blocks", "n_sem_blocks",
                    "n_dec_blocks", "n_slots", "max_cues", "retrieve_k",
                    "max_caption_len", "ffn_mult", "n_images",
                    "captions_per_image", "grid_cells", "feature_dim",
                    "embed_dim", "batch_size", "epochs", "warmup_steps",
                    "beam_size", "semantic_vocab_size", "min_word_count")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, "
                                  f"got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"n_heads={self.n_heads} must divide "
                              f"d_model={self.d_model}")
        if self.n_positions < 0:
            raise ConfigError("n_positions must be >= 0 (0 selects the "
                              "slots + cue cap default)")
        if self.split_mode not in ("standard", "robust"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        if not 2 <= self.objects_min <= self.objects_max:
            raise ConfigError("objects_min/objects_max must satisfy "
                              "2 <= min <= max")
        return self

    # ------------------------------------------------------- serialization

    def to_text(self) -> str:
        """Canonical text: sorted keys, one "key = value" per line."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def save(self, path):
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.to_text(), encoding="utf-8")
        tmp.replace(path)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip().strip("'\"")
    if kind in ("bool", bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key} expects a boolean, got {raw!r}")
    if kind in ("int", int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key} expects an integer, got {raw!r}") from exc
    if kind in ("float", float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from exc
    return raw


def apply_assignments(cfg: RunConfig, assignments) -> RunConfig:
    """Apply "key=value" strings (command line overrides) in order."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown configuration key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file's "key = value" lines, then overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value', "
                                  f"got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{n}: unknown key {key!r}")
            setattr(cfg, key, _parse_value(key, raw))
    apply_assignments(cfg, overrides)
    return cfg.validate()
