"""Synthetic dialect corpus and JSON-lines manifests.

Each symbol of the alphabet owns a fixed template of ``frames_per_symbol``
100 Hz feature frames. A dialect changes an utterance along two axes:
a lexical one (symbol substitutions before rendering) and an acoustic one
(orthonormal rotation of every frame plus Gaussian noise).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from speechllm.autodiff.checkpoint import read_tensor, write_tensor
from speechllm.errors import ConfigError, ManifestParseError


@dataclass
class SynthConfig:
    alphabet: str = "abcdefghijklmnopqrst"
    feature_dim: int = 16
    frames_per_symbol: int = 16
    min_len: int = 5
    max_len: int = 30

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ConfigError("alphabet must be a non-empty string of distinct symbols")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad transcript length range [{self.min_len}, {self.max_len}]")


@dataclass
class DialectParams:
    name: str
    rotation_seed: Optional[int] = None
    noise: float = 0.0
    substitutions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigError(f"dialect {self.name}: noise must be non-negative")
        if len(set(self.substitutions.values())) != len(self.substitutions):
            raise ConfigError(f"dialect {self.name}: substitution table must be injective")

    def rotation(self, dim):
        if self.rotation_seed is None:
            return np.eye(dim)
        g = np.random.default_rng(self.rotation_seed).standard_normal((dim, dim))
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))


def default_dialects():
    """Three tags: a clean standard, an accent (rotation + noise), a lexical dialect (rotation + swaps)."""
    return [
        DialectParams("standard", None, 0.1, {}),
        DialectParams("accent", 101, 0.3, {}),
        DialectParams("dialect", 202, 0.2, {"a": "e", "e": "a", "i": "o", "o": "i", "s": "t", "t": "s"}),
    ]


@dataclass(eq=False)
class Utterance:
    utt_id: str
    features: np.ndarray
    transcript: str
    dialect: str

    def __post_init__(self):
        if not self.transcript:
            raise ConfigError(f"{self.utt_id}: transcript must be non-empty")

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.utt_id == other.utt_id
            and self.transcript == other.transcript
            and self.dialect == other.dialect
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
        )


def symbol_templates(seed, cfg: SynthConfig):
    """symbol -> (frames_per_symbol, feature_dim) template; a shared base vector plus per-frame detail."""
    rng = np.random.default_rng([seed, 7919])
    out = {}
    for s in cfg.alphabet:
        base = rng.standard_normal(cfg.feature_dim)
        detail = 0.5 * rng.standard_normal((cfg.frames_per_symbol, cfg.feature_dim))
        out[s] = base + detail
    return out


def render(transcript, dialect: DialectParams, templates, rotation, rng):
    spoken = [dialect.substitutions.get(c, c) for c in transcript]
    frames = np.concatenate([templates[c] for c in spoken], axis=0) @ rotation
    if dialect.noise:
        frames = frames + dialect.noise * rng.standard_normal(frames.shape)
    return frames.astype(np.float32)


def synth_corpus(seed, n_utts, dialects, cfg: SynthConfig = None):
    """Deterministic synthetic corpus of ``n_utts`` utterances spread over ``dialects``."""
    cfg = cfg or SynthConfig()
    if not dialects:
        raise ConfigError("at least one dialect is required")
    if n_utts < 1:
        raise ConfigError(f"n_utts must be >= 1, got {n_utts}")
    names = [d.name for d in dialects]
    if len(set(names)) != len(names):
        raise ConfigError("dialect names must be unique")
    for d in dialects:
        bad = (set(d.substitutions) | set(d.substitutions.values())) - set(cfg.alphabet)
        if bad:
            raise ConfigError(f"dialect {d.name}: substitution symbols {sorted(bad)} not in alphabet")
    templates = symbol_templates(seed, cfg)
    rotations = [d.rotation(cfg.feature_dim) for d in dialects]
    letters = np.array(list(cfg.alphabet))
    corpus = []
    for i in range(n_utts):
        rng = np.random.default_rng([seed, i])
        k = i % len(dialects)
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        text = "".join(letters[rng.integers(0, len(letters), size=n)])
        feats = render(text, dialects[k], templates, rotations[k], rng)
        corpus.append(Utterance(f"utt{i:06d}", feats, text, dialects[k].name))
    return corpus


def split_corpus(corpus, fractions=(0.8, 0.1, 0.1)):
    """Contiguous train/dev/test split; utterance ids are disjoint by construction."""
    n = len(corpus)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    return corpus[:n_train], corpus[n_train : n_train + n_dev], corpus[n_train + n_dev :]


# ---------------------------------------------------------------------------
# manifests

REQUIRED = ("transcript", "dialect")


def write_manifest(dataset, path, feature_dir=None):
    """Write one JSON record per utterance.

    With ``feature_dir`` the features go to binary tensor files (path stored
    relative to the manifest); otherwise they are inlined as nested lists.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if feature_dir is not None:
        feature_dir = Path(feature_dir)
        feature_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for u in dataset:
            rec = {"utt_id": u.utt_id, "transcript": u.transcript, "dialect": u.dialect}
            if feature_dir is None:
                rec["features"] = u.features.tolist()
            else:
                fpath = feature_dir / f"{u.utt_id}.bin"
                write_tensor(fpath, u.features.astype(np.float32))
                rec["feature_file"] = str(fpath.resolve().relative_to(path.parent.resolve()))
            fh.write(json.dumps(rec) + "\n")
    return path


def read_manifest(path):
    """Stream utterances from a manifest; unknown fields are ignored."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"malformed record ({exc.msg})", line_no) from None
            if not isinstance(rec, dict):
                raise ManifestParseError("record is not an object", line_no)
            for key in REQUIRED:
                if key not in rec:
                    raise ManifestParseError(f"missing required field {key!r}", line_no, key)
            if "features" in rec:
                feats = np.asarray(rec["features"], dtype=np.float32)
            elif "feature_file" in rec:
                fpath = Path(rec["feature_file"])
                if not fpath.is_absolute():
                    fpath = path.parent / fpath
                feats = read_tensor(fpath, np.float32)
            else:
                raise ManifestParseError("missing required field 'features' or 'feature_file'", line_no, "features")
            if feats.ndim != 2:
                raise ManifestParseError(f"features must be a T x D matrix, got shape {feats.shape}", line_no, "features")
            if not rec["transcript"]:
                raise ManifestParseError("empty transcript", line_no, "transcript")
            yield Utterance(rec.get("utt_id", f"{path.stem}-{line_no}"), feats, rec["transcript"], rec["dialect"])
