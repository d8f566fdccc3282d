"""Feature records, batching with validity masks, and synthetic data.

A record carries per-modality features for one clip: a variable-length audio
frame sequence, a variable-length vision frame sequence, a single text
vector, and a target vector in [0, 1] per dimension. Any modality may be
missing, flagged explicitly. The synthetic generator plants a linear
signal of known strength in every modality so recoverability has a
closed-form ceiling.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MODALITIES = ("audio", "vision", "text")

DEFAULT_D_AUDIO = 1027
DEFAULT_D_VISION = 768
DEFAULT_D_TEXT = 768
DEFAULT_N_TARGETS = 6
MAX_AUDIO_LEN = 600
MAX_VISION_LEN = 400

FILE_FORMAT = "emif-records"
FILE_VERSION = 1
MANIFEST_FORMAT = "emif-manifest"


class RecordFormatError(ValueError):
    """A record file or record payload violates the format contract."""


@dataclass
class FeatureRecord:
    """One sample: per-modality features, missing flags, and a target."""

    id: str
    target: np.ndarray
    audio: Optional[np.ndarray] = None
    vision: Optional[np.ndarray] = None
    text: Optional[np.ndarray] = None
    missing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.audio is not None:
            self.audio = np.asarray(self.audio, dtype=np.float64)
        if self.vision is not None:
            self.vision = np.asarray(self.vision, dtype=np.float64)
        if self.text is not None:
            self.text = np.asarray(self.text, dtype=np.float64)
        if not self.missing:
            self.missing = {m: getattr(self, m) is None for m in MODALITIES}


def validate_record(rec: FeatureRecord, d_audio: int = DEFAULT_D_AUDIO,
                    d_vision: int = DEFAULT_D_VISION,
                    d_text: int = DEFAULT_D_TEXT,
                    n_targets: int = DEFAULT_N_TARGETS) -> None:
    """Check one record against dimension and consistency invariants."""
    rid = rec.id
    if set(rec.missing) != set(MODALITIES):
        raise RecordFormatError(
            f"record {rid}: missing-flags must cover {MODALITIES}, "
            f"got {sorted(rec.missing)}"
        )
    for name in MODALITIES:
        feat = getattr(rec, name)
        if rec.missing[name] != (feat is None):
            raise RecordFormatError(
                f"record {rid}: field '{name}' presence contradicts its "
                f"missing flag"
            )
    if rec.target.shape != (n_targets,):
        raise RecordFormatError(
            f"record {rid}: field 'target' has shape {rec.target.shape}, "
            f"expected ({n_targets},)"
        )
    if not np.all(np.isfinite(rec.target)):
        raise RecordFormatError(f"record {rid}: field 'target' is non-finite")
    if np.any(rec.target < 0.0) or np.any(rec.target > 1.0):
        raise RecordFormatError(
            f"record {rid}: field 'target' outside [0, 1]"
        )
    for name, width in (("audio", d_audio), ("vision", d_vision)):
        feat = getattr(rec, name)
        if feat is None:
            continue
        if feat.ndim != 2 or feat.shape[1] != width:
            raise RecordFormatError(
                f"record {rid}: field '{name}' has shape {feat.shape}, "
                f"expected (T, {width})"
            )
        if feat.shape[0] < 1:
            raise RecordFormatError(
                f"record {rid}: field '{name}' has zero frames"
            )
        if not np.all(np.isfinite(feat)):
            raise RecordFormatError(
                f"record {rid}: field '{name}' is non-finite"
            )
    if rec.text is not None:
        if rec.text.shape != (d_text,):
            raise RecordFormatError(
                f"record {rid}: field 'text' has shape {rec.text.shape}, "
                f"expected ({d_text},)"
            )
        if not np.all(np.isfinite(rec.text)):
            raise RecordFormatError(f"record {rid}: field 'text' is non-finite")
    # A record with every modality missing is legal: the model substitutes
    # learned tokens for all three streams.


@dataclass
class Batch:
    """Dense padded arrays plus boolean validity masks for one minibatch."""

    audio: np.ndarray        # (B, T_a, d_audio), zeros in padded cells
    audio_mask: np.ndarray   # (B, T_a) bool, True on valid frames
    vision: np.ndarray       # (B, T_v, d_vision)
    vision_mask: np.ndarray  # (B, T_v) bool
    text: np.ndarray         # (B, d_text), zeros when missing
    missing: np.ndarray      # (B, 3) bool, column order (audio, vision, text)
    target: np.ndarray       # (B, n_targets); nan rows when unknown
    ids: list

    @property
    def size(self) -> int:
        return self.audio.shape[0]


def collate(items, *, d_audio: int = DEFAULT_D_AUDIO,
            d_vision: int = DEFAULT_D_VISION, d_text: int = DEFAULT_D_TEXT,
            n_targets: int = DEFAULT_N_TARGETS,
            max_audio_len: int = MAX_AUDIO_LEN,
            max_vision_len: int = MAX_VISION_LEN,
            pad_audio_to: Optional[int] = None,
            pad_vision_to: Optional[int] = None) -> Batch:
    """Pad a list of records (or feature bundles) into dense arrays.

    Sequences longer than the length cap keep their first cap frames.
    Padded cells are zero; masks mark exactly the valid prefix. Blocks are
    sized to the longest sequence in the batch (minimum 1 so substitution of
    missing-modality tokens always has a slot), or to ``pad_*_to`` when
    given.
    """
    items = list(items)
    if not items:
        raise ValueError("collate needs at least one item")
    b = len(items)

    def clipped(feat, cap):
        if feat is None:
            return None
        if feat.shape[0] > cap:
            return feat[:cap]
        return feat

    audios = [clipped(it.audio, max_audio_len) for it in items]
    visions = [clipped(it.vision, max_vision_len) for it in items]
    t_a = max([a.shape[0] for a in audios if a is not None], default=1)
    t_v = max([v.shape[0] for v in visions if v is not None], default=1)
    if pad_audio_to is not None:
        if pad_audio_to < t_a:
            raise ValueError(
                f"pad_audio_to={pad_audio_to} below batch max {t_a}"
            )
        t_a = pad_audio_to
    if pad_vision_to is not None:
        if pad_vision_to < t_v:
            raise ValueError(
                f"pad_vision_to={pad_vision_to} below batch max {t_v}"
            )
        t_v = pad_vision_to

    audio = np.zeros((b, t_a, d_audio))
    audio_mask = np.zeros((b, t_a), dtype=bool)
    vision = np.zeros((b, t_v, d_vision))
    vision_mask = np.zeros((b, t_v), dtype=bool)
    text = np.zeros((b, d_text))
    missing = np.zeros((b, 3), dtype=bool)
    target = np.full((b, n_targets), np.nan)
    ids = []
    for i, item in enumerate(items):
        ids.append(getattr(item, "id", None))
        tgt = getattr(item, "target", None)
        if tgt is not None:
            target[i] = np.asarray(tgt, dtype=np.float64)
        if audios[i] is not None:
            n = audios[i].shape[0]
            audio[i, :n] = audios[i]
            audio_mask[i, :n] = True
        else:
            missing[i, 0] = True
        if visions[i] is not None:
            n = visions[i].shape[0]
            vision[i, :n] = visions[i]
            vision_mask[i, :n] = True
        else:
            missing[i, 1] = True
        if item.text is not None:
            text[i] = item.text
        else:
            missing[i, 2] = True
    return Batch(audio, audio_mask, vision, vision_mask, text, missing,
                 target, ids)


# -- synthetic planted-signal data -------------------------------------------

SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}


@dataclass
class PlantedConfig:
    """Controls for the synthetic generator.

    Each modality's features are ``gain * M @ (y - 0.5)`` plus Gaussian noise
    of scale ``sigma``, with ``M`` a fixed orthonormal-column mixing matrix
    per modality. ``signal_fraction`` is the probability that a frame (or
    the single text vector) carries the signal — non-carriers are pure
    noise; ``missing_prob`` drops whole modalities from a record.
    """

    seed: int = 0
    d_audio: int = DEFAULT_D_AUDIO
    d_vision: int = DEFAULT_D_VISION
    d_text: int = DEFAULT_D_TEXT
    n_targets: int = DEFAULT_N_TARGETS
    sigma: float = 0.1
    signal_gain: float = 4.0
    signal_fraction: float = 1.0
    missing_prob_audio: float = 0.0
    missing_prob_vision: float = 0.0
    missing_prob_text: float = 0.0
    audio_len_range: tuple = (3, 8)
    vision_len_range: tuple = (2, 6)

    def validate(self) -> None:
        if not 0.0 <= self.sigma:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise ValueError(
                f"signal_fraction must be in [0, 1], got {self.signal_fraction}"
            )
        for name in ("missing_prob_audio", "missing_prob_vision",
                     "missing_prob_text"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("audio_len_range", "vision_len_range"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi")
        # Each mixing matrix needs orthonormal columns, one per target,
        # so every feature width must be at least n_targets.
        for name in ("d_audio", "d_vision", "d_text"):
            width = getattr(self, name)
            if width < self.n_targets:
                raise ValueError(
                    f"{name}={width} is smaller than n_targets="
                    f"{self.n_targets}; the planted signal would be "
                    "unrecoverable"
                )

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["audio_len_range"] = list(self.audio_len_range)
        d["vision_len_range"] = list(self.vision_len_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator options: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("audio_len_range", "vision_len_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


class PlantedGenerator:
    """Deterministic synthetic records with a recoverable linear signal."""

    def __init__(self, config: PlantedConfig):
        config.validate()
        self.config = config
        self.mixers = {}
        for j, (name, width) in enumerate(
            (("audio", config.d_audio), ("vision", config.d_vision),
             ("text", config.d_text))
        ):
            rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, 1000 + j])
            )
            raw = rng.standard_normal((width, config.n_targets))
            q, _ = np.linalg.qr(raw)
            self.mixers[name] = config.signal_gain * q

    def _frames(self, rng, n_frames: int, name: str,
                centered: np.ndarray) -> np.ndarray:
        cfg = self.config
        width = self.mixers[name].shape[0]
        planted = self.mixers[name] @ centered
        carries = rng.random(n_frames) < cfg.signal_fraction
        noise = cfg.sigma * rng.standard_normal((n_frames, width))
        return carries[:, None] * planted[None, :] + noise

    def generate(self, n: int, split: str) -> list:
        """Produce ``n`` records for a named split; splits use disjoint,
        order-independent RNG streams derived from the seed."""
        if split not in SPLIT_INDEX:
            raise ValueError(
                f"split must be one of {sorted(SPLIT_INDEX)}, got {split!r}"
            )
        if n < 1:
            raise ValueError(f"record count must be >= 1, got {n}")
        cfg = self.config
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, SPLIT_INDEX[split]])
        )
        records = []
        for i in range(n):
            y = rng.uniform(0.0, 1.0, size=cfg.n_targets)
            centered = y - 0.5
            lo, hi = cfg.audio_len_range
            n_a = int(rng.integers(lo, hi + 1))
            audio = self._frames(rng, n_a, "audio", centered)
            lo, hi = cfg.vision_len_range
            n_v = int(rng.integers(lo, hi + 1))
            vision = self._frames(rng, n_v, "vision", centered)
            text_carries = bool(rng.random() < cfg.signal_fraction)
            text = (text_carries * (self.mixers["text"] @ centered)
                    + cfg.sigma * rng.standard_normal(cfg.d_text))
            drop = rng.random(3)
            miss_a = bool(drop[0] < cfg.missing_prob_audio)
            miss_v = bool(drop[1] < cfg.missing_prob_vision)
            miss_t = bool(drop[2] < cfg.missing_prob_text)
            records.append(FeatureRecord(
                id=f"{split}-{i:06d}",
                target=y,
                audio=None if miss_a else audio,
                vision=None if miss_v else vision,
                text=None if miss_t else text,
            ))
        return records


# -- file I/O ----------------------------------------------------------------


def write_records(records, path, *, d_audio: int = DEFAULT_D_AUDIO,
                  d_vision: int = DEFAULT_D_VISION,
                  d_text: int = DEFAULT_D_TEXT,
                  n_targets: int = DEFAULT_N_TARGETS) -> None:
    """Write records as JSON lines after a header; floats keep full
    precision so a round trip is lossless."""
    header = {
        "format": FILE_FORMAT,
        "version": FILE_VERSION,
        "d_audio": d_audio,
        "d_vision": d_vision,
        "d_text": d_text,
        "n_targets": n_targets,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            validate_record(rec, d_audio, d_vision, d_text, n_targets)
            payload = {
                "id": rec.id,
                "target": rec.target.tolist(),
                "missing": {m: bool(rec.missing[m]) for m in MODALITIES},
                "audio": None if rec.audio is None else rec.audio.tolist(),
                "vision": None if rec.vision is None else rec.vision.tolist(),
                "text": None if rec.text is None else rec.text.tolist(),
            }
            fh.write(json.dumps(payload) + "\n")


def read_records(path) -> list:
    """Read and validate a record file; errors name the offending line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise RecordFormatError(f"{path}: empty file, header expected")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"{path}: line 1: bad header: {exc}") from exc
        if not isinstance(header, dict) or header.get("format") != FILE_FORMAT:
            raise RecordFormatError(
                f"{path}: line 1: not a {FILE_FORMAT} header"
            )
        if header.get("version") != FILE_VERSION:
            raise RecordFormatError(
                f"{path}: unsupported version {header.get('version')}"
            )
        dims = {}
        for key in ("d_audio", "d_vision", "d_text", "n_targets"):
            if key not in header:
                raise RecordFormatError(f"{path}: header lacks '{key}'")
            dims[key] = int(header[key])
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(
                    f"{path}: line {lineno}: bad JSON: {exc}"
                ) from exc
            try:
                rec = _record_from_payload(payload)
                validate_record(rec, **dims)
            except (RecordFormatError, KeyError, TypeError) as exc:
                raise RecordFormatError(
                    f"{path}: line {lineno}: {exc}"
                ) from exc
            records.append(rec)
    return records


def _record_from_payload(payload: dict) -> FeatureRecord:
    if not isinstance(payload, dict):
        raise RecordFormatError("record line is not an object")
    for key in ("id", "target", "missing"):
        if key not in payload:
            raise RecordFormatError(f"record lacks field '{key}'")

    def arr(key):
        value = payload.get(key)
        return None if value is None else np.asarray(value, dtype=np.float64)

    return FeatureRecord(
        id=str(payload["id"]),
        target=np.asarray(payload["target"], dtype=np.float64),
        audio=arr("audio"),
        vision=arr("vision"),
        text=arr("text"),
        missing={m: bool(payload["missing"].get(m, False))
                 for m in MODALITIES},
    )


def write_manifest(path, generator_config: PlantedConfig,
                   splits: dict) -> None:
    """Record where each split lives (paths relative to the manifest)."""
    base = os.path.dirname(os.path.abspath(path))
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": FILE_VERSION,
        "generator": generator_config.to_dict(),
        "splits": {
            name: {
                "path": os.path.relpath(os.path.abspath(p), base),
                "count": count,
            }
            for name, (p, count) in splits.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def read_manifest(path) -> dict:
    """Load a manifest and resolve split paths against its directory."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"{path}: bad manifest JSON: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise RecordFormatError(f"{path}: not a {MANIFEST_FORMAT} file")
    base = os.path.dirname(os.path.abspath(path))
    for info in manifest.get("splits", {}).values():
        info["path"] = os.path.join(base, info["path"])
    return manifest


def load_split(manifest: dict, split: str) -> list:
    """Read the records of one split named in a loaded manifest."""
    splits = manifest.get("splits", {})
    if split not in splits:
        raise RecordFormatError(
            f"manifest has no split {split!r}; available: {sorted(splits)}"
        )
    return read_records(splits[split]["path"])
