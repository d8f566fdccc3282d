"""The fusion regressor: three modality streams pooled into one prediction.

The reference configuration projects audio (frame sequence, 1027-wide),
vision (frame sequence, 768-wide), and text (single 768 vector) into a
shared 512-dim space, runs masked self-attention over each sequence, then
lets the anchor modality query the other two streams through cross-attention.
The anchor's raw features concatenated with both cross-attention readouts
(1792 dims for a text anchor) feed an MLP that regresses six intensities.

Missing modalities are replaced by learned tokens in raw feature space, and
modality dropout can simulate missingness during training. Alternative
fusion modes (plain concat of pooled projections, self-attention without
cross-attention) and alternative anchors are selectable via the config so
each architectural choice can be ablated.
"""

from __future__ import annotations

import binascii
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import data as data_mod
from .nn import (
    CrossAttentionBlock,
    Linear,
    PredictionHead,
    SelfAttentionBlock,
    masked_mean,
    sinusoidal_encoding,
)
from .tensor import Tensor, concat, reshape

FUSION_MODES = ("ta_cross_attention", "self_attention_only", "simple_concat")
ANCHORS = ("text", "audio", "vision")

CHECKPOINT_MAGIC = b"EMIFCKP1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, corrupt, or mismatched."""


@dataclass
class ModelConfig:
    d_audio_in: int = 1027
    d_vision_in: int = 768
    d_text_in: int = 768
    d_latent: int = 512
    n_targets: int = 6
    head_count: int = 4
    mlp_hidden: int = 512
    head_dropout_p: float = 0.1
    modality_dropout_p: float = 0.1
    anchor: str = "text"
    fusion: str = "ta_cross_attention"
    use_missing_tokens: bool = True
    share_query_projection: bool = False
    use_positional_encoding: bool = False
    max_audio_len: int = data_mod.MAX_AUDIO_LEN
    max_vision_len: int = data_mod.MAX_VISION_LEN

    def validate(self) -> None:
        for name in ("d_audio_in", "d_vision_in", "d_text_in", "d_latent",
                     "n_targets", "head_count", "mlp_hidden",
                     "max_audio_len", "max_vision_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_latent % self.head_count != 0:
            raise ValueError(
                f"d_latent {self.d_latent} not divisible by "
                f"head_count {self.head_count}"
            )
        if self.anchor not in ANCHORS:
            raise ValueError(f"anchor must be one of {ANCHORS}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        for name in ("head_dropout_p", "modality_dropout_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")

    @property
    def fused_dim(self) -> int:
        """Width of the vector entering the prediction head."""
        if self.fusion != "ta_cross_attention":
            return 3 * self.d_latent
        anchor_raw = {
            "text": self.d_text_in,
            "audio": self.d_audio_in,
            "vision": self.d_vision_in,
        }[self.anchor]
        return anchor_raw + 2 * self.d_latent

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model options: {sorted(unknown)}")
        config = cls(**d)
        config.validate()
        return config


@dataclass
class ModalityBundle:
    """Raw per-modality inputs for one sample, with explicit missing flags."""

    audio: Optional[np.ndarray] = None
    vision: Optional[np.ndarray] = None
    text: Optional[np.ndarray] = None
    missing: dict = field(default_factory=dict)
    target: Optional[np.ndarray] = None
    id: Optional[str] = None

    def __post_init__(self):
        if not self.missing:
            self.missing = {
                m: getattr(self, m) is None for m in data_mod.MODALITIES
            }

    @classmethod
    def from_record(cls, rec) -> "ModalityBundle":
        return cls(audio=rec.audio, vision=rec.vision, text=rec.text,
                   missing=dict(rec.missing),
                   target=getattr(rec, "target", None),
                   id=getattr(rec, "id", None))

    def validate(self, config: ModelConfig) -> None:
        for name, width, kind in (
            ("audio", config.d_audio_in, "seq"),
            ("vision", config.d_vision_in, "seq"),
            ("text", config.d_text_in, "vec"),
        ):
            feat = getattr(self, name)
            flagged = bool(self.missing.get(name, feat is None))
            if flagged != (feat is None):
                raise ValueError(
                    f"bundle: '{name}' presence contradicts its missing flag"
                )
            if feat is None:
                continue
            feat = np.asarray(feat, dtype=np.float64)
            if kind == "seq":
                if feat.ndim != 2 or feat.shape[1] != width or feat.shape[0] < 1:
                    raise ValueError(
                        f"bundle: '{name}' must be (T>=1, {width}), "
                        f"got {feat.shape}"
                    )
            elif feat.shape != (width,):
                raise ValueError(
                    f"bundle: '{name}' must be ({width},), got {feat.shape}"
                )
            if not np.all(np.isfinite(feat)):
                raise ValueError(f"bundle: '{name}' contains non-finite values")


def modality_dropout(bundle: ModalityBundle, p: float, rng,
                     train: bool = True) -> ModalityBundle:
    """Independently drop each present modality with probability ``p``.

    Returns a new bundle; the input is untouched. Already-missing modalities
    stay missing. Only legal in train mode. ``p == 0`` copies the bundle
    without consuming the RNG.
    """
    if not train:
        raise ValueError("modality_dropout is only defined in train mode")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    out = replace(bundle, missing=dict(bundle.missing))
    if p == 0.0:
        return out
    draws = rng.random(3)
    for i, name in enumerate(data_mod.MODALITIES):
        if draws[i] < p and not out.missing[name]:
            setattr(out, name, None)
            out.missing[name] = True
    return out


class FusionModel:
    """Differentiable multimodal regressor built from the layers in ``nn``.

    Construction order of layers is fixed so that a given seed yields
    bit-identical shared layers across fusion variants: projections first,
    then missing tokens, then the variant-specific attention stack, then
    the head.
    """

    def __init__(self, config: ModelConfig, rng=None):
        config.validate()
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        self.config = config
        c = config
        self.audio_proj = Linear(c.d_audio_in, c.d_latent, rng)
        self.vision_proj = Linear(c.d_vision_in, c.d_latent, rng)
        self.text_proj = Linear(c.d_text_in, c.d_latent, rng)
        self.tokens = {}
        if c.use_missing_tokens:
            for name, width in (("audio", c.d_audio_in),
                                ("vision", c.d_vision_in),
                                ("text", c.d_text_in)):
                if rng is None:
                    value = np.zeros(width)
                else:
                    bound = 1.0 / math.sqrt(width)
                    value = rng.uniform(-bound, bound, size=width)
                self.tokens[name] = Tensor(value, requires_grad=True)
        self.audio_attn = None
        self.vision_attn = None
        self.query_proj = None
        self.readouts = {}
        needs_attn = c.fusion in ("ta_cross_attention", "self_attention_only")
        if needs_attn and self._is_kv_stream("audio"):
            self.audio_attn = SelfAttentionBlock(c.d_latent, c.head_count, rng)
        if needs_attn and self._is_kv_stream("vision"):
            self.vision_attn = SelfAttentionBlock(c.d_latent, c.head_count, rng)
        if c.fusion == "ta_cross_attention":
            if c.share_query_projection:
                self.query_proj = Linear(c.d_latent, c.d_latent, rng)
            for name in data_mod.MODALITIES:
                if name == c.anchor:
                    continue
                self.readouts[name] = CrossAttentionBlock(
                    c.d_latent, c.d_latent, c.d_latent, c.head_count, rng,
                    project_query=not c.share_query_projection,
                )
        self.head = PredictionHead(c.fused_dim, c.mlp_hidden, c.n_targets,
                                   c.head_dropout_p, rng)

    def _is_kv_stream(self, name: str) -> bool:
        if self.config.fusion == "self_attention_only":
            return True
        if self.config.fusion == "simple_concat":
            return False
        return name != self.config.anchor

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        params = []
        params.extend(self.audio_proj.named_parameters("audio_proj"))
        params.extend(self.vision_proj.named_parameters("vision_proj"))
        params.extend(self.text_proj.named_parameters("text_proj"))
        for name in data_mod.MODALITIES:
            if name in self.tokens:
                params.append((f"token_{name}", self.tokens[name]))
        if self.audio_attn is not None:
            params.extend(self.audio_attn.named_parameters("audio_attn"))
        if self.vision_attn is not None:
            params.extend(self.vision_attn.named_parameters("vision_attn"))
        if self.query_proj is not None:
            params.extend(self.query_proj.named_parameters("query_proj"))
        for name in data_mod.MODALITIES:
            if name in self.readouts:
                params.extend(
                    self.readouts[name].named_parameters(f"readout_{name}")
                )
        params.extend(self.head.named_parameters("head"))
        return params

    def no_decay_names(self):
        """Parameters exempt from weight decay: biases and norm affines."""
        exempt = set()
        for name, _ in self.named_parameters():
            if name.endswith((".bias", ".ln_gain", ".ln_shift")):
                exempt.add(name)
        return exempt

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not np.all(np.isfinite(p.data)):
                from .tensor import NumericError
                raise NumericError(f"parameter {name} became non-finite")

    # -- forward ------------------------------------------------------------

    def _effective_sequence(self, block: np.ndarray, mask: np.ndarray,
                            miss_col: np.ndarray, token_name: str):
        """Apply missing-modality substitution to a padded sequence block.

        Missing samples (whose rows collate left as zeros) get the learned
        token at frame 0 and a mask validating only that frame. Without
        learned tokens the zero rows stand in directly.
        """
        t = block.shape[1]
        if not miss_col.any():
            return Tensor(block), mask
        slot = np.zeros(t)
        slot[0] = 1.0
        mask_eff = np.where(miss_col[:, None], slot.astype(bool)[None, :],
                            mask)
        # Zero the rows of missing samples before substitution so stray
        # values in their (unused) feature block can never leak through.
        base = Tensor(np.where(miss_col[:, None, None], 0.0, block))
        token = self.tokens.get(token_name)
        if token is None:
            return base, mask_eff
        indicator = Tensor(miss_col[:, None, None] * slot[None, :, None])
        placed = indicator * reshape(token, (1, 1, token.shape[0]))
        return base + placed, mask_eff

    def _effective_text(self, text: np.ndarray, miss_col: np.ndarray):
        if not miss_col.any():
            return Tensor(text)
        base = Tensor(np.where(miss_col[:, None], 0.0, text))
        token = self.tokens.get("text")
        if token is None:
            return base
        indicator = Tensor(miss_col[:, None].astype(np.float64))
        return base + indicator * reshape(token, (1, token.shape[0]))

    def forward_batch(self, batch, train: bool = False, rng=None,
                      return_intermediates: bool = False):
        """Predict targets for a collated batch; returns a (B, n_targets)
        Tensor. Train mode enables head dropout (modality dropout is applied
        by callers at the bundle level, before collation)."""
        c = self.config
        if batch.audio.shape[2] != c.d_audio_in:
            raise ValueError(
                f"batch audio width {batch.audio.shape[2]} != config "
                f"{c.d_audio_in}"
            )
        if batch.vision.shape[2] != c.d_vision_in:
            raise ValueError(
                f"batch vision width {batch.vision.shape[2]} != config "
                f"{c.d_vision_in}"
            )
        if batch.text.shape[1] != c.d_text_in:
            raise ValueError(
                f"batch text width {batch.text.shape[1]} != config "
                f"{c.d_text_in}"
            )
        b = batch.size
        audio_eff, am = self._effective_sequence(
            batch.audio, batch.audio_mask, batch.missing[:, 0], "audio")
        vision_eff, vm = self._effective_sequence(
            batch.vision, batch.vision_mask, batch.missing[:, 1], "vision")
        text_eff = self._effective_text(batch.text, batch.missing[:, 2])

        a_p = self.audio_proj(audio_eff)
        v_p = self.vision_proj(vision_eff)
        t_p = self.text_proj(text_eff)
        if c.use_positional_encoding:
            a_p = a_p + Tensor(
                sinusoidal_encoding(a_p.shape[1], c.d_latent)[None])
            v_p = v_p + Tensor(
                sinusoidal_encoding(v_p.shape[1], c.d_latent)[None])

        intermediates = {}
        if return_intermediates:
            intermediates = {
                "audio_effective": audio_eff.data,
                "vision_effective": vision_eff.data,
                "text_effective": text_eff.data,
                "audio_projected": a_p.data,
                "vision_projected": v_p.data,
                "text_projected": t_p.data,
                "audio_mask_effective": am,
                "vision_mask_effective": vm,
            }

        if c.fusion == "simple_concat":
            f = concat([t_p, masked_mean(a_p, am), masked_mean(v_p, vm)],
                       axis=-1)
        elif c.fusion == "self_attention_only":
            a_s = self.audio_attn.forward_batch(a_p, am)
            v_s = self.vision_attn.forward_batch(v_p, vm)
            f = concat([t_p, masked_mean(a_s, am), masked_mean(v_s, vm)],
                       axis=-1)
        else:
            streams = {}
            if "audio" in self.readouts:
                streams["audio"] = (self.audio_attn.forward_batch(a_p, am), am)
            if "vision" in self.readouts:
                streams["vision"] = (
                    self.vision_attn.forward_batch(v_p, vm), vm)
            if "text" in self.readouts:
                streams["text"] = (
                    reshape(t_p, (b, 1, c.d_latent)),
                    np.ones((b, 1), dtype=bool),
                )
            if c.anchor == "text":
                query = t_p
                anchor_raw = text_eff
            elif c.anchor == "audio":
                query = masked_mean(a_p, am)
                anchor_raw = masked_mean(audio_eff, am)
            else:
                query = masked_mean(v_p, vm)
                anchor_raw = masked_mean(vision_eff, vm)
            if self.query_proj is not None:
                query = self.query_proj(query)
            pieces = [anchor_raw]
            for name in data_mod.MODALITIES:
                if name in self.readouts:
                    seq, m = streams[name]
                    pieces.append(self.readouts[name].forward_batch(
                        query, seq, m))
            f = concat(pieces, axis=-1)

        if f.shape != (b, c.fused_dim):
            raise ValueError(
                f"fused vector has shape {f.shape}, expected "
                f"({b}, {c.fused_dim})"
            )
        if return_intermediates:
            intermediates["fused"] = f.data
        y = self.head(f, train, rng)
        if return_intermediates:
            return y, intermediates
        return y

    def forward(self, bundle: ModalityBundle, train: bool = False,
                rng=None) -> Tensor:
        """Predict targets for one bundle. In train mode this applies
        modality dropout (consuming ``rng``) before substitution."""
        bundle.validate(self.config)
        if train:
            bundle = modality_dropout(
                bundle, self.config.modality_dropout_p, rng)
        c = self.config
        batch = data_mod.collate(
            [bundle], d_audio=c.d_audio_in, d_vision=c.d_vision_in,
            d_text=c.d_text_in, n_targets=c.n_targets,
            max_audio_len=c.max_audio_len, max_vision_len=c.max_vision_len)
        out = self.forward_batch(batch, train=train, rng=rng)
        return reshape(out, (c.n_targets,))


# -- checkpoints -------------------------------------------------------------


def _pack_blobs(named_arrays):
    entries = []
    chunks = []
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append([name, list(arr.shape)])
        chunks.append(arr.tobytes())
    return entries, b"".join(chunks)


def save_checkpoint(model: FusionModel, state, path) -> None:
    """Serialize model parameters plus optimizer/loop state to one file.

    The format is self-describing: magic, version, a JSON meta block naming
    every array blob and carrying config and state scalars, the raw float64
    blobs, and a trailing CRC32 so truncation or corruption is detected at
    load time. ``state`` may be None for a weights-only checkpoint.
    """
    named = [(f"param.{n}", p.data) for n, p in model.named_parameters()]
    state_meta = None
    if state is not None:
        state_meta = state.to_meta()
        for n, arr in state.moment_arrays():
            named.append((n, arr))
    blob_entries, blob_bytes = _pack_blobs(named)
    meta = {
        "config": model.config.to_dict(),
        "state": state_meta,
        "blobs": blob_entries,
    }
    meta_bytes = json.dumps(meta).encode("utf-8")
    body = (CHECKPOINT_MAGIC
            + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<Q", len(meta_bytes))
            + meta_bytes
            + blob_bytes)
    crc = binascii.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


def load_checkpoint(path):
    """Rebuild a model (and TrainState when present) from a checkpoint.

    Returns ``(model, state)``; ``state`` is None for weights-only files.
    The whole file is validated before any object is constructed, so a bad
    file never yields partial state.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    min_len = len(CHECKPOINT_MAGIC) + 4 + 8 + 4
    if len(raw) < min_len:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    if offset + meta_len + 4 > len(raw):
        raise CheckpointError(f"{path}: truncated checkpoint")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if binascii.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    try:
        meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: bad meta block: {exc}") from exc
    offset += meta_len
    arrays = {}
    for name, shape in meta["blobs"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw) - 4:
            raise CheckpointError(f"{path}: blob '{name}' truncated")
        arrays[name] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw) - 4:
        raise CheckpointError(f"{path}: trailing bytes after blobs")

    config = ModelConfig.from_dict(meta["config"])
    model = FusionModel(config, rng=None)
    expected = {f"param.{n}" for n, _ in model.named_parameters()}
    present = {n for n in arrays if n.startswith("param.")}
    if expected != present:
        raise CheckpointError(
            f"{path}: parameter names do not match the stored config"
        )
    for name, p in model.named_parameters():
        blob = arrays[f"param.{name}"]
        if blob.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {blob.shape}, "
                f"expected {p.data.shape}"
            )
        p.data = blob
    state = None
    if meta["state"] is not None:
        from .optim import TrainState
        state = TrainState.from_meta(meta["state"], arrays)
    return model, state
