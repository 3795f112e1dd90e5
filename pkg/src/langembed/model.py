"""Language encoder, projection, adversarial speaker branch and downstream head.

Parameters live in one flat ``ModelGraph`` partitioned into four freeze groups:

* ``encoder``     dilated conv stack + statistics pooling + linear map to z_lang
                  (plus the language-ID head used only while pretraining it)
* ``projection``  kernel-size-1 conv over z_lang producing h_lang
* ``classifiers`` language and speaker heads on h_lang
* ``downstream``  per-frame phoneme head conditioned on h_lang
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

ENCODER, PROJECTION, CLASSIFIERS, DOWNSTREAM = "encoder", "projection", "classifiers", "downstream"
GROUPS = (ENCODER, PROJECTION, CLASSIFIERS, DOWNSTREAM)

CONV_CHANNELS = (32, 32, 32)
DILATIONS = (1, 2, 3)
KERNEL = 3
Z_DIM = 64
H_DIM = 32
HIDDEN = 64
RECEPTIVE_FIELD = 1 + sum((KERNEL - 1) * d for d in DILATIONS)

CKPT_MAGIC = b"LDCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class UnseenLanguageError(KeyError):
    pass


def _init(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class ModelGraph:
    def __init__(
        self,
        n_bins: int,
        n_languages: int,
        n_speakers: int,
        n_phoneme_classes: int,
        seed: int = 0,
        sat_enabled: bool = True,
        projection_enabled: bool = True,
        grl_lambda: float = 1.0,
    ):
        self.n_bins = n_bins
        self.n_languages = n_languages
        self.n_speakers = n_speakers
        self.n_phoneme_classes = n_phoneme_classes
        self.sat_enabled = sat_enabled
        self.projection_enabled = projection_enabled
        self.grl_lambda = grl_lambda
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}

        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x30DE1]))
        c_in = n_bins
        for i, c_out in enumerate(CONV_CHANNELS):
            self._add(ENCODER, f"enc.conv{i}.w", _init(rng, (KERNEL, c_in, c_out), KERNEL * c_in))
            self._add(ENCODER, f"enc.conv{i}.b", np.zeros(c_out))
            c_in = c_out
        self._add(ENCODER, "enc.lin.w", _init(rng, (2 * c_in, Z_DIM), 2 * c_in, 1.0))
        self._add(ENCODER, "enc.lin.b", np.zeros(Z_DIM))
        self._add(ENCODER, "enc.lid.w", _init(rng, (Z_DIM, n_languages), Z_DIM, 1.0))
        self._add(ENCODER, "enc.lid.b", np.zeros(n_languages))

        self._add(PROJECTION, "proj.w", _init(rng, (1, Z_DIM, H_DIM), Z_DIM))
        self._add(PROJECTION, "proj.b", np.zeros(H_DIM))

        self._add(CLASSIFIERS, "cls.lang.w", _init(rng, (H_DIM, n_languages), H_DIM, 1.0))
        self._add(CLASSIFIERS, "cls.lang.b", np.zeros(n_languages))
        self._add(CLASSIFIERS, "cls.spk.w", _init(rng, (H_DIM, n_speakers), H_DIM, 1.0))
        self._add(CLASSIFIERS, "cls.spk.b", np.zeros(n_speakers))

        d_in = n_bins + H_DIM
        self._add(DOWNSTREAM, "down.w1", _init(rng, (d_in, HIDDEN), d_in))
        self._add(DOWNSTREAM, "down.b1", np.zeros(HIDDEN))
        self._add(DOWNSTREAM, "down.w2", _init(rng, (HIDDEN, n_phoneme_classes), HIDDEN, 1.0))
        self._add(DOWNSTREAM, "down.b2", np.zeros(n_phoneme_classes))

    @classmethod
    def from_config(cls, config, seed: int | None = None) -> ModelGraph:
        n_total = config.n_languages + config.n_unseen_languages
        return cls(
            n_bins=config.n_bins,
            n_languages=config.n_languages,
            n_speakers=config.n_languages * config.speakers_per_language,
            n_phoneme_classes=n_total * config.n_phonemes,
            seed=config.seed if seed is None else seed,
            sat_enabled=config.sat_enabled,
            projection_enabled=config.projection_enabled,
            grl_lambda=config.grl_lambda,
        )

    def _add(self, group: str, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, name=name)
        self.groups[name] = group

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def group_params(self, *groups: str) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if self.groups[n] in groups}

    def set_trainable(self, *groups: str) -> dict[str, Tensor]:
        """Mark exactly ``groups`` as requiring gradients; return their parameters."""
        for name, p in self.params.items():
            p.requires_grad = self.groups[name] in groups
            p.grad = None
        return self.group_params(*groups)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def group_digest(self, group: str) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.group_params(group).items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def digests(self) -> dict[str, str]:
        return {g: self.group_digest(g) for g in GROUPS}

    # ------------------------------------------------------------ forward

    def encode(self, frames) -> Tensor:
        """frames (T, D) or (N, T, D) -> z_lang (64,) or (N, 64)."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.shape[-2] < RECEPTIVE_FIELD:
            raise T.ShapeError(
                f"encode: need at least {RECEPTIVE_FIELD} frames, got {x.shape[-2]}"
            )
        single = x.data.ndim == 2
        for i, d in enumerate(DILATIONS):
            x = T.relu(T.conv1d(x, self[f"enc.conv{i}.w"], self[f"enc.conv{i}.b"], dilation=d))
        pooled = T.statistics_pooling(x)
        if single:
            pooled = T.reshape(pooled, (1, pooled.shape[0]))
        z = T.add_bias(T.matmul(pooled, self["enc.lin.w"]), self["enc.lin.b"])
        return T.reshape(z, (Z_DIM,)) if single else z

    def encoder_logits(self, z: Tensor) -> Tensor:
        return T.add_bias(T.matmul(z, self["enc.lid.w"]), self["enc.lid.b"])

    def project(self, z: Tensor, enabled: bool | None = None) -> Tensor:
        """z_lang (N, 64) or (64,) -> h_lang (N, 32) or (32,).

        The projection is a kernel-size-1 convolution over z_lang viewed as a
        length-1 sequence of 64 channels, followed by ReLU. With the projection
        disabled h_lang is the first 32 entries of z_lang.
        """
        enabled = self.projection_enabled if enabled is None else enabled
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1] != Z_DIM:
            raise T.ShapeError(f"project: expected z_lang of size {Z_DIM}, got {z.shape}")
        if not enabled:
            return T.take_last(z, 0, H_DIM)
        single = z.data.ndim == 1
        n = 1 if single else z.shape[0]
        seq = T.reshape(z, (n, 1, Z_DIM))
        h = T.relu(T.conv1d(seq, self["proj.w"], self["proj.b"]))
        return T.reshape(h, (H_DIM,) if single else (n, H_DIM))

    def forward_heads(self, h: Tensor, sat_enabled: bool | None = None, lam: float | None = None):
        sat_enabled = self.sat_enabled if sat_enabled is None else sat_enabled
        lam = self.grl_lambda if lam is None else lam
        lang = T.add_bias(T.matmul(h, self["cls.lang.w"]), self["cls.lang.b"])
        spk_in = T.grad_reverse(h, lam) if sat_enabled else h
        spk = T.add_bias(T.matmul(spk_in, self["cls.spk.w"]), self["cls.spk.b"])
        return lang, spk

    def phoneme_logits(self, frames, h: Tensor) -> Tensor:
        """Per-frame logits (N*T, n_phoneme_classes) from frames (N, T, D) and h_lang (N, 32)."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        n, t, d = x.shape
        if h.shape != (n, H_DIM):
            raise T.ShapeError(f"phoneme_logits: h_lang shape {h.shape} vs frames {x.shape}")
        inp = T.reshape(T.concat([x, T.tile_frames(h, t)], axis=2), (n * t, d + H_DIM))
        hid = T.relu(T.add_bias(T.matmul(inp, self["down.w1"]), self["down.b1"]))
        return T.add_bias(T.matmul(hid, self["down.w2"]), self["down.b2"])

    def embed(self, frames, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Inference-only (z_lang, h_lang) arrays for (N, T, D) frames."""
        zs, hs = [], []
        with T.no_grad():
            for lo in range(0, len(frames), batch):
                z = self.encode(frames[lo : lo + batch])
                zs.append(z.data)
                hs.append(self.project(z).data)
        return np.concatenate(zs), np.concatenate(hs)

    def predict_phonemes(self, frames, h: np.ndarray, batch: int = 256) -> np.ndarray:
        n, t, _ = frames.shape
        out = []
        with T.no_grad():
            for lo in range(0, n, batch):
                logits = self.phoneme_logits(frames[lo : lo + batch], Tensor(h[lo : lo + batch]))
                out.append(logits.data.argmax(axis=1).reshape(-1, t))
        return np.concatenate(out)

    def copy(self) -> ModelGraph:
        other = object.__new__(ModelGraph)
        other.__dict__.update(self.__dict__)
        other.params = {n: Tensor(p.data, name=n) for n, p in self.params.items()}
        other.groups = dict(self.groups)
        return other


class LanguageIDBaseline:
    """Fixed per-language embedding table: the conventional language-ID conditioning.

    Any language absent at construction has no row and cannot be embedded.
    """

    def __init__(self, language_ids, dim: int = H_DIM, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D]))
        self.table = {int(i): rng.normal(0.0, 1.0, size=dim) for i in sorted(language_ids)}

    def embed(self, language_id: int) -> np.ndarray:
        try:
            return self.table[int(language_id)].copy()
        except KeyError:
            raise UnseenLanguageError(
                f"unseen language has no ID: {language_id} (known: {sorted(self.table)})"
            ) from None


# ---------------------------------------------------------------- checkpoints

_HEAD = struct.Struct("<4sI32sBBdIIIII")


def save_checkpoint(model: ModelGraph, path, config_digest: bytes = b"\0" * 32) -> str:
    """Write ``model`` to ``path``; return the sha256 of the written bytes."""
    parts = [
        _HEAD.pack(
            CKPT_MAGIC,
            CKPT_VERSION,
            config_digest,
            int(model.sat_enabled),
            int(model.projection_enabled),
            float(model.grl_lambda),
            model.n_bins,
            model.n_languages,
            model.n_speakers,
            model.n_phoneme_classes,
            len(model.params),
        )
    ]
    for name, p in model.params.items():
        group = model.groups[name].encode()
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(group)) + group)
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    blob = b"".join(parts)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[ModelGraph, bytes]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, digest, sat, proj, lam, n_bins, n_lang, n_spk, n_phon, n_rec = _HEAD.unpack_from(blob)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CheckpointError(f"{path}: not a v{CKPT_VERSION} LDCK checkpoint")
    model = ModelGraph(n_bins, n_lang, n_spk, n_phon, 0, bool(sat), bool(proj), lam)
    off = _HEAD.size
    try:
        for _ in range(n_rec):
            (glen,) = struct.unpack_from("<H", blob, off)
            group = blob[off + 2 : off + 2 + glen].decode()
            off += 2 + glen
            (nlen,) = struct.unpack_from("<H", blob, off)
            name = blob[off + 2 : off + 2 + nlen].decode()
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            shape = struct.unpack_from(f"<{ndim}I", blob, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(blob):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            data = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=off).reshape(shape)
            off += size
            if name not in model.params or model.params[name].shape != tuple(shape):
                raise CheckpointError(f"{path}: unexpected parameter {name} {shape}")
            model.params[name] = Tensor(data.astype(np.float64), name=name)
            model.groups[name] = group
    except struct.error:
        raise CheckpointError(f"{path}: truncated record") from None
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return model, digest
