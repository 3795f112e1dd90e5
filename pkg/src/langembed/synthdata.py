"""Synthetic multilingual corpus with known language, speaker and phoneme factors.

A language is a set of phoneme spectral templates (Gaussian bumps at a few
formant bins of a log-energy vector) plus a Markov chain over phonemes. A
speaker is a language-independent transform: circular bin shift (pitch),
linear spectral tilt and a gain offset. Frames are rendered directly in the
log-filterbank domain.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"SYNU"
_HEADER = struct.Struct("<4s5I")

MIN_TEMPLATE_DISTANCE = 1.0
BUMP_HEIGHT = 2.0
BUMP_WIDTH = 1.0
INVENTORY_SIZE = 4
# circular distance between inventory bins; exceeds twice the largest pitch shift
MIN_INVENTORY_SPACING = 5
MAX_PITCH_SHIFT = 2
# bins two inventories may share under any relative pitch shift
MAX_SHARED_BINS = 3
TILT_RANGE = 0.04
GAIN_SIGMA = 0.2


class CorpusError(ValueError):
    pass


@dataclass
class LanguageSpec:
    language_id: int
    formant_bins: tuple[int, ...]
    phoneme_formants: list[tuple[int, ...]]
    templates: np.ndarray  # (P, D)
    transition_matrix: np.ndarray  # (P, P), row-stochastic
    mean_phoneme_duration: float

    @property
    def n_phonemes(self) -> int:
        return self.templates.shape[0]


@dataclass
class SpeakerSpec:
    speaker_id: int
    pitch_offset: int
    spectral_tilt: float
    gain: float

    def apply(self, frames: np.ndarray) -> np.ndarray:
        d = frames.shape[-1]
        bins = np.arange(d) - (d - 1) / 2
        return np.roll(frames, self.pitch_offset, axis=-1) + self.spectral_tilt * bins + self.gain


@dataclass
class SyntheticUtterance:
    frames: np.ndarray  # (T, D) float64
    y_lang: int
    y_spk: int
    phonemes: np.ndarray  # (T,) local phoneme indices
    seed: int = 0

    def __post_init__(self):
        if self.frames.ndim != 2 or self.phonemes.shape != (self.frames.shape[0],):
            raise CorpusError(
                f"frames {self.frames.shape} and phonemes {self.phonemes.shape} disagree"
            )
        if not np.isfinite(self.frames).all():
            raise CorpusError("utterance frames contain non-finite values")


def formant_template(bins, n_bins: int) -> np.ndarray:
    idx = np.arange(n_bins)
    out = np.full(n_bins, -1.0)
    for b in bins:
        dist = np.minimum(np.abs(idx - b), n_bins - np.abs(idx - b))
        out += BUMP_HEIGHT * np.exp(-0.5 * (dist / BUMP_WIDTH) ** 2)
    return out


def _min_circular_gap(bins, n_bins: int) -> int:
    b = sorted(bins)
    gaps = [b2 - b1 for b1, b2 in zip(b, b[1:])] + [b[0] + n_bins - b[-1]]
    return min(gaps)


def _max_shifted_overlap(a, b, n_bins: int) -> int:
    sb = set(b)
    reach = 2 * MAX_PITCH_SHIFT
    return max(len({(x + s) % n_bins for x in a} & sb) for s in range(-reach, reach + 1))


def _pairwise_min(templates: np.ndarray) -> float:
    diff = templates[:, None, :] - templates[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    return float(dist[~np.eye(len(templates), dtype=bool)].min())


def make_language_specs(
    n_languages: int, n_phonemes: int, seed: int, n_bins: int = 24
) -> list[LanguageSpec]:
    """Generate ``n_languages`` languages with distinct formant inventories."""
    if n_languages < 2 or n_phonemes < 3:
        raise CorpusError(f"need n_languages >= 2 and n_phonemes >= 3, got {n_languages}, {n_phonemes}")
    inv = min(INVENTORY_SIZE, n_bins)
    combos_per_lang = sum(
        len(list(itertools.combinations(range(inv), r))) for r in (2, 3)
    )
    if n_phonemes > combos_per_lang:
        raise CorpusError(
            f"cannot place {n_phonemes} distinguishable phonemes on a {inv}-bin inventory "
            f"in {n_bins} bins (at most {combos_per_lang})"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A16]))
    used: set[tuple[int, ...]] = set()
    specs = []
    for lang in range(n_languages):
        for _ in range(1000):
            inventory = tuple(sorted(rng.choice(n_bins, size=inv, replace=False).tolist()))
            if (
                inventory not in used
                and _min_circular_gap(inventory, n_bins) >= MIN_INVENTORY_SPACING
                and all(_max_shifted_overlap(inventory, u, n_bins) <= MAX_SHARED_BINS for u in used)
            ):
                break
        else:
            raise CorpusError(
                f"could not find {n_languages} distinct {inv}-bin inventories with spacing "
                f">= {MIN_INVENTORY_SPACING} in {n_bins} bins"
            )
        used.add(inventory)
        options = [c for r in (2, 3) for c in itertools.combinations(inventory, r)]
        for _ in range(200):
            pick = rng.choice(len(options), size=n_phonemes, replace=False)
            formants = [options[i] for i in sorted(pick)]
            templates = np.stack([formant_template(f, n_bins) for f in formants])
            if _pairwise_min(templates) >= MIN_TEMPLATE_DISTANCE:
                break
        else:
            raise CorpusError(
                f"templates of language {lang} are not separable by {MIN_TEMPLATE_DISTANCE}"
            )
        trans = rng.dirichlet(np.full(n_phonemes, 0.5), size=n_phonemes)
        np.fill_diagonal(trans, 0.0)
        trans /= trans.sum(axis=1, keepdims=True)
        specs.append(
            LanguageSpec(
                language_id=lang,
                formant_bins=inventory,
                phoneme_formants=formants,
                templates=templates,
                transition_matrix=trans,
                mean_phoneme_duration=float(rng.uniform(4.0, 8.0)),
            )
        )
    return specs


def make_speaker_specs(n_speakers: int, seed: int, first_id: int = 0) -> list[SpeakerSpec]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B3A, first_id]))
    out = []
    for i in range(n_speakers):
        out.append(
            SpeakerSpec(
                speaker_id=first_id + i,
                pitch_offset=int(rng.integers(-MAX_PITCH_SHIFT, MAX_PITCH_SHIFT + 1)),
                spectral_tilt=float(rng.uniform(-TILT_RANGE, TILT_RANGE)),
                gain=float(rng.normal(0.0, GAIN_SIGMA)),
            )
        )
    return out


def render_utterance(
    lang: LanguageSpec,
    spk: SpeakerSpec,
    length: int = 100,
    seed: int = 0,
    noise_sigma: float = 0.05,
) -> SyntheticUtterance:
    """Sample a phoneme path and render its frames through the speaker transform."""
    if length < 20:
        raise CorpusError(f"utterance length must be >= 20 frames, got {length}")
    rng = np.random.default_rng(seed)
    p = lang.n_phonemes
    stay = 1.0 - 1.0 / max(lang.mean_phoneme_duration, 1.0)
    phonemes = np.empty(length, dtype=np.int64)
    cur = int(rng.integers(p))
    for t in range(length):
        phonemes[t] = cur
        if p > 1 and rng.random() > stay:
            cur = int(rng.choice(p, p=lang.transition_matrix[cur]))
    frames = spk.apply(lang.templates[phonemes])
    if noise_sigma > 0:
        frames = frames + rng.normal(0.0, noise_sigma, size=frames.shape)
    return SyntheticUtterance(frames, lang.language_id, spk.speaker_id, phonemes, seed)


# ---------------------------------------------------------------- persistence


def write_utterance(path: Path, utt: SyntheticUtterance) -> None:
    t, d = utt.frames.shape
    if utt.phonemes.max(initial=0) > 0xFFFF:
        raise CorpusError("phoneme index does not fit in u16")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, t, d, utt.y_lang, utt.y_spk))
        fh.write(np.ascontiguousarray(utt.frames, dtype="<f8").tobytes())
        fh.write(utt.phonemes.astype("<u2").tobytes())


def read_utterance(path: Path, seed: int = 0) -> SyntheticUtterance:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorpusError(f"{path}: expected at least {_HEADER.size} bytes, got {len(raw)}")
    magic, version, t, d, y_lang, y_spk = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise CorpusError(f"{path}: bad header magic={magic!r} version={version}")
    expected = _HEADER.size + t * d * 8 + t * 2
    if len(raw) != expected:
        raise CorpusError(f"{path}: expected {expected} bytes, got {len(raw)}")
    off = _HEADER.size
    frames = np.frombuffer(raw, dtype="<f8", count=t * d, offset=off).reshape(t, d).astype(np.float64)
    phon = np.frombuffer(raw, dtype="<u2", count=t, offset=off + t * d * 8).astype(np.int64)
    return SyntheticUtterance(frames, y_lang, y_spk, phon, seed)


@dataclass
class CorpusManifest:
    root: Path
    seed: int
    n_frames: int
    n_bins: int
    n_phonemes: int
    seen_languages: list[int]
    unseen_languages: list[int]
    speakers: dict[int, list[int]]
    utterances: list[dict]

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for u in self.utterances:
            split = out.setdefault(u["split"], {})
            split[str(u["y_lang"])] = split.get(str(u["y_lang"]), 0) + 1
        return out

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "n_frames": self.n_frames,
            "n_bins": self.n_bins,
            "n_phonemes": self.n_phonemes,
            "seen_languages": self.seen_languages,
            "unseen_languages": self.unseen_languages,
            "speakers": {str(k): v for k, v in self.speakers.items()},
            "counts": self.counts(),
            "utterances": self.utterances,
        }

    @classmethod
    def load(cls, root) -> CorpusManifest:
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"missing corpus manifest: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("format_version") != FORMAT_VERSION:
            raise CorpusError(f"{path}: unsupported format_version {doc.get('format_version')}")
        return cls(
            root=root,
            seed=doc["seed"],
            n_frames=doc["n_frames"],
            n_bins=doc["n_bins"],
            n_phonemes=doc["n_phonemes"],
            seen_languages=doc["seen_languages"],
            unseen_languages=doc["unseen_languages"],
            speakers={int(k): v for k, v in doc["speakers"].items()},
            utterances=doc["utterances"],
        )

    def select(self, split: str, languages=None) -> list[int]:
        langs = None if languages is None else set(languages)
        return [
            i
            for i, u in enumerate(self.utterances)
            if u["split"] == split and (langs is None or u["y_lang"] in langs)
        ]

    def digest(self) -> str:
        return hashlib.sha256((self.root / "manifest.json").read_bytes()).hexdigest()


def load_utterance(manifest: CorpusManifest, index: int) -> SyntheticUtterance:
    entry = manifest.utterances[index]
    utt = read_utterance(manifest.root / entry["file"], seed=entry["seed"])
    if utt.frames.shape != (manifest.n_frames, manifest.n_bins):
        raise CorpusError(
            f"{entry['file']}: shape {utt.frames.shape} != declared "
            f"{(manifest.n_frames, manifest.n_bins)}"
        )
    return utt


def utterance_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1)[0])


def corpus_plan(config):
    """Language/speaker specs and the ordered utterance plan for ``config``."""
    n_total = config.n_languages + config.n_unseen_languages
    langs = make_language_specs(n_total, config.n_phonemes, config.seed, config.n_bins)
    speakers = {}
    for lang in range(n_total):
        first = lang * config.speakers_per_language
        speakers[lang] = make_speaker_specs(config.speakers_per_language, config.seed, first)
    plan = []
    for lang in range(n_total):
        for split, count in (("train", config.train_per_speaker), ("eval", config.eval_per_speaker)):
            # speaker-major order within (language, split); stage 2 budgets rely on it
            for spk in speakers[lang]:
                for k in range(count):
                    plan.append((lang, spk.speaker_id, split))
    return langs, speakers, plan


def build_corpus(config, out_dir) -> CorpusManifest:
    """Render every utterance of ``config``'s grid into ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "utts").mkdir(parents=True, exist_ok=True)
    langs, speakers, plan = corpus_plan(config)
    spk_by_id = {s.speaker_id: s for ss in speakers.values() for s in ss}
    entries = []
    for index, (lang, spk_id, split) in enumerate(plan):
        seed = utterance_seed(config.seed, index)
        utt = render_utterance(
            langs[lang], spk_by_id[spk_id], config.n_frames, seed, config.noise_sigma
        )
        name = f"utts/{index:05d}.synu"
        write_utterance(out_dir / name, utt)
        entries.append(
            {"index": index, "file": name, "split": split, "y_lang": lang, "y_spk": spk_id, "seed": seed}
        )
    manifest = CorpusManifest(
        root=out_dir,
        seed=config.seed,
        n_frames=config.n_frames,
        n_bins=config.n_bins,
        n_phonemes=config.n_phonemes,
        seen_languages=list(range(config.n_languages)),
        unseen_languages=list(range(config.n_languages, len(langs))),
        speakers={k: [s.speaker_id for s in v] for k, v in speakers.items()},
        utterances=entries,
    )
    text = json.dumps(manifest.to_json(), indent=1, sort_keys=True)
    (out_dir / "manifest.json").write_text(text + "\n", encoding="utf-8")
    return manifest


@dataclass
class ArraySet:
    """Stacked utterances: frames (N, T, D), global phoneme labels (N, T)."""

    frames: np.ndarray
    y_lang: np.ndarray
    y_spk: np.ndarray
    phonemes: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.y_lang)

    def subset(self, rows) -> ArraySet:
        rows = np.asarray(rows)
        return ArraySet(
            self.frames[rows], self.y_lang[rows], self.y_spk[rows], self.phonemes[rows], self.indices[rows]
        )


def load_arrays(manifest: CorpusManifest, indices) -> ArraySet:
    utts = [load_utterance(manifest, i) for i in indices]
    p = manifest.n_phonemes
    return ArraySet(
        frames=np.stack([u.frames for u in utts]) if utts else np.zeros((0, manifest.n_frames, manifest.n_bins)),
        y_lang=np.array([u.y_lang for u in utts], dtype=np.int64),
        y_spk=np.array([u.y_spk for u in utts], dtype=np.int64),
        phonemes=np.stack([u.phonemes + u.y_lang * p for u in utts]) if utts else np.zeros((0, manifest.n_frames), np.int64),
        indices=np.asarray(list(indices), dtype=np.int64),
    )
