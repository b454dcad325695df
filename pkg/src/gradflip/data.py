"""Synthetic speaker-conditioned dataset.

Each utterance is a token sequence rendered to feature frames. A token's
frames are its fixed prototype vector, distorted by the speaker's affine
channel profile (per-dimension gain and offset) plus white noise:

    frame = prototype(token) * gain(speaker) + offset(speaker) + N(0, sigma^2 I)

Prototypes are orthonormal random directions shared across speakers.
When the feature dimension exceeds the token count, speaker offsets are
drawn mostly in the orthogonal complement of the prototype span (plus a
small in-span component): speaker identity is then linearly recoverable
at the input, while a transcription-focused encoder can in principle
discard it by projection without losing token information. That is the
structure that makes input-layer probes start high and lets adversarial
training push deeper probes below the baseline. Speakers past
`n_speakers` are generated the same way but their transcripts are
dropped (the semi-supervised pool).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gradflip.rng import RngStream

__all__ = [
    "GenConfig", "Utterance", "Dataset", "MINSPK_PRESET", "MAXSPK_PRESET",
    "feature_bases", "generate", "split", "select_subset", "partition_semi",
    "save_dataset", "load_dataset", "datasets_equal",
]

FILE_VERSION = 1

# budget-matched subset presets: few speakers x many utterances vs the
# opposite, 600 utterances either way
MINSPK_PRESET = (4, 150)
MAXSPK_PRESET = (30, 20)


@dataclass(frozen=True)
class GenConfig:
    n_speakers: int = 12
    utterances_per_speaker: int = 63
    alphabet_size: int = 6  # letters, excluding the separator
    dim: int = 8
    frames_per_token: tuple[int, int] = (2, 4)
    noise_sigma: float = 0.3
    words_per_utterance: tuple[int, int] = (2, 3)
    letters_per_word: tuple[int, int] = (2, 4)
    semi_speakers: int = 0
    offset_scale: float = 0.75
    gain_range: tuple[float, float] = (0.7, 1.3)
    seed: int = 1234

    def __post_init__(self):
        for name in ("n_speakers", "utterances_per_speaker", "alphabet_size", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.semi_speakers < 0:
            raise ValueError("semi_speakers must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in ("frames_per_token", "words_per_utterance", "letters_per_word"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a range with 1 <= lo <= hi")
        if self.gain_range[0] <= 0:
            raise ValueError("gains must stay positive")
        if self.alphabet_size == 1 and self.letters_per_word[1] > 1:
            raise ValueError("a one-letter alphabet cannot form duplicate-free words")


@dataclass(eq=False)
class Utterance:
    id: str
    speaker: int
    transcript: tuple[int, ...] | None
    features: np.ndarray  # (T, dim)


@dataclass(eq=False)
class Dataset:
    utterances: list[Utterance]
    vocab: list[str]  # letters then separator, index == token id
    speakers: list[str]

    @property
    def separator(self) -> int:
        return len(self.vocab) - 1

    @property
    def dim(self) -> int:
        return self.utterances[0].features.shape[1]


def _letter_names(alphabet_size: int) -> list[str]:
    if alphabet_size <= 26:
        return list(string.ascii_lowercase[:alphabet_size])
    return [f"t{i:02d}" for i in range(alphabet_size)]


def _draw_word(rng: RngStream, alphabet: int, lo: int, hi: int) -> list[int]:
    n = int(rng.integers(lo, hi))
    word = [int(rng.integers(0, alphabet - 1))]
    while len(word) < n:
        # uniform over the alphabet minus the previous letter, no rejection
        nxt = int(rng.integers(0, alphabet - 2))
        word.append(nxt if nxt < word[-1] else nxt + 1)
    return word


# share of the offset magnitude that lands inside the prototype span when
# a complement exists; the in-span part cannot be deleted without touching
# token information, so probes keep a residual signal at any depth
IN_SPAN_FRACTION = 0.25


def feature_bases(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """(prototypes, complement): orthonormal token rows and the left-over
    directions of feature space, as drawn by generate() for this config."""
    n_tokens = cfg.alphabet_size + 1
    rng = RngStream(cfg.seed, "gen")
    q, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
    return q[:, :n_tokens].T.copy(), q[:, n_tokens:].copy()


def generate(cfg: GenConfig) -> Dataset:
    """Deterministically generate the dataset (main plus semi speakers)."""
    n_tokens = cfg.alphabet_size + 1  # letters + separator
    if n_tokens > cfg.dim:
        raise ValueError(
            f"alphabet of {cfg.alphabet_size} letters (+separator) is not representable "
            f"in {cfg.dim} dimensions; need dim >= {n_tokens}"
        )
    rng = RngStream(cfg.seed, "gen")
    q, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
    prototypes = q[:, :n_tokens].T  # (n_tokens, dim), orthonormal rows
    complement = q[:, n_tokens:]  # (dim, dim - n_tokens)
    comp_dim = cfg.dim - n_tokens
    in_span_scale = cfg.offset_scale * (IN_SPAN_FRACTION if comp_dim else 1.0)

    total_speakers = cfg.n_speakers + cfg.semi_speakers
    offsets = np.zeros((total_speakers, cfg.dim))
    gains = np.zeros((total_speakers, cfg.dim))
    for s in range(total_speakers):
        while True:
            off = prototypes.T @ rng.normal(0.0, in_span_scale, n_tokens)
            if comp_dim:
                off = off + complement @ rng.normal(0.0, cfg.offset_scale, comp_dim)
            if not any(np.array_equal(off, offsets[p]) for p in range(s)):
                break
        offsets[s] = off
        gains[s] = rng.uniform(cfg.gain_range[0], cfg.gain_range[1], cfg.dim)

    if total_speakers > 1 and cfg.noise_sigma > 0:
        dists = [
            np.linalg.norm(offsets[i] - offsets[j])
            for i in range(total_speakers)
            for j in range(i + 1, total_speakers)
        ]
        mean_dist = float(np.mean(dists))
        if mean_dist <= 4.0 * cfg.noise_sigma:
            raise ValueError(
                f"speakers are not separable: mean offset distance {mean_dist:.3f} "
                f"<= 4 * noise_sigma {4 * cfg.noise_sigma:.3f}"
            )

    utterances: list[Utterance] = []
    for s in range(total_speakers):
        for u in range(cfg.utterances_per_speaker):
            n_words = int(rng.integers(*cfg.words_per_utterance))
            tokens: list[int] = []
            for w in range(n_words):
                if w:
                    tokens.append(cfg.alphabet_size)  # separator
                tokens.extend(_draw_word(rng, cfg.alphabet_size, *cfg.letters_per_word))
            frames = []
            for tok in tokens:
                reps = int(rng.integers(*cfg.frames_per_token))
                base = prototypes[tok] * gains[s] + offsets[s]
                for _ in range(reps):
                    noise = rng.normal(0.0, cfg.noise_sigma, cfg.dim) if cfg.noise_sigma > 0 else 0.0
                    frames.append(base + noise)
            utterances.append(
                Utterance(
                    id=f"spk{s:03d}-u{u:04d}",
                    speaker=s,
                    transcript=tuple(tokens) if s < cfg.n_speakers else None,
                    features=np.asarray(frames, dtype=np.float64),
                )
            )
    vocab = _letter_names(cfg.alphabet_size) + ["|"]
    speakers = [f"spk{s:03d}" for s in range(total_speakers)]
    return Dataset(utterances, vocab, speakers)


def _by_speaker(ds: Dataset) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, u in enumerate(ds.utterances):
        groups.setdefault(u.speaker, []).append(i)
    return groups


def split(ds: Dataset, train_frac: float, dev_frac: float, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Speaker-stratified disjoint train/dev/test split."""
    if not (0 < train_frac < 1 and 0 < dev_frac < 1 and train_frac + dev_frac < 1):
        raise ValueError("fractions must be in (0,1) and sum below 1")
    rng = RngStream(seed, "split")
    picks: list[list[int]] = [[], [], []]
    groups = _by_speaker(ds)
    for speaker in sorted(groups):
        idxs = groups[speaker]
        perm = rng.permutation(len(idxs))
        n_train = int(train_frac * len(idxs))
        n_dev = int(dev_frac * len(idxs))
        n_test = len(idxs) - n_train - n_dev
        if min(n_train, n_dev, n_test) < 1:
            raise ValueError(f"split leaves speaker {speaker} with an empty part")
        shuffled = [idxs[p] for p in perm]
        picks[0] += shuffled[:n_train]
        picks[1] += shuffled[n_train : n_train + n_dev]
        picks[2] += shuffled[n_train + n_dev :]
    out = []
    for part in picks:
        utts = [ds.utterances[i] for i in sorted(part)]
        out.append(Dataset(utts, list(ds.vocab), list(ds.speakers)))
    return tuple(out)


def select_subset(ds: Dataset, n_speakers: int, utts_per_speaker: int) -> Dataset:
    """First n_speakers, first utts_per_speaker each; labels re-densified."""
    groups = _by_speaker(ds)
    have = sorted(groups)
    if n_speakers > len(have):
        raise ValueError(f"requested {n_speakers} speakers, dataset has {len(have)}")
    utts: list[Utterance] = []
    names: list[str] = []
    for new_label, speaker in enumerate(have[:n_speakers]):
        idxs = groups[speaker]
        if len(idxs) < utts_per_speaker:
            raise ValueError(
                f"speaker {speaker} has {len(idxs)} utterances, need {utts_per_speaker}"
            )
        names.append(ds.speakers[speaker])
        for i in idxs[:utts_per_speaker]:
            u = ds.utterances[i]
            utts.append(Utterance(u.id, new_label, u.transcript, u.features))
    return Dataset(utts, list(ds.vocab), names)


def partition_semi(ds: Dataset) -> tuple[Dataset, Dataset | None]:
    """Separate transcribed utterances from the untranscribed (semi) pool.

    Each part gets its own dense label space and speaker table; the trainer
    re-unions them by offsetting semi labels.
    """
    main = [u for u in ds.utterances if u.transcript is not None]
    semi = [u for u in ds.utterances if u.transcript is None]
    main_speakers = sorted({u.speaker for u in main})
    main_map = {s: i for i, s in enumerate(main_speakers)}
    main_ds = Dataset(
        [Utterance(u.id, main_map[u.speaker], u.transcript, u.features) for u in main],
        list(ds.vocab),
        [ds.speakers[s] for s in main_speakers],
    )
    if not semi:
        return main_ds, None
    semi_speakers = sorted({u.speaker for u in semi})
    semi_map = {s: i for i, s in enumerate(semi_speakers)}
    semi_ds = Dataset(
        [Utterance(u.id, semi_map[u.speaker], None, u.features) for u in semi],
        list(ds.vocab),
        [ds.speakers[s] for s in semi_speakers],
    )
    return main_ds, semi_ds


# ---------------------------------------------------------------------------
# file format: one JSON header line, then one JSON utterance per line


class _F(float):
    # 17 significant digits always round-trip binary64 exactly
    def __repr__(self):
        return format(float(self), ".17g")


def _fmt_frames(features: np.ndarray) -> list[list[_F]]:
    return [[_F(v) for v in row] for row in features.tolist()]


def save_dataset(ds: Dataset, path) -> None:
    lines = [
        json.dumps(
            {"format_version": FILE_VERSION, "dim": ds.dim, "vocab": ds.vocab, "speakers": ds.speakers},
            sort_keys=True,
        )
    ]
    for u in ds.utterances:
        rec = {
            "id": u.id,
            "speaker": u.speaker,
            "transcript": list(u.transcript) if u.transcript is not None else None,
            "frames": _fmt_frames(u.features),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty dataset file")

    def fail(lineno, msg):
        raise ValueError(f"{path}: line {lineno}: {msg}")

    try:
        header = json.loads(text[0])
    except json.JSONDecodeError as e:
        fail(1, f"bad header: {e}")
    if header.get("format_version") != FILE_VERSION:
        fail(1, f"unsupported format version {header.get('format_version')}")
    dim, vocab, speakers = header["dim"], header["vocab"], header["speakers"]
    utts = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            fail(lineno, f"bad record: {e}")
        frames = rec["frames"]
        if not frames or any(len(row) != dim for row in frames):
            fail(lineno, f"frame arity differs from header dim {dim}")
        speaker = int(rec["speaker"])
        if not (0 <= speaker < len(speakers)):
            fail(lineno, f"speaker label {speaker} outside table of {len(speakers)}")
        transcript = rec["transcript"]
        if transcript is not None:
            transcript = tuple(int(t) for t in transcript)
            if len(transcript) > len(frames):
                fail(lineno, "transcript longer than frame count")
            if any(not (0 <= t < len(vocab)) for t in transcript):
                fail(lineno, "transcript token outside vocabulary")
            if any(a == b for a, b in zip(transcript, transcript[1:])):
                fail(lineno, "transcript has adjacent duplicate tokens")
        utts.append(
            Utterance(rec["id"], speaker, transcript, np.asarray(frames, dtype=np.float64))
        )
    return Dataset(utts, list(vocab), list(speakers))


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.vocab != b.vocab or a.speakers != b.speakers or len(a.utterances) != len(b.utterances):
        return False
    for ua, ub in zip(a.utterances, b.utterances):
        if ua.id != ub.id or ua.speaker != ub.speaker or ua.transcript != ub.transcript:
            return False
        if not np.array_equal(ua.features, ub.features):
            return False
    return True
