"""Representation probing and transcription evaluation.

A probe is a fresh copy of the speaker-branch architecture (gated conv,
weight norm, LogSumExp pooling, linear head) trained for a few epochs on
frozen representations dumped from a checkpoint. Its held-out accuracy
measures how much speaker identity the representation exposes. LER and
WER come from Viterbi decoding followed by Levenshtein distance at letter
and separator-delimited word granularity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gradflip import asg, model as gm, tensor as tz
from gradflip.data import Dataset
from gradflip.layers import GatedConv, Linear, PoolingConfig, pool
from gradflip.model import ModelGraph
from gradflip.rng import RngStream, stream_seed
from gradflip.tensor import ParamStore

__all__ = [
    "RepDump", "EvalResult", "dump_reps", "train_probe", "edit_distance",
    "evaluate_ler", "evaluate_wer", "figure2_report", "write_probe_csv",
    "write_eval_csv", "PROBE_CSV_HEADER", "EVAL_CSV_HEADER",
]

PROBE_CSV_HEADER = "variant,layer,accuracy,chance,n_eval,seed"
EVAL_CSV_HEADER = "split,metric,value,n_utts"


def _as_model(checkpoint) -> ModelGraph:
    if isinstance(checkpoint, ModelGraph):
        return checkpoint
    return gm.load_checkpoint(checkpoint)


@dataclass
class RepDump:
    """Frozen eval-mode representations from one checkpoint at one layer."""

    layer: int
    items: list[tuple[str, np.ndarray, int]]  # (utterance id, L x C, speaker)
    checkpoint_id: str
    n_speakers: int
    branch_channels: int
    branch_kernel: int
    dropout_rate: float
    pooling: PoolingConfig


def dump_reps(checkpoint, dataset: Dataset, layer: int) -> RepDump:
    """Extract layer activations for every utterance (layer 0 = raw input)."""
    m = _as_model(checkpoint)
    items = [
        (u.id, gm.extract_representation(m, u.features, layer), u.speaker)
        for u in dataset.utterances
    ]
    return RepDump(
        layer=layer,
        items=items,
        checkpoint_id=f"seed{m.seed}",
        n_speakers=len(dataset.speakers),
        branch_channels=m.cfg.branch_channels,
        branch_kernel=m.cfg.branch_kernel,
        dropout_rate=m.cfg.dropout_rate,
        pooling=m.cfg.pooling,
    )


class _Probe:
    """Speaker-branch architecture with its own parameters."""

    def __init__(self, in_dim: int, dump: RepDump, rng: RngStream):
        self.params = ParamStore()
        self.conv = GatedConv(
            self.params, "probe.conv", "speaker", in_dim, dump.branch_channels,
            dump.branch_kernel, dump.dropout_rate, rng.child("conv"),
        )
        self.out = Linear(
            self.params, "probe.out", "speaker", dump.branch_channels, dump.n_speakers,
            rng.child("out"),
        )
        self.pooling = dump.pooling

    def logits(self, rep: np.ndarray, mode: str, rng: RngStream | None):
        h = self.conv.forward(tz.Tensor(rep), mode, rng)
        return self.out.forward(pool(h, self.pooling))


def _stratified_split(items, rng: RngStream, eval_frac=0.2):
    by_speaker: dict[int, list[int]] = {}
    for i, (_, _, speaker) in enumerate(items):
        by_speaker.setdefault(speaker, []).append(i)
    train_idx, eval_idx = [], []
    for speaker in sorted(by_speaker):
        idxs = by_speaker[speaker]
        perm = rng.permutation(len(idxs))
        n_eval = max(1, int(eval_frac * len(idxs)))
        shuffled = [idxs[p] for p in perm]
        eval_idx += shuffled[:n_eval]
        train_idx += shuffled[n_eval:]
    return sorted(train_idx), sorted(eval_idx)


def train_probe(
    dump: RepDump,
    epochs: int = 10,
    seed: int = 0,
    lr: float = 0.1,
    batch_size: int = 8,
) -> float:
    """Train a probe on 80% of the dump, return held-out top-1 accuracy.

    The probed checkpoint is never touched; representations enter as
    constants.
    """
    speakers = {s for _, _, s in dump.items}
    if len(speakers) < 2:
        raise ValueError("probe needs representations from at least 2 speakers")
    rng = RngStream(seed, "probe")
    train_idx, eval_idx = _stratified_split(dump.items, rng.child("split"))
    if not train_idx:
        raise ValueError("probe training split is empty")
    in_dim = dump.items[0][1].shape[1]
    probe = _Probe(in_dim, dump, rng.child("init"))
    dropout_rng = rng.child("dropout")

    for epoch in range(epochs):
        order = rng.child(f"shuffle{epoch}").permutation(len(train_idx))
        for start in range(0, len(order), batch_size):
            chunk = [train_idx[i] for i in order[start : start + batch_size]]
            total = None
            for i in chunk:
                _, rep, speaker = dump.items[i]
                nll = gm.speaker_nll(probe.logits(rep, "train", dropout_rng), speaker)
                total = nll if total is None else tz.add(total, nll)
            mean = tz.smul(total, 1.0 / len(chunk))
            grads = tz.backward(mean, probe.params)
            tz.sgd_step(probe.params, grads, lr_main=lr, lr_speaker=lr)

    correct = 0
    with tz.no_grad():
        for i in eval_idx:
            _, rep, speaker = dump.items[i]
            pred = int(np.argmax(probe.logits(rep, "eval", None).data))
            correct += pred == speaker
    return correct / len(eval_idx)


def edit_distance(a, b) -> int:
    """Minimal insert + delete + substitute count (classic Levenshtein DP)."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass
class EvalResult:
    value: float
    n_scored: int
    n_skipped: int


def _decode(m: ModelGraph, features: np.ndarray) -> tuple[int, ...]:
    with tz.no_grad():
        em = gm.forward_acoustic(m, features, "eval")
    return asg.collapse(asg.viterbi_decode(em.data, m.transitions.data))


def evaluate_ler(checkpoint, dataset: Dataset) -> EvalResult:
    """Letter error rate: edit distance of collapsed Viterbi paths against
    transcripts, normalized by total reference length. Untranscribed
    utterances are skipped and counted."""
    m = _as_model(checkpoint)
    errors = total = skipped = scored = 0
    for u in dataset.utterances:
        if u.transcript is None:
            skipped += 1
            continue
        hyp = _decode(m, u.features)
        errors += edit_distance(hyp, u.transcript)
        total += len(u.transcript)
        scored += 1
    if total == 0:
        raise ValueError("dataset has no transcribed utterances to score")
    return EvalResult(errors / total, scored, skipped)


def _words(tokens, separator: int) -> list[tuple[int, ...]]:
    words, cur = [], []
    for t in tokens:
        if t == separator:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(t)
    if cur:
        words.append(tuple(cur))
    return words


def evaluate_wer(checkpoint, dataset: Dataset) -> EvalResult:
    """Word error rate from Viterbi output split at the separator token.

    No language model is involved; this is the LM-free variant.
    """
    m = _as_model(checkpoint)
    sep = dataset.separator
    errors = total = skipped = scored = 0
    for u in dataset.utterances:
        if u.transcript is None:
            skipped += 1
            continue
        hyp_words = _words(_decode(m, u.features), sep)
        ref_words = _words(u.transcript, sep)
        errors += edit_distance(hyp_words, ref_words)
        total += len(ref_words)
        scored += 1
    if total == 0:
        raise ValueError("dataset has no transcribed utterances to score")
    return EvalResult(errors / total, scored, skipped)


@dataclass
class ProbeCell:
    variant: str
    layer_label: str
    accuracy: float | None  # None: checkpoint or layer absent
    chance: float
    n_eval: int
    seed: int


def figure2_report(
    checkpoints: dict[str, object | None],
    layers: dict[str, int | None],
    dataset: Dataset,
    probe_epochs: int = 10,
    seed: int = 0,
) -> list[ProbeCell]:
    """Probe accuracy grid: one row per (variant, layer) plus a chance row.

    Missing checkpoints and None layers are recorded as absent cells, not
    failures.
    """
    chance = 1.0 / len(dataset.speakers)
    cells: list[ProbeCell] = []
    for variant, ckpt in checkpoints.items():
        for label, layer in layers.items():
            cell_seed = stream_seed(seed, f"probe/{variant}/{label}")
            if ckpt is None or layer is None:
                cells.append(ProbeCell(variant, label, None, chance, 0, cell_seed))
                continue
            dump = dump_reps(ckpt, dataset, layer)
            n_eval = len(_stratified_split(dump.items, RngStream(cell_seed, "probe/split"))[1])
            acc = train_probe(dump, epochs=probe_epochs, seed=cell_seed)
            cells.append(ProbeCell(variant, label, acc, chance, n_eval, cell_seed))
    cells.append(ProbeCell("chance", "-", chance, chance, 0, seed))
    return cells


def write_probe_csv(cells: list[ProbeCell], path) -> None:
    lines = [PROBE_CSV_HEADER]
    for c in cells:
        acc = "" if c.accuracy is None else repr(float(c.accuracy))
        lines.append(f"{c.variant},{c.layer_label},{acc},{c.chance!r},{c.n_eval},{c.seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_eval_csv(rows: list[tuple[str, str, float, int]], path) -> None:
    lines = [EVAL_CSV_HEADER]
    for split_name, metric, value, n in rows:
        lines.append(f"{split_name},{metric},{value!r},{n}")
    Path(path).write_text("\n".join(lines) + "\n")
