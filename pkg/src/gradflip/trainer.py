"""Training loops for baseline, multi-task, adversarial and semi-supervised
use of speaker labels.

All non-baseline modes share one loss wiring: the transcription loss plus
the unscaled speaker NLL whose gradient crosses the fork through a
gradient-scaling junction. The junction factor is +lambda for multi-task
and -lambda for adversarial/semi-supervised training, so the two regimes
differ in exactly one sign. Training runs in three phases:

  A: junction factor pinned to 0 (no speaker gradient reaches the encoder,
     the branch still trains on detached representations),
  B: only the `speaker` parameter group is updated,
  C: joint training with the scheduled lambda.

Baseline mode ignores the speaker term and the phase structure entirely; it
runs the acoustic objective for the same total number of epochs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gradflip import analysis, asg, model as gm, tensor as tz
from gradflip.data import Dataset, Utterance
from gradflip.model import ModelGraph
from gradflip.rng import RngStream

__all__ = [
    "LambdaSchedule", "TrainConfig", "MetricsRow", "DivergenceError",
    "lambda_at", "default_lambda", "compute_gradients", "step",
    "make_semi_batches", "train", "TrainResult", "METRICS_HEADER",
]

MODES = ("baseline", "mt", "al", "semi")
METRICS_HEADER = "epoch,phase,train_acoustic_loss,train_speaker_loss,dev_ler,dev_speaker_acc,lambda,wall_clock_sec"
DIVERGENCE_CEILING = 1e6


class DivergenceError(RuntimeError):
    """Acoustic loss left the finite range; training aborted."""


@dataclass(frozen=True)
class LambdaSchedule:
    kind: str = "static"  # static | ramp
    value: float = 0.5
    lambda_max: float = 0.2
    gamma: float = 10.0

    def __post_init__(self):
        if self.kind not in ("static", "ramp"):
            raise ValueError(f"schedule kind must be static or ramp, got {self.kind!r}")


def lambda_at(sched: LambdaSchedule, epoch: int, total_epochs: int) -> float:
    """Lambda for a (0-based-ok) epoch position within the joint phase.

    ramp: lambda_max * (2 / (1 + e^{-p}) - 1) with p = gamma * epoch/total,
    which rises from 0 to just under lambda_max.
    """
    if sched.kind == "static":
        return sched.value
    if total_epochs <= 0:
        return 0.0
    p = sched.gamma * (epoch / total_epochs)
    return sched.lambda_max * (2.0 / (1.0 + math.exp(-p)) - 1.0)


def default_lambda(mode: str) -> LambdaSchedule:
    if mode == "mt":
        return LambdaSchedule("static", value=0.5)
    if mode in ("al", "semi"):
        return LambdaSchedule("ramp", lambda_max=0.2, gamma=10.0)
    return LambdaSchedule("static", value=0.0)


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    fork: str = "mid"
    lr_main: float = 1.4
    lr_speaker: float = 0.1
    batch_size: int = 8
    epochs_a: int = 5
    epochs_b: int = 2
    epochs_c: int = 15
    lam: LambdaSchedule | None = None  # None: resolved from mode
    semi_ratio: int = 0  # transcribed batches per speaker-only batch; 0 = auto
    seed: int = 1234

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fork not in ("in", "mid", "out"):
            raise ValueError(f"fork must be in/mid/out, got {self.fork!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if min(self.epochs_a, self.epochs_b, self.epochs_c) < 0:
            raise ValueError("phase epoch counts must be >= 0")

    def schedule(self) -> LambdaSchedule:
        return self.lam if self.lam is not None else default_lambda(self.mode)


@dataclass
class MetricsRow:
    epoch: int
    phase: str
    train_acoustic_loss: float
    train_speaker_loss: float
    dev_ler: float
    dev_speaker_acc: float
    lam: float
    wall_clock_sec: float

    def csv(self) -> str:
        return ",".join(
            [
                str(self.epoch),
                self.phase,
                repr(self.train_acoustic_loss),
                repr(self.train_speaker_loss),
                repr(self.dev_ler),
                repr(self.dev_speaker_acc),
                repr(self.lam),
                repr(self.wall_clock_sec),
            ]
        )


def _junction_factor(mode: str, lam: float) -> float:
    if mode == "mt":
        return +lam
    if mode in ("al", "semi"):
        return -lam
    return 0.0


def compute_gradients(
    m: ModelGraph,
    batch: list[Utterance],
    mode: str,
    lam: float,
    rng: RngStream | None = None,
    train_mode: bool = True,
):
    """Mean-over-batch losses and their gradients, acoustic and speaker
    parts kept separate.

    Returns (acoustic_loss, speaker_loss, grads_acoustic, grads_speaker);
    the loss is nan and the gradient map all-zero for a part that was not
    computed (speaker part in baseline, acoustic part on speaker-only
    batches).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not batch:
        raise ValueError("empty batch")
    speaker_only = all(u.transcript is None for u in batch)
    if not speaker_only and any(u.transcript is None for u in batch):
        raise ValueError("batch mixes transcribed and untranscribed utterances")
    if speaker_only and mode != "semi":
        raise ValueError(f"speaker-only batch is only valid in semi mode, not {mode!r}")

    fwd_mode = "train" if train_mode else "eval"
    factor = _junction_factor(mode, lam)
    scale = 1.0 / len(batch)
    zeros = {name: np.zeros_like(t.data) for name, t, _ in m.params.items()}

    ac_total = None
    sp_total = None
    for i, u in enumerate(batch):
        # one derived stream per utterance position: a layer's dropout mask
        # depends only on (stream, position, layer), never on the mode
        u_rng = rng.child(f"u{i}") if rng is not None else None
        if speaker_only:
            logits = gm.forward_speaker(m, u.features, factor, fwd_mode, u_rng)
            sp = gm.speaker_nll(logits, u.speaker)
            sp_total = sp if sp_total is None else tz.add(sp_total, sp)
            continue
        if mode == "baseline":
            em = gm.forward_acoustic(m, u.features, fwd_mode, u_rng)
            ac = asg.asg_loss(em, m.transitions, u.transcript)
            ac_total = ac if ac_total is None else tz.add(ac_total, ac)
            continue
        em, logits = gm.forward_joint(m, u.features, factor, fwd_mode, u_rng)
        ac = asg.asg_loss(em, m.transitions, u.transcript)
        sp = gm.speaker_nll(logits, u.speaker)
        ac_total = ac if ac_total is None else tz.add(ac_total, ac)
        sp_total = sp if sp_total is None else tz.add(sp_total, sp)

    if ac_total is not None:
        ac_mean = tz.smul(ac_total, scale)
        ac_loss = ac_mean.item()
        grads_ac = tz.backward(ac_mean, m.params)
    else:
        ac_loss, grads_ac = float("nan"), zeros
    if sp_total is not None:
        sp_mean = tz.smul(sp_total, scale)
        sp_loss = sp_mean.item()
        grads_sp = tz.backward(sp_mean, m.params)
    else:
        sp_loss, grads_sp = float("nan"), dict(zeros)
    return ac_loss, sp_loss, grads_ac, grads_sp


def step(
    m: ModelGraph,
    batch: list[Utterance],
    mode: str,
    lam: float,
    lr_main: float = 1.4,
    lr_speaker: float = 0.1,
    rng: RngStream | None = None,
    update_groups: tuple[str, ...] = ("main", "speaker"),
):
    """One SGD step on a batch; returns (acoustic_loss, speaker_loss)."""
    ac_loss, sp_loss, grads_ac, grads_sp = compute_gradients(m, batch, mode, lam, rng)
    combined = {name: grads_ac[name] + grads_sp[name] for name in grads_ac}
    tz.sgd_step(m.params, combined, lr_main, lr_speaker, groups=update_groups)
    return ac_loss, sp_loss


def make_semi_batches(
    train_utts: list[Utterance],
    semi_utts: list[Utterance],
    ratio: int,
    batch_size: int,
    rng: RngStream,
):
    """Deterministic interleave: after every `ratio` transcribed batches,
    one speaker-only batch (semi batches cycle if the pool is small)."""
    if not semi_utts:
        raise ValueError("semi mode requires a non-empty semi set")
    if ratio < 1:
        raise ValueError(f"semi interleave ratio must be >= 1, got {ratio}")
    t_order = [train_utts[i] for i in rng.permutation(len(train_utts))]
    s_order = [semi_utts[i] for i in rng.permutation(len(semi_utts))]
    t_batches = [t_order[i : i + batch_size] for i in range(0, len(t_order), batch_size)]
    s_batches = [s_order[i : i + batch_size] for i in range(0, len(s_order), batch_size)]
    out = []
    si = 0
    for bi, b in enumerate(t_batches, start=1):
        out.append(("transcribed", b))
        if bi % ratio == 0:
            out.append(("speaker_only", s_batches[si % len(s_batches)]))
            si += 1
    return out


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    final_path: Path | None
    best_path: Path | None
    metrics_path: Path | None
    best_dev_ler: float


def _phase_plan(cfg: TrainConfig) -> list[str]:
    plan = ["A"] * cfg.epochs_a + ["B"] * cfg.epochs_b + ["C"] * cfg.epochs_c
    return plan


def _dev_metrics(m: ModelGraph, dev: Dataset) -> tuple[float, float]:
    ler = analysis.evaluate_ler(m, dev).value
    correct = 0
    with tz.no_grad():
        for u in dev.utterances:
            logits = gm.forward_speaker(m, u.features, 0.0, "eval")
            if int(np.argmax(logits.data)) == u.speaker:
                correct += 1
    return ler, correct / len(dev.utterances)


def train(
    m: ModelGraph,
    train_ds: Dataset,
    dev_ds: Dataset,
    cfg: TrainConfig,
    out_dir=None,
    semi_ds: Dataset | None = None,
) -> TrainResult:
    """Three-phase training; writes metrics.csv, final.ckpt and best.ckpt
    (best dev LER) when out_dir is given."""
    if cfg.mode == "semi":
        if semi_ds is None or not semi_ds.utterances:
            raise ValueError("semi mode requires a semi dataset")
        offset = len(train_ds.speakers)
        semi_utts = [
            Utterance(u.id, offset + u.speaker, None, u.features) for u in semi_ds.utterances
        ]
        need = offset + len(semi_ds.speakers)
        if m.cfg.n_speakers != need:
            raise ValueError(
                f"semi mode needs a model with {need} speaker outputs, got {m.cfg.n_speakers}"
            )
    else:
        semi_utts = []

    sched = cfg.schedule()
    plan = _phase_plan(cfg)
    shuffle_rng = RngStream(cfg.seed, "train/shuffle")
    dropout_rng = RngStream(cfg.seed, "train/dropout")
    rows: list[MetricsRow] = []
    best_ler = float("inf")
    best_snap = None
    c_seen = 0

    for epoch, phase in enumerate(plan, start=1):
        t0 = time.perf_counter()
        if cfg.mode == "baseline":
            phase_rule = "A"  # baseline ignores the phase structure
        else:
            phase_rule = phase
        if phase_rule == "C":
            c_seen += 1
            lam = lambda_at(sched, c_seen, cfg.epochs_c)
        else:
            lam = 0.0
        update_groups = ("speaker",) if phase_rule == "B" else ("main", "speaker")

        if cfg.mode == "semi":
            ratio = cfg.semi_ratio or max(1, round(len(train_ds.utterances) / len(semi_utts)))
            batches = make_semi_batches(
                train_ds.utterances, semi_utts, ratio, cfg.batch_size, shuffle_rng.child(f"epoch{epoch}")
            )
        else:
            order = shuffle_rng.child(f"epoch{epoch}").permutation(len(train_ds.utterances))
            utts = [train_ds.utterances[i] for i in order]
            batches = [
                ("transcribed", utts[i : i + cfg.batch_size])
                for i in range(0, len(utts), cfg.batch_size)
            ]

        ac_losses, sp_losses = [], []
        for bi, (kind, batch) in enumerate(batches):
            try:
                ac, sp = step(
                    m, batch, cfg.mode, lam, cfg.lr_main, cfg.lr_speaker,
                    dropout_rng.child(f"e{epoch}.b{bi}"), update_groups,
                )
            except tz.NumericOverflow as e:
                raise DivergenceError(
                    f"numeric overflow at epoch {epoch} (phase {phase}): {e}"
                ) from e
            if kind == "transcribed":
                if not math.isnan(ac):
                    ac_losses.append(ac)
                if not math.isnan(sp):
                    sp_losses.append(sp)
            elif not math.isnan(sp):
                sp_losses.append(sp)

        ac_mean = float(np.mean(ac_losses)) if ac_losses else float("nan")
        sp_mean = float(np.mean(sp_losses)) if sp_losses else float("nan")
        # transcribed batches run in every mode, so ac_mean is always real
        if not math.isfinite(ac_mean) or ac_mean > DIVERGENCE_CEILING:
            raise DivergenceError(
                f"acoustic loss {ac_mean} out of range at epoch {epoch} (phase {phase})"
            )

        dev_ler, dev_acc = _dev_metrics(m, dev_ds)
        rows.append(
            MetricsRow(
                epoch, phase, ac_mean, sp_mean, dev_ler, dev_acc, lam, time.perf_counter() - t0
            )
        )
        if dev_ler < best_ler:
            best_ler = dev_ler
            best_snap = m.params.snapshot()

    final_path = best_path = metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        final_path = out_dir / "final.ckpt"
        gm.save_checkpoint(m, final_path)
        if best_snap is not None:
            current = m.params.snapshot()
            m.params.restore(best_snap)
            best_path = out_dir / "best.ckpt"
            gm.save_checkpoint(m, best_path)
            m.params.restore(current)
        metrics_path = out_dir / "metrics.csv"
        metrics_path.write_text(
            "\n".join([METRICS_HEADER] + [r.csv() for r in rows]) + "\n"
        )
    return TrainResult(rows, final_path, best_path, metrics_path, best_ler)
