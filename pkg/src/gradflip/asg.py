"""AutoSeg sequence criterion.

Blank-free sequence loss over a T x K emission matrix and a trainable
K x K transition score matrix:

    loss = logadd over all K^T frame paths
         - logadd over the monotone alignments of the target

Both log-add dynamic programs are built from tape primitives, so the loss
differentiates with respect to emissions and transitions for free. Targets
must be free of adjacent duplicates (this project never uses repetition
tokens); Viterbi decoding runs outside the tape in plain numpy.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from gradflip import tensor as tz
from gradflip.tensor import Tensor

__all__ = [
    "validate_target", "asg_loss", "full_logadd", "constrained_logadd",
    "viterbi_decode", "path_score", "collapse",
]


def validate_target(target: Sequence[int], vocab_size: int, n_frames: int) -> tuple[int, ...]:
    """Check target invariants: in-range tokens, no adjacent duplicates, N <= T."""
    y = tuple(int(t) for t in target)
    if len(y) < 1:
        raise ValueError("target must contain at least one token")
    if len(y) > n_frames:
        raise ValueError(f"target length {len(y)} exceeds frame count {n_frames}")
    for tok in y:
        if not (0 <= tok < vocab_size):
            raise ValueError(f"target token {tok} outside vocabulary of size {vocab_size}")
    for a, b in zip(y, y[1:]):
        if a == b:
            raise ValueError(f"target has adjacent duplicate token {a}")
    return y


def _pick(mat: Tensor, row: int, col: int) -> Tensor:
    return tz.slice_axis(tz.slice_axis(mat, 0, row, row + 1), 1, col, col + 1)


def full_logadd(emissions: Tensor, transitions: Tensor) -> Tensor:
    """log-add score of all K^T paths: beta_t(i) = f_t(i) + logadd_j(beta_{t-1}(j) + g(j,i))."""
    t_len, k = emissions.shape
    if transitions.shape != (k, k):
        raise tz.ShapeMismatch(f"transitions {transitions.shape} do not match K={k}")
    beta = tz.slice_axis(emissions, 0, 0, 1)  # (1, K)
    for t in range(1, t_len):
        prev = tz.reshape(beta, (k, 1))
        hop = tz.logsumexp(tz.add(prev, transitions), axis=0, keepdims=True)
        beta = tz.add(tz.slice_axis(emissions, 0, t, t + 1), hop)
    return tz.logsumexp(beta, axis=1, keepdims=True)  # (1, 1)


def constrained_logadd(emissions: Tensor, transitions: Tensor, target: Sequence[int]) -> Tensor:
    """log-add score of every monotone alignment of the target.

    alpha_t(n) = f_t(y_n) + logadd(alpha_{t-1}(n)   + g(y_n, y_n),
                                   alpha_{t-1}(n-1) + g(y_{n-1}, y_n))

    The alpha band is kept rectangular-free: only the reachable token range
    [max(1, N-(T-t)), min(t, N)] is materialized per frame.
    """
    t_len, k = emissions.shape
    y = validate_target(target, k, t_len)
    n_tok = len(y)

    # per-token emission columns and the two transition vectors, as rows
    em_y = tz.concat([tz.slice_axis(emissions, 1, tok, tok + 1) for tok in y], axis=1)  # (T, N)
    stay = tz.concat([_pick(transitions, tok, tok) for tok in y], axis=1)  # (1, N)
    if n_tok > 1:
        move = tz.concat([_pick(transitions, a, b) for a, b in zip(y, y[1:])], axis=1)  # (1, N-1)
    else:
        move = None

    def band(t):  # 1-based inclusive token range reachable at frame t
        return max(1, n_tok - (t_len - t)), min(t, n_tok)

    lo, hi = band(1)
    alpha = tz.slice_axis(tz.slice_axis(em_y, 0, 0, 1), 1, 0, 1)  # (1, 1) = f_1(y_1)
    for t in range(2, t_len + 1):
        plo, phi = lo, hi
        lo, hi = band(t)
        stay_hi = min(hi, phi)  # stay needs alpha_{t-1}(n)
        move_lo = max(lo, plo + 1, 2)  # move needs alpha_{t-1}(n-1), n >= 2
        parts = []
        if lo <= stay_hi:
            stay_term = tz.add(
                tz.slice_axis(alpha, 1, lo - plo, stay_hi - plo + 1),
                tz.slice_axis(stay, 1, lo - 1, stay_hi),
            )
        if move_lo <= hi:
            move_term = tz.add(
                tz.slice_axis(alpha, 1, move_lo - 1 - plo, hi - plo),
                tz.slice_axis(move, 1, move_lo - 2, hi - 1),
            )
        if lo < move_lo:  # stay-only prefix
            parts.append(tz.slice_axis(stay_term, 1, 0, move_lo - lo))
        if move_lo <= stay_hi:  # overlap: logadd both arrivals
            both = tz.concat(
                [
                    tz.slice_axis(stay_term, 1, move_lo - lo, stay_hi - lo + 1),
                    tz.slice_axis(move_term, 1, 0, stay_hi - move_lo + 1),
                ],
                axis=0,
            )
            parts.append(tz.logsumexp(both, axis=0, keepdims=True))
        if stay_hi < hi:  # move-only suffix
            parts.append(tz.slice_axis(move_term, 1, stay_hi + 1 - move_lo, hi - move_lo + 1))
        combined = parts[0] if len(parts) == 1 else tz.concat(parts, axis=1)
        alpha = tz.add(combined, tz.slice_axis(tz.slice_axis(em_y, 0, t - 1, t), 1, lo - 1, hi))
    return alpha  # (1, 1): band at t=T is exactly [N, N]


def asg_loss(emissions: Tensor, transitions: Tensor, target: Sequence[int]) -> Tensor:
    """ASG loss = full_logadd - constrained_logadd; non-negative scalar."""
    return tz.sub(full_logadd(emissions, transitions), constrained_logadd(emissions, transitions, target))


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def viterbi_decode(emissions, transitions) -> np.ndarray:
    """Best-scoring token path under the full graph (max replaces logadd).

    Ties resolve to the lowest token index at every step, so decoding is
    deterministic.
    """
    em = _as_array(emissions)
    tr = _as_array(transitions)
    t_len, k = em.shape
    if t_len < 1:
        raise ValueError("viterbi_decode: need at least one frame")
    delta = em[0].copy()
    back = np.zeros((t_len, k), dtype=np.int64)
    for t in range(1, t_len):
        cand = delta[:, None] + tr  # cand[j, i]: arrive at i from j
        best_j = np.argmax(cand, axis=0)  # first max = lowest source index
        back[t] = best_j
        delta = em[t] + cand[best_j, np.arange(k)]
    path = np.zeros(t_len, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def path_score(emissions, transitions, path: Sequence[int]) -> float:
    """Score of one frame path: emissions along it plus transition hops."""
    em = _as_array(emissions)
    tr = _as_array(transitions)
    toks = [int(p) for p in path]
    total = em[0, toks[0]]
    for t in range(1, len(toks)):
        total += em[t, toks[t]] + tr[toks[t - 1], toks[t]]
    return float(total)


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge adjacent repeats of a frame path into a token sequence."""
    out: list[int] = []
    for tok in path:
        tok = int(tok)
        if not out or out[-1] != tok:
            out.append(tok)
    return tuple(out)
