"""Differentiable window scoring through the keyword-chain max recurrence, and the hinge loss.

A window is assumed to hold exactly one keyword: the best path must enter the
first keyword state at the window's first frame and sit in the last keyword
state at its last frame. The window score is that path's log probability
divided by the window length. Its subgradient w.r.t. the frame scores is
``1/T`` on every (frame, state) cell of the best path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hmm import HmmParams, NEG_INF


class InfeasibleWindowError(ValueError):
    """The window is shorter than the keyword chain, so no legal path exists."""


@dataclass
class WindowScore:
    d: float
    argmax_path: np.ndarray
    T: int


def score_windows(windows, hmm: HmmParams, init: str = "first_state"):
    """Score many windows at once.

    ``windows`` is a sequence of ``T_j x C`` score matrices (T_j may differ).
    Returns ``(d, paths)``: ``d[j]`` is ``-inf`` for windows with no legal
    path, and ``paths[j]`` is the best state sequence (absolute indices) or
    ``None``.
    """
    n = len(windows)
    K = hmm.chain_len
    lengths = np.array([len(w) for w in windows], dtype=np.int64)
    if n == 0:
        return np.zeros(0), []
    t_max = int(lengths.max())
    S = np.full((n, t_max, K), 0.0)
    for j, w in enumerate(windows):
        S[j, : lengths[j]] = np.asarray(w, dtype=np.float64)[:, hmm.chain]
    if not np.all(np.isfinite(S)):
        raise ValueError("window scores must be finite")

    self_lp, fwd_lp = hmm.chain_self, hmm.chain_forward
    if init == "first_state":
        v = np.full((n, K), NEG_INF)
        v[:, 0] = S[:, 0, 0]
    elif init == "priors":
        v = hmm.log_priors[hmm.chain] + S[:, 0]
    else:
        raise ValueError(f"unknown init {init!r}")

    advance = np.zeros((n, t_max, K), dtype=bool)
    v_last = np.full((n, t_max), NEG_INF)
    v_last[:, 0] = v[:, -1]
    for t in range(1, t_max):
        stay = v + self_lp
        move = np.full_like(stay, NEG_INF)
        move[:, 1:] = v[:, :-1] + fwd_lp
        take = move > stay
        advance[:, t] = take
        v = np.where(take, move, stay) + S[:, t]
        v_last[:, t] = v[:, -1]

    rows = np.arange(n)
    final = v_last[rows, lengths - 1]
    d = final / lengths

    # vectorised backtrack; windows join once t reaches their last frame
    state = np.full(n, K - 1)
    path = np.zeros((n, t_max), dtype=np.int64)
    for t in range(t_max - 1, -1, -1):
        active = t <= lengths - 1
        path[active, t] = state[active]
        if t > 0:
            step = advance[rows, t, state] & active
            state = state - step
    paths = [
        hmm.first_kw + path[j, : lengths[j]] if np.isfinite(final[j]) else None
        for j in range(n)
    ]
    return d, paths


def score_window(scores, hmm: HmmParams, init: str = "first_state") -> WindowScore:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != hmm.num_states:
        raise ValueError(f"expected a T x {hmm.num_states} score matrix")
    T = scores.shape[0]
    if T < hmm.chain_len and init == "first_state":
        raise InfeasibleWindowError(
            f"window of {T} frames is shorter than the {hmm.chain_len}-state keyword chain"
        )
    d, paths = score_windows([scores], hmm, init)
    if paths[0] is None:
        raise InfeasibleWindowError("no legal path through the keyword chain")
    return WindowScore(float(d[0]), paths[0], T)


def path_gradient(path, T: int, num_states: int) -> np.ndarray:
    """dd/dscores for a fixed best path: ``1/T`` on each path cell."""
    grad = np.zeros((T, num_states))
    grad[np.arange(T), path] = 1.0 / T
    return grad


def score_window_grad(scores, hmm: HmmParams, init: str = "first_state"):
    ws = score_window(scores, hmm, init)
    return ws, path_gradient(ws.argmax_path, ws.T, hmm.num_states)


def hinge_loss(d: float, is_positive: bool):
    """Margin-1 hinge on the detection score. Returns ``(loss, dloss/dd)``."""
    if is_positive:
        return (1.0 - d, -1.0) if d < 1.0 else (0.0, 0.0)
    return (1.0 + d, 1.0) if d > -1.0 else (0.0, 0.0)
