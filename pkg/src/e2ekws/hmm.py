"""Keyword HMM: parameter estimation, hybrid likelihood scaling and streaming Viterbi.

States ``first_kw .. last_kw`` form a left-to-right keyword chain where each
state may only stay (self-loop) or advance by one. All scores are natural logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

NEG_INF = -np.inf
HMM_FORMAT_VERSION = 1


class HmmError(ValueError):
    pass


@dataclass
class HmmParams:
    num_states: int
    log_priors: np.ndarray
    log_self: np.ndarray
    log_forward: np.ndarray
    log_class_freq: np.ndarray
    first_kw: int = 0
    last_kw: int = 17
    # background -> first keyword state; -inf disables streaming re-entry
    log_entry: float = NEG_INF
    background: int | None = None
    silence: int | None = None

    def __post_init__(self):
        for name in ("log_priors", "log_self", "log_forward", "log_class_freq"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        C = self.num_states
        if self.log_priors.shape != (C,) or self.log_self.shape != (C,):
            raise HmmError("log_priors and log_self must have num_states entries")
        if self.log_forward.shape != (C - 1,):
            raise HmmError("log_forward must have num_states - 1 entries")
        if self.log_class_freq.shape != (C,):
            raise HmmError("log_class_freq must have num_states entries")
        if not 0 <= self.first_kw <= self.last_kw < C:
            raise HmmError("invalid keyword chain range")

    @property
    def chain(self) -> slice:
        return slice(self.first_kw, self.last_kw + 1)

    @property
    def chain_len(self) -> int:
        return self.last_kw - self.first_kw + 1

    @property
    def chain_self(self) -> np.ndarray:
        return self.log_self[self.chain]

    @property
    def chain_forward(self) -> np.ndarray:
        """log b_{i, i+1} for consecutive chain states (length chain_len - 1)."""
        return self.log_forward[self.first_kw : self.last_kw]


@dataclass
class Detection:
    score: float
    start_frame: int
    end_frame: int


def _label_arrays(corpus):
    for item in corpus:
        labels = getattr(item, "state_labels", item)
        yield np.asarray(labels, dtype=np.int64)


def estimate_hmm(
    labeled_corpus,
    num_states: int = 20,
    first_kw: int = 0,
    last_kw: int = 17,
    silence: int | None = 18,
    background: int | None = 19,
    smoothing: float = 1.0,
) -> HmmParams:
    """Maximum-likelihood HMM statistics with additive smoothing.

    Each state has two permitted successors (itself and the next state; the
    background state's second successor is the first keyword state), so with
    the default add-one smoothing the estimates are ``(n + 1) / (n_out + 2)``.
    Transitions to other states still count in ``n_out``. ``smoothing=0``
    gives plain relative frequencies.
    """
    C = num_states
    n_self = np.zeros(C)
    n_fwd = np.zeros(C)
    n_out = np.zeros(C)
    n_first = np.zeros(C)
    n_state = np.zeros(C)
    n_entry = 0
    n_utts = 0
    for labels in _label_arrays(labeled_corpus):
        if labels.size == 0:
            continue
        if labels.min() < 0 or labels.max() >= C:
            raise HmmError(f"state label out of range [0, {C})")
        n_utts += 1
        n_first[labels[0]] += 1
        n_state += np.bincount(labels, minlength=C)
        src, dst = labels[:-1], labels[1:]
        n_out += np.bincount(src, minlength=C)
        n_self += np.bincount(src[src == dst], minlength=C)
        n_fwd += np.bincount(src[dst == src + 1], minlength=C)
        if background is not None:
            n_entry += int(np.sum((src == background) & (dst == first_kw)))
    if n_utts == 0:
        raise HmmError("empty corpus")

    a = smoothing
    with np.errstate(divide="ignore", invalid="ignore"):
        log_self = np.log((n_self + a) / (n_out + 2 * a))
        log_forward = np.log((n_fwd[:-1] + a) / (n_out[:-1] + 2 * a))
        log_priors = np.log((n_first + a) / (n_utts + C * a))
        log_class_freq = np.log((n_state + a) / (n_state.sum() + C * a))
        log_entry = NEG_INF
        if background is not None and n_entry + a > 0:
            log_entry = float(np.log((n_entry + a) / (n_out[background] + 2 * a)))
    return HmmParams(
        num_states=C,
        log_priors=log_priors,
        log_self=np.nan_to_num(log_self, nan=NEG_INF),
        log_forward=np.nan_to_num(log_forward, nan=NEG_INF),
        log_class_freq=log_class_freq,
        first_kw=first_kw,
        last_kw=last_kw,
        log_entry=log_entry,
        background=background,
        silence=silence,
    )


def scaled_loglik(dnn_out, hmm: HmmParams) -> np.ndarray:
    """Convert log posteriors to scaled log likelihoods: log p(s|x) - log p(s)."""
    log_post = getattr(dnn_out, "log_posteriors", dnn_out)
    log_post = np.asarray(log_post, dtype=np.float64)
    if log_post.ndim != 2 or log_post.shape[1] != hmm.num_states:
        raise HmmError(f"expected T x {hmm.num_states} posteriors, got {log_post.shape}")
    return log_post - hmm.log_class_freq


class StreamingDecoder:
    """Frame-synchronous Viterbi over the keyword chain.

    ``init="priors"`` starts the chain from the state priors at frame 0;
    ``init="entry"`` assumes the stream begins in background, so the chain can
    only be entered through the entry arc, at frame 0 as at any other frame.

    Each state carries the start frame of its best partial path, which is what
    backtracking from the last keyword state would recover.
    """

    def __init__(self, hmm: HmmParams, init: str = "priors"):
        if init not in ("priors", "entry"):
            raise HmmError(f"unknown init {init!r}")
        self.hmm = hmm
        self.init = init
        self._self = hmm.chain_self
        self._fwd = hmm.chain_forward
        self.reset()

    def reset(self):
        self.t = 0
        self.v = None
        self.start = None

    def step(self, frame_scores) -> Detection | None:
        s = np.asarray(frame_scores, dtype=np.float64)[self.hmm.chain]
        if not np.all(np.isfinite(s)):
            raise HmmError(f"non-finite score at frame {self.t}")
        if self.v is None:
            if self.init == "priors":
                self.v = self.hmm.log_priors[self.hmm.chain] + s
            else:
                self.v = np.full(len(s), NEG_INF)
                self.v[0] = self.hmm.log_entry + s[0]
            self.start = np.zeros(len(s), dtype=np.int64)
        else:
            stay = self.v + self._self
            move = np.empty_like(stay)
            move[0] = self.hmm.log_entry
            move[1:] = self.v[:-1] + self._fwd
            take = move > stay
            start = np.where(take, np.r_[self.t, self.start[:-1]], self.start)
            self.v = np.where(take, move, stay) + s
            self.start = start
        t = self.t
        self.t += 1
        best = self.v[-1]
        if not np.isfinite(best):
            return None
        t_s = int(self.start[-1])
        return Detection(float(best) / (t - t_s + 1), t_s, t)


def viterbi_stream(scores, hmm: HmmParams, init: str = "priors") -> list[Detection]:
    """Run the streaming decoder over a ``T x C`` score matrix.

    One detection is emitted for every frame at which the last keyword state
    is reachable.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise HmmError("scores must be a non-empty T x C matrix")
    decoder = StreamingDecoder(hmm, init)
    out = []
    for row in scores:
        det = decoder.step(row)
        if det is not None:
            out.append(det)
    return out


def best_path(scores, hmm: HmmParams, end: int | None = None, init: str = "priors"):
    """Best path into the last keyword state at frame ``end`` by full backtracking.

    Returns ``(log_prob, start_frame, states)`` where ``states`` lists absolute
    state indices for frames ``start_frame .. end``. ``log_prob`` is ``-inf``
    (and ``states`` empty) when no legal path exists.
    """
    scores = np.asarray(scores, dtype=np.float64)
    end = scores.shape[0] - 1 if end is None else end
    s = scores[: end + 1, hmm.chain]
    T, K = s.shape
    self_lp, fwd_lp = hmm.chain_self, hmm.chain_forward
    # backpointer codes: 0 stay, 1 advance, 2 enter from background
    bp = np.zeros((T, K), dtype=np.int8)
    if init == "priors":
        v = hmm.log_priors[hmm.chain] + s[0]
    else:
        v = np.full(K, NEG_INF)
        v[0] = hmm.log_entry + s[0]
    for t in range(1, T):
        stay = v + self_lp
        move = np.empty(K)
        move[0] = hmm.log_entry
        move[1:] = v[:-1] + fwd_lp
        take = move > stay
        bp[t] = take
        bp[t, 0] = 2 if take[0] else 0
        v = np.where(take, move, stay) + s[t]
    if not np.isfinite(v[-1]):
        return NEG_INF, end, []
    k = K - 1
    path = [k]
    t = T - 1
    while t > 0 and bp[t, k] != 2:
        k -= int(bp[t, k])
        path.append(k)
        t -= 1
    path.reverse()
    return float(v[-1]), t, [hmm.first_kw + i for i in path]


def _enc(a):
    return [None if not np.isfinite(x) else float(x) for x in np.atleast_1d(a)]


def _dec(a):
    return np.array([NEG_INF if x is None else float(x) for x in a])


def hmm_to_dict(hmm: HmmParams) -> dict:
    return {
        "format_version": HMM_FORMAT_VERSION,
        "num_states": hmm.num_states,
        "first_kw": hmm.first_kw,
        "last_kw": hmm.last_kw,
        "silence": hmm.silence,
        "background": hmm.background,
        "log_priors": _enc(hmm.log_priors),
        "log_self": _enc(hmm.log_self),
        "log_forward": _enc(hmm.log_forward),
        "log_class_freq": _enc(hmm.log_class_freq),
        "log_entry": _enc(hmm.log_entry)[0],
    }


def hmm_from_dict(d: dict) -> HmmParams:
    if d.get("format_version") != HMM_FORMAT_VERSION:
        raise HmmError(f"unsupported HMM format_version {d.get('format_version')!r}")
    try:
        return HmmParams(
            num_states=int(d["num_states"]),
            log_priors=_dec(d["log_priors"]),
            log_self=_dec(d["log_self"]),
            log_forward=_dec(d["log_forward"]),
            log_class_freq=_dec(d["log_class_freq"]),
            first_kw=int(d["first_kw"]),
            last_kw=int(d["last_kw"]),
            log_entry=_dec([d["log_entry"]])[0],
            background=d.get("background"),
            silence=d.get("silence"),
        )
    except KeyError as exc:
        raise HmmError(f"HMM file missing field {exc}") from None


def save_hmm(hmm: HmmParams, path) -> None:
    with open(path, "w") as f:
        json.dump(hmm_to_dict(hmm), f, indent=1)
        f.write("\n")


def load_hmm(path) -> HmmParams:
    with open(path) as f:
        return hmm_from_dict(json.load(f))
