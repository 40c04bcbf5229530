"""Cross-entropy pretraining and end-to-end hinge fine-tuning of the state classifier."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import dnn
from .dnn import DnnParams, load_checkpoint, save_checkpoint  # noqa: F401  (re-export)
from .e2e_loss import hinge_loss, score_windows
from .features import stack_context
from .hmm import HmmParams
from .sampling import mine_hard_negatives, sample_negatives, sample_positive, swap_augment

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "batch", "phase", "loss", "pos_mean_score", "neg_mean_score")


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    phase: str = "e2e"
    learning_rate: float = 1e-3
    ce_learning_rate: float = 1e-3
    epochs: int = 10
    ce_batch_frames: int = 256
    batch_utterances: int = 48
    seed: int = 0
    delta: int = 9
    base_dim: int = 13
    layer_sizes: tuple = (247, 52, 20)
    iou_p: float = 0.95
    iou_n: float = 0.5
    max_negatives: int = 20
    n_swaps: int = 10
    n_hard: int = 50
    n_rand: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gain_augment: bool = True
    gain_range: tuple = (0.5, 1.5)
    score_init: str = "first_state"

    def __post_init__(self):
        if self.phase not in ("ce", "e2e"):
            raise TrainingError(f"unknown phase {self.phase!r}")
        if self.learning_rate <= 0 or self.ce_learning_rate <= 0:
            raise TrainingError("learning rates must be positive")
        if self.batch_utterances < 1:
            raise TrainingError("batch_utterances must be >= 1")
        self.layer_sizes = tuple(self.layer_sizes)
        self.gain_range = tuple(self.gain_range)


class Adam:
    """Adaptive-moment optimizer acting in place on a list of arrays."""

    def __init__(self, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(a)):
                raise FloatingPointError("optimizer produced non-finite parameters")


def apply_gain(stacked: np.ndarray, gain: float, base_dim: int = 13) -> np.ndarray:
    """Effect of scaling the waveform by ``gain``: coefficient 0 of every stacked
    block (the log-energy term) shifts by ``log(gain)``."""
    out = stacked.copy()
    out[:, ::base_dim] += np.log(gain)
    return out


def _stack(utt, config):
    return stack_context(utt.features, config.delta).frames


def cross_entropy(log_post, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the log posteriors."""
    n = len(labels)
    loss = -log_post[np.arange(n), labels].mean()
    grad = np.zeros_like(log_post)
    grad[np.arange(n), labels] = -1.0 / n
    return loss, grad


def pretrain_ce(corpus, config: TrainConfig, params: DnnParams | None = None):
    """Frame-level cross-entropy training. Returns ``(params, log_rows)``."""
    if not corpus:
        raise TrainingError("empty corpus")
    rng = np.random.default_rng([config.seed, 1])
    if params is None:
        params = dnn.init_params(config.layer_sizes, config.seed)
    else:
        params = params.copy()
    C = params.layer_sizes[-1]
    stacked = [_stack(u, config) for u in corpus]
    labels = np.concatenate([np.asarray(u.state_labels) for u in corpus])
    if labels.min() < 0 or labels.max() >= C:
        raise TrainingError(f"state label out of range [0, {C})")
    offsets = np.cumsum([0] + [len(s) for s in stacked])
    base = np.concatenate(stacked)

    opt = Adam(params.arrays(), config.ce_learning_rate, config.beta1, config.beta2, config.eps)
    rows = []
    for epoch in range(config.epochs):
        X = base
        if config.gain_augment:
            gains = rng.uniform(*config.gain_range, size=len(stacked))
            X = base.copy()
            for i, g in enumerate(gains):
                X[offsets[i] : offsets[i + 1], :: config.base_dim] += np.log(g)
        order = rng.permutation(len(X))
        total = 0.0
        for b, lo in enumerate(range(0, len(X), config.ce_batch_frames)):
            idx = order[lo : lo + config.ce_batch_frames]
            out = dnn.forward(params, X[idx])
            loss, grad = cross_entropy(out.log_posteriors, labels[idx])
            opt.step(dnn.backward(params, X[idx], grad).arrays())
            total += loss * len(idx)
        rows.append({"epoch": epoch, "batch": b, "phase": "ce", "loss": total / len(X),
                     "pos_mean_score": "", "neg_mean_score": ""})
        log.info("ce epoch %d loss %.4f", epoch, total / len(X))
    return params, rows


@dataclass
class BatchStats:
    loss: float
    pos_mean: float
    neg_mean: float
    n_pos: int
    n_neg_scored: int
    n_neg_selected: int
    skipped: int
    grads: list = field(default_factory=list)


def e2e_batch(params: DnnParams, hmm: HmmParams, batch, config: TrainConfig, rng) -> BatchStats:
    """Sample, score and mine one mini-batch; returns loss, stats and parameter gradients."""
    stacked = []
    for utt in batch:
        x = _stack(utt, config)
        if config.gain_augment:
            x = apply_gain(x, rng.uniform(*config.gain_range), config.base_dim)
        stacked.append(x)
    offsets = np.cumsum([0] + [len(x) for x in stacked])
    X = np.concatenate(stacked)
    scores = dnn.forward(params, X).log_posteriors - hmm.log_class_freq

    positives, negatives = [], []
    for i, utt in enumerate(batch):
        gt, T = utt.keyword_window, len(stacked[i])
        pos = sample_positive(gt, T, rng, config.iou_p)
        negs = sample_negatives(gt, T, rng, config.max_negatives, config.iou_n)
        negs += swap_augment(gt, rng, config.n_swaps)
        for ex in [pos] + negs:
            ex.utt_index = i
        positives.append(pos)
        negatives.extend(negs)

    members = positives + negatives
    orders = [ex.frame_order() + offsets[ex.utt_index] for ex in members]
    feasible = [len(o) >= hmm.chain_len for o in orders]
    skipped = len(members) - sum(feasible)
    keep = [j for j, ok in enumerate(feasible) if ok]
    d_all, paths_all = score_windows([scores[orders[j]] for j in keep], hmm, config.score_init)
    d = dict(zip(keep, d_all))
    paths = dict(zip(keep, paths_all))

    n_pos = len(positives)
    pos_ids = [j for j in keep if j < n_pos]
    neg_ids = [j for j in keep if j >= n_pos]
    neg_losses = [(j, hinge_loss(d[j], False)[0]) for j in neg_ids]
    selected = [j for j, _ in mine_hard_negatives(neg_losses, rng, config.n_hard, config.n_rand)]

    used = [(j, True) for j in pos_ids] + [(j, False) for j in selected]
    denom = max(len(used), 1)
    grad_scores = np.zeros_like(scores)
    total = 0.0
    for j, is_pos in used:
        loss, dl_dd = hinge_loss(d[j], is_pos)
        total += loss
        if dl_dd != 0.0:
            T = len(orders[j])
            np.add.at(grad_scores, (orders[j], paths[j]), dl_dd / (T * denom))
    grads = dnn.backward(params, X, grad_scores).arrays()
    return BatchStats(
        loss=total / denom,
        pos_mean=float(np.mean([d[j] for j in pos_ids])) if pos_ids else float("nan"),
        neg_mean=float(np.mean([d[j] for j in neg_ids])) if neg_ids else float("nan"),
        n_pos=len(pos_ids),
        n_neg_scored=len(neg_ids),
        n_neg_selected=len(selected),
        skipped=skipped,
        grads=grads,
    )


def train_e2e(corpus, init_params: DnnParams, hmm: HmmParams, config: TrainConfig):
    """Hinge-loss fine-tuning through window Viterbi scoring. Returns ``(params, log_rows)``."""
    corpus = [u for u in corpus if u.keyword_window is not None]
    if not corpus:
        raise TrainingError("no utterances with keyword windows")
    rng = np.random.default_rng([config.seed, 2])
    params = init_params.copy()
    opt = Adam(params.arrays(), config.learning_rate, config.beta1, config.beta2, config.eps)
    rows = []
    skipped = 0
    bs = config.batch_utterances
    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        for b, lo in enumerate(range(0, len(order), bs)):
            batch = [corpus[i] for i in order[lo : lo + bs]]
            st = e2e_batch(params, hmm, batch, config, rng)
            opt.step(st.grads)
            skipped += st.skipped
            rows.append({"epoch": epoch, "batch": b, "phase": "e2e", "loss": st.loss,
                         "pos_mean_score": st.pos_mean, "neg_mean_score": st.neg_mean})
        log.info("e2e epoch %d loss %.4f pos %.3f neg %.3f", epoch, st.loss, st.pos_mean, st.neg_mean)
    if skipped:
        log.info("skipped %d infeasible windows", skipped)
    return params, rows


def write_train_log(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
