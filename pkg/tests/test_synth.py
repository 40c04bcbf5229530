import json

import numpy as np
import pytest

from e2ekws.evaluation import confusion_matrix
from e2ekws.hmm import estimate_hmm, viterbi_stream
from e2ekws.synth import (
    CorpusError,
    SynthConfig,
    generate_corpus,
    generate_utterances,
    keyword_window_from_labels,
    load_corpus,
    read_labels,
    read_manifest,
    state_means,
    write_labels,
)
from e2ekws.trainer import TrainConfig, pretrain_ce


def test_config_validation():
    with pytest.raises(CorpusError):
        SynthConfig(noise_sigma=0)
    with pytest.raises(CorpusError):
        SynthConfig(keyword_chain_len=19)


def test_means_are_deterministic_and_separated():
    cfg = SynthConfig()
    m = state_means(cfg)
    np.testing.assert_array_equal(m, state_means(SynthConfig()))
    dist = np.linalg.norm(m[:, None] - m[None, :], axis=-1)
    dist[np.diag_indices(len(m))] = np.inf
    assert dist.min() == pytest.approx(cfg.state_mean_separation)


def test_generation_is_deterministic():
    a = generate_utterances(SynthConfig(), 5, seed=3)
    b = generate_utterances(SynthConfig(), 5, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.features, y.features)
        np.testing.assert_array_equal(x.state_labels, y.state_labels)
        assert x.keyword_window == y.keyword_window


@pytest.mark.parametrize("cfg", [SynthConfig(), SynthConfig(label_jitter=3),
                                 SynthConfig(flat_start_labels=True)])
def test_keyword_labels_run_through_chain_in_order(cfg):
    for u in generate_utterances(cfg, 50, seed=1):
        g = u.keyword_window
        kw = u.state_labels[g.start : g.end]
        assert np.all(np.diff(kw) >= 0)
        assert set(kw.tolist()) == set(range(18))
        assert keyword_window_from_labels(u.state_labels, 0, 17) == g
        assert np.all((u.state_labels >= 0) & (u.state_labels < 20))


def test_noise_free_limit_is_separable_and_decodes_the_keyword():
    cfg = SynthConfig(noise_sigma=1e-6, max_confusers=0, babble_kw_fraction=0.0)
    means = state_means(cfg)
    source_to_label = np.r_[np.arange(19), np.full(cfg.n_distractors, 19)]
    utts = generate_utterances(cfg, 20, seed=4)
    hmm = estimate_hmm([u.state_labels for u in utts])
    for u in utts:
        nearest = np.argmin(((u.features[:, None] - means[None]) ** 2).sum(-1), axis=1)
        pred = source_to_label[nearest]
        np.testing.assert_array_equal(pred, u.state_labels)
        log_post = np.where(np.eye(20, dtype=bool)[pred], 0.0, -50.0)
        dets = viterbi_stream(log_post - hmm.log_class_freq, hmm, init="entry")
        best = max(dets, key=lambda d: d.score)
        assert (best.start_frame, best.end_frame + 1) == (u.keyword_window.start, u.keyword_window.end)


def test_dwell_recovered_from_1000_utterances():
    cfg = SynthConfig()
    hmm = estimate_hmm([u.state_labels for u in generate_utterances(cfg, 1000, seed=5)])
    dwell = 1 / (1 - np.exp(hmm.log_self[:18]))
    np.testing.assert_allclose(dwell, cfg.kw_mean_dwell, rtol=0.10)


def test_corpus_files_round_trip(tmp_path):
    cfg = SynthConfig()
    m1 = generate_corpus(cfg, 6, tmp_path / "a", seed=7)
    m2 = generate_corpus(cfg, 6, tmp_path / "b", seed=7)
    assert m1.read_bytes() == m2.read_bytes()
    for row in read_manifest(m1):
        for key in ("features_path", "labels_path"):
            assert (tmp_path / "a" / row[key]).read_bytes() == (tmp_path / "b" / row[key]).read_bytes()
        labels = read_labels(tmp_path / "a" / row["labels_path"])
        g = keyword_window_from_labels(labels, 0, 17)
        assert (g.start, g.end) == (row["kw_start_frame"], row["kw_end_frame"])
    loaded = load_corpus(m1)
    fresh = generate_utterances(cfg, 6, seed=7)
    for u, v in zip(loaded, fresh):
        np.testing.assert_array_equal(u.features, v.features.astype(np.float32))
        np.testing.assert_array_equal(u.state_labels, v.state_labels)
    saved = json.loads((tmp_path / "a" / "synth_config.json").read_text())
    assert saved["seed"] == 7 and saved["config"]["noise_sigma"] == cfg.noise_sigma


def test_label_file_validation(tmp_path):
    write_labels(tmp_path / "l.kwsl", [0, 1, 19])
    np.testing.assert_array_equal(read_labels(tmp_path / "l.kwsl"), [0, 1, 19])
    raw = (tmp_path / "l.kwsl").read_bytes()
    (tmp_path / "bad.kwsl").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.kwsl").write_bytes(raw[:-1])
    with pytest.raises(CorpusError):
        read_labels(tmp_path / "bad.kwsl")
    with pytest.raises(CorpusError, match="truncated"):
        read_labels(tmp_path / "short.kwsl")


def test_malformed_manifest_reports_line(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"id": "a"}\nnot json\n')
    with pytest.raises(CorpusError, match=":2:"):
        read_manifest(tmp_path / "m.jsonl")


def test_higher_noise_lowers_ce_accuracy():
    accs = []
    for sigma in (1.0, 2.5):
        cfg = SynthConfig(noise_sigma=sigma)
        train = generate_utterances(cfg, 40, seed=8)
        test = generate_utterances(cfg, 20, seed=9)
        params, _ = pretrain_ce(train, TrainConfig(phase="ce", epochs=3))
        accs.append(confusion_matrix(params, test)[1])
    assert accs[0] > accs[1]
