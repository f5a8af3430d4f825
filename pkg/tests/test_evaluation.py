"""Accuracy, gap, probe, and histogram diagnostics against hand oracles."""

import numpy as np
import pytest

import temporalab.evaluation as E
import temporalab.model as M
from temporalab.errors import InputError


def tiny_cfg(**kw):
    base = dict(frames=4, height=8, width=8, channels=3, patch=(1, 4, 4),
                embed_dim=16, heads=2, depth=2, attention_kind="divided",
                num_classes=4)
    base.update(kw)
    return M.ModelConfig(**base)


def random_videos(n, cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0,
                       (n, cfg.frames, cfg.height, cfg.width, cfg.channels)
                       ).astype(np.float32)


class TestSamplePermutation:
    def test_never_identity_and_deterministic(self):
        for idx in range(50):
            p1 = E.sample_permutation(3, idx, 4)
            p2 = E.sample_permutation(3, idx, 4)
            assert not np.array_equal(p1, np.arange(4))
            np.testing.assert_array_equal(p1, p2)

    def test_varies_with_index_and_seed(self):
        perms = {tuple(E.sample_permutation(0, i, 6)) for i in range(30)}
        assert len(perms) > 10
        assert tuple(E.sample_permutation(0, 0, 6)) != tuple(
            E.sample_permutation(1, 0, 6)) or tuple(
            E.sample_permutation(0, 1, 6)) != tuple(E.sample_permutation(1, 1, 6))

    def test_single_frame_rejected(self):
        with pytest.raises(InputError):
            E.sample_permutation(0, 0, 1)

    def test_shuffle_dataset_matches_per_sample_perm(self):
        cfg = tiny_cfg()
        frames = random_videos(5, cfg)
        out = E.shuffle_dataset_frames(frames, seed=9)
        for k in range(5):
            perm = E.sample_permutation(9, k, cfg.frames)
            np.testing.assert_array_equal(out[k], frames[k][perm])


class TestTopK:
    def test_handmade_logits(self):
        logits = np.array([
            [5.0, 1.0, 0.0, -1.0, 0.5, 0.2],   # label 0 ranks first
            [1.0, 5.0, 4.0, 3.0, 2.0, 1.5],    # label 0 ranks sixth: top5 miss
            [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],    # label 5 ranks first
        ])
        labels = np.array([0, 0, 5])
        hits1 = E._topk_hits(logits, labels, 1)
        hits5 = E._topk_hits(logits, labels, 5)
        np.testing.assert_array_equal(hits1, [True, False, True])
        np.testing.assert_array_equal(hits5, [True, False, True])

    def test_chance_level(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4000, 8))
        labels = rng.integers(0, 8, size=4000)
        top1 = 100.0 * E._topk_hits(logits, labels, 1).mean()
        assert abs(top1 - 12.5) < 3.0


class TestEvalGap:
    def test_reference_values(self):
        assert E.eval_gap((62.1, 41.3)) == pytest.approx(20.8)
        assert E.eval_gap((63.7, 25.3)) == pytest.approx(38.4)
        assert E.eval_gap((50.0, 50.0)) == 0.0

    def test_antisymmetric(self):
        assert E.eval_gap((70.0, 30.0)) == -E.eval_gap((30.0, 70.0))

    def test_accepts_report(self):
        rep = E.EvalReport(top1_original=80.0, top1_shuffled=60.0,
                           top5_original=None, top5_shuffled=None,
                           gap=20.0, seed=0)
        assert E.eval_gap(rep) == pytest.approx(20.0)


class TestEvaluate:
    def test_zero_temporal_table_gap_is_zero(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=0)
        assert float(np.abs(params["embed.temporal_pos"].data).max()) == 0.0
        frames = random_videos(24, cfg, seed=1)
        labels = np.arange(24) % cfg.num_classes
        report = E.evaluate(params, cfg, frames, labels, seed=5)
        assert report.gap == 0.0
        assert report.top1_original == report.top1_shuffled

    def test_report_consistency_and_per_class(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=2)
        frames = random_videos(20, cfg, seed=3)
        labels = np.arange(20) % cfg.num_classes
        report = E.evaluate(params, cfg, frames, labels, seed=1)
        top1, top5 = E.eval_accuracy(params, cfg, frames, labels,
                                     shuffled=False, seed=1)
        assert report.top1_original == pytest.approx(top1)
        assert top5 is None  # only 4 classes
        assert report.gap == pytest.approx(report.top1_original - report.top1_shuffled)
        weighted = sum(v["n"] * v["top1_original"] for v in report.per_class.values())
        total = sum(v["n"] for v in report.per_class.values())
        assert weighted / total == pytest.approx(report.top1_original)

    def test_subset_accuracy(self):
        rep = E.EvalReport(top1_original=0.0, top1_shuffled=0.0,
                           top5_original=None, top5_shuffled=None,
                           gap=0.0, seed=0,
                           per_class={0: {"n": 2, "top1_original": 100.0,
                                          "top1_shuffled": 50.0},
                                      1: {"n": 6, "top1_original": 50.0,
                                          "top1_shuffled": 0.0}})
        assert rep.subset_accuracy([0, 1]) == pytest.approx((200 + 300) / 8)
        assert rep.subset_accuracy([0], shuffled=True) == pytest.approx(50.0)

    def test_empty_dataset(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=0)
        with pytest.raises(InputError):
            E.batched_logits(params, cfg, np.empty((0, 4, 8, 8, 3), np.float32))

    def test_batch_size_does_not_change_result(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=4)
        frames = random_videos(10, cfg, seed=5)
        a = E.batched_logits(params, cfg, frames, batch_size=3)
        b = E.batched_logits(params, cfg, frames, batch_size=10)
        np.testing.assert_allclose(a, b, atol=1e-5)


class TestProbes:
    def test_features_match_frame_aggregation(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=0)
        frames = random_videos(3, cfg, seed=1)
        feats = E.collect_frame_features(params, cfg, frames)
        assert feats.shape == (3, cfg.depth + 1, cfg.t, cfg.embed_dim)
        enc = M.encode(frames, cfg, params)
        for level in (0, cfg.depth):
            for j in range(cfg.t):
                ref = M.aggregate_frame(enc.grid_at(level), j).data
                np.testing.assert_allclose(feats[:, level, j], ref, atol=1e-6)

    def test_active_temporal_table_is_linearly_decodable_at_block0(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=0)
        rng = np.random.default_rng(7)
        params["embed.temporal_pos"].data[:] = rng.normal(
            0.0, 1.0, params["embed.temporal_pos"].shape).astype(np.float32)
        train = random_videos(40, cfg, seed=2)
        test = random_videos(20, cfg, seed=3)
        f_train = E.collect_frame_features(params, cfg, train)
        f_test = E.collect_frame_features(params, cfg, test)
        acc = E.train_order_probe(f_train[:, 0], f_test[:, 0], seed=0)
        assert acc >= 95.0

    def test_zero_table_untrained_encoder_is_chance(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=0)
        train = random_videos(40, cfg, seed=2)
        test = random_videos(30, cfg, seed=3)
        report = E.probe_blocks(params, cfg, train, test, seed=0)
        chance = 100.0 / cfg.t
        assert report.depth == cfg.depth
        for acc in report.accuracies:
            assert abs(acc - chance) < 15.0

    def test_probe_leaves_encoder_untouched(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=0)
        before = {k: p.data.copy() for k, p in params.items()}
        E.probe_blocks(params, cfg, random_videos(10, cfg, seed=1),
                       random_videos(10, cfg, seed=2), seed=0)
        for k, p in params.items():
            np.testing.assert_array_equal(before[k], p.data)


class TestHistogram:
    def test_hand_built_two_sample(self):
        hist = E.histogram_from_gaps([0.9 - 0.3, 0.5 - 0.5])
        # 0.6 lies in [0.6, 0.7) = bin 16; 0.0 lies in [0.0, 0.1) = bin 10
        assert hist.masses[16] == pytest.approx(0.5)
        assert hist.masses[10] == pytest.approx(0.5)
        assert hist.masses.sum() == pytest.approx(1.0, abs=1e-9)
        assert hist.mean_gap == pytest.approx(0.3)

    def test_edges_and_endpoint_bins(self):
        edges = E.ConfidenceHistogram.edges()
        assert edges[0] == -1.0 and edges[-1] == 1.0
        assert len(edges) == 21
        hist = E.histogram_from_gaps([-1.0, 1.0, 0.999, -0.9999])
        assert hist.masses[0] == pytest.approx(0.5)   # -1.0 and -0.9999
        assert hist.masses[19] == pytest.approx(0.5)  # +1.0 (closed) and 0.999

    def test_masses_sum_to_one(self):
        rng = np.random.default_rng(0)
        hist = E.histogram_from_gaps(rng.uniform(-1, 1, size=997))
        assert abs(hist.masses.sum() - 1.0) <= 1e-9

    def test_invariant_model_mass_concentrates_at_zero(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=0)
        frames = random_videos(16, cfg, seed=1)
        hist = E.confidence_histogram(params, cfg, frames, seed=2)
        # cls is shuffle-invariant to float precision, so every gap is
        # within a hair of zero: only the two bins touching zero can carry
        # mass.
        assert hist.masses[9] + hist.masses[10] == pytest.approx(1.0, abs=1e-9)
        assert abs(hist.mean_gap) < 1e-4

    def test_paired_with_eval_permutations(self):
        cfg = tiny_cfg()
        params = M.init_weights(cfg, seed=3)
        frames = random_videos(6, cfg, seed=4)
        shuffled = E.shuffle_dataset_frames(frames, seed=11)
        logits = E.batched_logits(params, cfg, shuffled)
        gaps = E.confidence_gaps(params, cfg, frames, seed=11)
        direct = E._confidences(E.batched_logits(params, cfg, frames)) \
            - E._confidences(logits)
        np.testing.assert_allclose(gaps, direct, atol=0)

    def test_empty_dataset(self):
        with pytest.raises(InputError):
            E.histogram_from_gaps([])


class TestCsv:
    def test_report_csv_rows(self, tmp_path):
        rep = E.EvalReport(top1_original=80.0, top1_shuffled=60.0,
                           top5_original=95.0, top5_shuffled=90.0,
                           gap=20.0, seed=7)
        path = tmp_path / "report.csv"
        E.write_report_csv(path, "run-a", rep)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "run_id,metric,split,value,seed"
        assert len(lines) == 6  # header + 5 metrics
        assert "run-a,gap,test,20,7" in lines

    def test_report_csv_omits_top5_for_few_classes(self, tmp_path):
        rep = E.EvalReport(top1_original=80.0, top1_shuffled=60.0,
                           top5_original=None, top5_shuffled=None,
                           gap=20.0, seed=7)
        path = tmp_path / "report.csv"
        E.write_report_csv(path, "r", rep)
        text = path.read_text()
        assert "top5" not in text
        assert len(text.strip().split("\n")) == 4

    def test_histogram_csv(self, tmp_path):
        hist = E.histogram_from_gaps([0.6, 0.0])
        path = tmp_path / "hist.csv"
        E.write_histogram_csv(path, hist)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "bin_low,bin_high,mass"
        assert len(lines) == 21
        assert lines[1].startswith("-1.00,-0.90,")
        assert lines[20].startswith("0.90,1.00,")

    def test_csv_bytes_deterministic(self, tmp_path):
        hist = E.histogram_from_gaps(np.linspace(-0.95, 0.95, 37))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        E.write_histogram_csv(p1, hist)
        E.write_histogram_csv(p2, hist)
        assert p1.read_bytes() == p2.read_bytes()

    def test_probe_csv(self, tmp_path):
        rep = E.ProbeReport(accuracies=[90.0, 70.0, 50.0, 30.0], epochs=20, lr=1e-2)
        path = tmp_path / "probe.csv"
        E.write_probe_csv(path, "run-b", rep, seed=3)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 5
        assert lines[1] == "run-b,probe_block_1,probe,90,3"
