"""Workload generation, ablations, desk-scale training, benchmark, diagnostics."""

import dataclasses

import numpy as np
import pytest

from tokengate.config import RunConfig
from tokengate.errors import InputError
from tokengate.harness import (
    AblationVariant,
    EpochStats,
    OptimizerConfig,
    WorkloadSpec,
    ablation_csv,
    bench_csv,
    bench_scaling,
    correlation_csv,
    correlation_report,
    generate_workload,
    parse_ablation_csv,
    parse_bench_csv,
    parse_correlation_csv,
    parse_records_csv,
    parse_trajectory_csv,
    records_csv,
    run_ablation,
    trajectory_csv,
    train_desk_scale,
    uniform_stride_indices,
)
from tokengate.objective import PenaltyWeights
from tokengate.scoring import ScoringWeights, score
from tokengate.selector import DiagnosticsRecord, SelectorModel, select

CFG = RunConfig(d=16, heads=2, budget_hidden=16, n_max=64)


def _identity_model(cfg=CFG):
    model = SelectorModel.build(cfg)
    return dataclasses.replace(model, scoring=ScoringWeights.identity(cfg.d))


class TestGenerateWorkload:
    def test_planted_tokens_take_top_relevance(self):
        """With identity-mode scoring, the K largest relevances sit exactly
        on the planted set (direct softmax oracle via score())."""
        spec = WorkloadSpec(m=300, d=16, l=4, k=6, alignment=8.0, seed=0)
        wl = generate_workload(spec, np.random.default_rng(0))
        _, r = score(wl.x, wl.q, ScoringWeights.identity(16))
        top = np.sort(np.argsort(-r.value.ravel())[:6])
        np.testing.assert_array_equal(top, wl.planted)

    def test_planted_inner_products_dominate(self):
        spec = WorkloadSpec(m=200, d=16, l=4, k=5, seed=1)
        wl = generate_workload(spec, np.random.default_rng(1))
        sims = wl.x @ wl.q.mean(axis=0)
        planted_min = sims[wl.planted].min()
        distractors = np.delete(sims, wl.planted)
        assert planted_min > distractors.max()

    def test_all_planted_degenerate(self):
        spec = WorkloadSpec(m=12, d=8, l=2, k=12, seed=2)
        wl = generate_workload(spec, np.random.default_rng(2))
        np.testing.assert_array_equal(wl.planted, np.arange(12))

    def test_seeded_reproducibility(self):
        spec = WorkloadSpec(m=50, d=8, l=2, k=4, seed=3)
        a = generate_workload(spec, np.random.default_rng(9))
        b = generate_workload(spec, np.random.default_rng(9))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.q, b.q)
        np.testing.assert_array_equal(a.planted, b.planted)

    def test_planted_count_validation(self):
        with pytest.raises(InputError):
            generate_workload(WorkloadSpec(m=4, k=9), np.random.default_rng(0))

    def test_video_geometry_derives_token_count_and_timestamps(self):
        spec = WorkloadSpec(
            m=None, d=8, l=2, k=2, frames=10, frame_rate=2.0, sample_interval=2,
            frame_height=28, frame_width=28, patch=14, seed=4,
        )
        # 5 sampled frames x 4 tokens/frame
        assert spec.token_count() == 20
        wl = generate_workload(spec, np.random.default_rng(0))
        assert wl.x.shape == (20, 8)
        # tokens of one frame share a timestamp; frames advance by dt/fps
        np.testing.assert_allclose(wl.timestamps[:4], 0.0)
        np.testing.assert_allclose(wl.timestamps[4:8], 1.0)


class TestUniformStride:
    def test_ascending_unique_full_span(self):
        idx = uniform_stride_indices(100, 10)
        assert idx.size == 10
        assert np.all(np.diff(idx) > 0)
        assert idx[0] == 0 and idx[-1] < 100

    def test_n_equals_m(self):
        np.testing.assert_array_equal(uniform_stride_indices(5, 5), np.arange(5))


class TestRunAblation:
    def test_qts_beats_unif_on_planted_workloads(self):
        spec = WorkloadSpec(m=400, d=16, l=4, k=8, alignment=8.0, seed=5)
        model = _identity_model()
        qts = run_ablation(AblationVariant.QTS, spec, model, trials=30)
        unif = run_ablation(AblationVariant.UNIF, spec, model, trials=30)
        assert qts.mean_recall == 1.0
        assert unif.mean_recall < 0.6
        # matched budgets by construction
        assert [r.n for r in qts.rows] == [r.n for r in unif.rows]

    def test_nreenc_keeps_identical_indices(self):
        """Re-encoding happens after selection, so disabling it cannot
        change which tokens survive."""
        spec = WorkloadSpec(m=150, d=16, l=4, k=5, seed=6)
        model = _identity_model()
        for trial in range(5):
            rng_a = np.random.default_rng([spec.seed, trial])
            rng_b = np.random.default_rng([spec.seed, trial])
            wl_a = generate_workload(spec, rng_a)
            wl_b = generate_workload(spec, rng_b)
            full = select(model, wl_a.x, wl_a.timestamps, wl_a.q, mode="infer")
            bare = select(
                model.without_reencoder(), wl_b.x, wl_b.timestamps, wl_b.q, mode="infer"
            )
            np.testing.assert_array_equal(full.indices, bare.indices)

    def test_cap_honored_in_all_variants(self):
        cfg = RunConfig(d=16, heads=2, budget_hidden=16, n_max=16)
        spec = WorkloadSpec(m=300, d=16, l=4, k=4, seed=7)
        model = _identity_model(cfg)
        for variant in AblationVariant:
            metrics = run_ablation(variant, spec, model, trials=10)
            assert all(row.n <= 16 for row in metrics.rows)


class TestTrainDeskScale:
    def test_zero_learning_rate_keeps_weights_bit_identical(self):
        spec = WorkloadSpec(m=48, d=16, l=4, k=4, seed=8)
        model = SelectorModel.build(CFG)
        before = model.parameters()
        trained, stats = train_desk_scale(
            spec,
            model,
            epochs=2,
            opt=OptimizerConfig(lr=0.0, momentum=0.9, clip_norm=1.0, batch=2),
            penalties=PenaltyWeights(),
            seed=0,
        )
        after = trained.parameters()
        for name in before:
            np.testing.assert_array_equal(before[name], after[name], err_msg=name)
        assert len(stats) == 2

    def test_training_reduces_loss_on_fixed_distribution(self):
        """Gate noise keeps per-epoch losses stochastic, so compare the
        first- and last-third means of the (fully seeded) trajectory."""
        spec = WorkloadSpec(m=48, d=16, l=4, k=6, alignment=3.0, seed=9)
        model = SelectorModel.build(CFG)
        trained, stats = train_desk_scale(
            spec,
            model,
            epochs=12,
            opt=OptimizerConfig(lr=0.05, momentum=0.9, clip_norm=1.0, batch=4),
            penalties=PenaltyWeights(lambda_t=0.1, lambda_m=0.17, lambda_s=0.05),
            seed=0,
        )
        losses = [s.loss for s in stats]
        assert np.mean(losses[-4:]) < np.mean(losses[:4])

    def test_trajectory_fields_finite(self):
        spec = WorkloadSpec(m=32, d=16, l=2, k=3, seed=10)
        model = SelectorModel.build(CFG)
        _, stats = train_desk_scale(
            spec, model, 2, OptimizerConfig(batch=2), PenaltyWeights(), seed=1
        )
        for s in stats:
            assert np.isfinite([s.loss, s.mean_rho, s.mean_n]).all()


class TestBenchScaling:
    def test_rows_and_monotone_shape(self):
        spec = WorkloadSpec(
            m=None, d=16, l=4, k=4, frames=None, frame_height=28, frame_width=28,
            patch=14, seed=11,
        )
        model = SelectorModel.build(CFG)
        records = bench_scaling([4, 8, 16], model, spec)
        assert len(records) == 6
        base = [r for r in records if r.mode == "baseline"]
        qts = [r for r in records if r.mode == "qts"]
        # baseline embedding count grows linearly in frames (4 tokens/frame)
        assert [r.n for r in base] == [16, 32, 64]
        kept = [r.n for r in qts]
        assert all(a <= b for a, b in zip(kept, kept[1:]))
        assert all(r.n <= CFG.n_max for r in qts)

    def test_zero_frames_rejected(self):
        model = SelectorModel.build(CFG)
        with pytest.raises(InputError):
            bench_scaling([0], model, WorkloadSpec(d=16))

    def test_downstream_time_ordering(self):
        """Quadratic baseline cost grows with frames while the selected
        stream's downstream cost plateaus at the cap (ordering only, no
        absolute-ms claims)."""
        cfg = RunConfig(d=16, heads=2, budget_hidden=16, n_max=24, reencode_depth=0)
        spec = WorkloadSpec(
            m=None, d=16, l=4, k=4, frame_height=56, frame_width=56, patch=14, seed=14
        )
        model = SelectorModel.build(cfg)
        records = bench_scaling([16, 256], model, spec)  # M = 256 vs 4096
        base = {r.frames: r for r in records if r.mode == "baseline"}
        qts = {r.frames: r for r in records if r.mode == "qts"}
        assert base[256].downstream_ms > base[16].downstream_ms
        assert qts[256].n <= 24
        assert qts[256].downstream_ms < base[256].downstream_ms


class TestCorrelationReport:
    def _records(self, rhos, ts):
        return [
            DiagnosticsRecord(
                sq_mean=0.1 * i, log_m=5.0, r_max=0.5, entropy=1.0, rho=rho, t=t, n=10, m=100
            )
            for i, (rho, t) in enumerate(zip(rhos, ts))
        ]

    def test_perfect_linear_correlation(self):
        xs = [0.1, 0.2, 0.3, 0.4]
        rows = correlation_report(self._records(xs, [2 * x for x in xs]))
        rho_t = next(r for r in rows if r.pair == "rho_vs_t")
        assert rho_t.r == pytest.approx(1.0, abs=1e-12)
        assert rho_t.slope == pytest.approx(2.0, abs=1e-12)
        assert rho_t.intercept == pytest.approx(0.0, abs=1e-12)

    def test_constant_rho_is_undefined(self):
        rows = correlation_report(self._records([0.3] * 5, [1, 2, 3, 4, 5]))
        rho_t = next(r for r in rows if r.pair == "rho_vs_t")
        assert rho_t.r is None

    def test_constant_column_with_ulp_mean_noise_is_undefined(self):
        """25 identical log_m values whose float mean is off by an ulp must
        still report undefined, not a junk coefficient."""
        import math

        rhos = [0.3 + 0.01 * i for i in range(25)]
        records = [
            DiagnosticsRecord(
                sq_mean=0.1, log_m=math.log(256), r_max=0.5, entropy=1.0,
                rho=rho, t=1.0 - rho, n=10, m=256,
            )
            for rho in rhos
        ]
        rows = correlation_report(records)
        log_m_row = next(r for r in rows if r.pair == "log_m_vs_rho")
        assert log_m_row.r is None

    def test_too_few_records(self):
        with pytest.raises(InputError):
            correlation_report(self._records([0.1], [0.2]))

    def test_selector_records_show_negative_rho_t_trend(self):
        """Threshold monotonicity makes (rho, t) anticorrelated on logs from
        a homogeneous workload distribution."""
        spec = WorkloadSpec(m=256, d=16, l=4, k=8, alignment=4.0, seed=12)
        model = _identity_model()
        records = []
        for trial in range(40):
            wl = generate_workload(spec, np.random.default_rng([spec.seed, trial]))
            records.append(select(model, wl.x, wl.timestamps, wl.q, "infer").record)
        rows = correlation_report(records)
        rho_t = next(r for r in rows if r.pair == "rho_vs_t")
        assert rho_t.r is not None and rho_t.r < 0


class TestCsvRoundTrips:
    def test_ablation(self):
        spec = WorkloadSpec(m=60, d=16, l=2, k=3, seed=13)
        metrics = run_ablation(AblationVariant.QTS, spec, _identity_model(), trials=3)
        text = ablation_csv(metrics.rows)
        assert parse_ablation_csv(text) == metrics.rows

    def test_bench(self):
        spec = WorkloadSpec(m=None, d=16, l=2, k=2, frame_height=28, frame_width=28, patch=14)
        records = bench_scaling([4], SelectorModel.build(CFG), spec)
        assert parse_bench_csv(bench_csv(records)) == records

    def test_correlation(self):
        rows = correlation_report(
            [
                DiagnosticsRecord(0.1, 5.0, 0.5, 1.0, 0.1 * i, 1.0 - 0.1 * i, 10, 100)
                for i in range(1, 5)
            ]
        )
        assert parse_correlation_csv(correlation_csv(rows)) == rows

    def test_records(self):
        records = [DiagnosticsRecord(0.1, 5.0, 0.5, 1.0, 0.2, 0.9, 10, 100)]
        assert parse_records_csv(records_csv(records)) == records

    def test_trajectory(self):
        stats = [EpochStats(0, 1.5, 0.3, 12.0), EpochStats(1, 1.2, 0.28, 11.5)]
        assert parse_trajectory_csv(trajectory_csv(stats)) == stats
