import math

import numpy as np
import numpy.testing as npt
import pytest

from ssg_msda import numerics as nx
from ssg_msda.data import SyntheticSpec, generate_synthetic
from ssg_msda.trainer import (
    ABLATION_VARIANTS,
    ExperimentConfig,
    TrainingError,
    evaluate,
    init_model,
    load_dataset,
    metrics_jsonl,
    run_ablation_suite,
    run_mask_sweep,
    train,
)

SMALL = ExperimentConfig(lr=0.05, epochs=3, extractor_hidden=(16,), data={"samples_per_class_per_domain": 10})


@pytest.fixture(scope="module")
def small_ds():
    return load_dataset(SMALL)


class TestConfig:
    def test_defaults(self):
        c = ExperimentConfig()
        assert (c.alpha1, c.alpha2, c.lam, c.sigma, c.mask_ratio, c.s_val, c.lr) == (1.0, 0.1, 5.0, 0.005, 0.95, 0.1, 1e-4)

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(mask_ratio=1.5), dict(mask_ratio=-0.1), dict(variant="x")])
    def test_rejected(self, bad):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)

    def test_no_mask_variant_reveals_nothing(self):
        assert ExperimentConfig(variant="ssg_no_mask").effective_mask_ratio == 1.0


class TestTrain:
    def test_metrics_per_epoch(self, small_ds):
        res = train(SMALL, small_ds)
        assert [m.epoch for m in res.metrics] == [1, 2, 3]
        for m in res.metrics:
            for acc in (m.source_acc, m.domain_acc, m.target_acc):
                assert 0.0 <= acc <= 1.0

    def test_zero_lr_freezes_everything(self, small_ds):
        cfg = SMALL.replace(lr=0.0)
        before = [p.data.copy() for p in init_model(cfg, small_ds).named_parameters()]
        res = train(cfg, small_ds)
        for a, p in zip(before, res.model.named_parameters()):
            npt.assert_array_equal(a, p.data)
        accs = {m.target_acc for m in res.metrics}
        assert len(accs) == 1

    def test_deterministic(self, small_ds):
        a = metrics_jsonl(train(SMALL, small_ds).metrics)
        b = metrics_jsonl(train(SMALL, small_ds).metrics)
        assert a == b

    def test_seed_changes_run(self, small_ds):
        a = metrics_jsonl(train(SMALL, small_ds).metrics)
        b = metrics_jsonl(train(SMALL.replace(seed=1), small_ds).metrics)
        assert a != b

    @pytest.mark.parametrize("variant", ["ssg", "linear"])
    @pytest.mark.parametrize("drops", [(False, False), (True, False), (False, True)])
    def test_loss_identity(self, small_ds, variant, drops):
        cfg = SMALL.replace(variant=variant, drop_tgt_loss=drops[0], drop_ss_loss=drops[1], alpha1=0.7)
        w = cfg.effective_weights()
        for m in train(cfg, small_ds).metrics:
            assert abs(m.l_total - (w.alpha1 * (m.l_src + w.lam * m.l_tgt) + w.alpha2 * m.l_ss)) <= 1e-9

    def test_zero_alpha2_matches_dropped_term(self, small_ds):
        a = train(SMALL.replace(alpha2=0.0), small_ds)
        b = train(SMALL.replace(drop_ss_loss=True), small_ds)
        for pa, pb in zip(a.model.named_parameters(), b.model.named_parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()
        assert [m.target_acc for m in a.metrics] == [m.target_acc for m in b.metrics]

    def test_source_only_still_reports_target_accuracy(self, small_ds):
        res = train(SMALL.replace(alpha2=0.0, lam=0.0), small_ds)
        assert res.metrics[-1].target_acc is not None

    def test_reveal_frequency(self):
        ds = generate_synthetic(SyntheticSpec())
        m = train(ExperimentConfig(epochs=1, extractor_hidden=(16,)), ds).metrics[0]
        p, N = 0.05, len(ds)
        assert abs(m.reveal_rate - p) <= 3 * math.sqrt(p * (1 - p) / N)

    def test_non_finite_loss_aborts_with_context(self, small_ds):
        with pytest.raises(TrainingError, match=r"epoch \d+, batch \d+"):
            with np.errstate(over="ignore"):
                train(SMALL.replace(lr=1e6, epochs=5), small_ds)

    def test_needs_labelled_sources(self, small_ds):
        ds = generate_synthetic(SyntheticSpec(samples_per_class_per_domain=2))
        ds.labels[:] = -1
        with pytest.raises(ValueError, match="labelled source"):
            train(SMALL, ds)


class TestEvaluate:
    def test_untrained_is_chance(self):
        # a fresh head is close to a constant predictor, so single runs scatter
        # widely around chance; average enough seeds for a tight estimate
        accs = []
        for seed in range(100):
            cfg = ExperimentConfig(seed=seed, extractor_hidden=(16,))
            ds = load_dataset(cfg)
            accs.append(evaluate(init_model(cfg, ds), ds).target_accuracy)
        assert abs(np.mean(accs) - 0.25) <= 0.05

    def test_easy_regime(self):
        cfg = ExperimentConfig(lr=0.05, epochs=15, data={"shift_level": "low"})
        res = train(cfg, load_dataset(cfg))
        assert res.metrics[-1].target_acc >= 0.95

    def test_target_only(self, small_ds):
        model = init_model(SMALL, small_ds)
        res = evaluate(model, small_ds)
        held = small_ds.heldout_labels()
        rows = small_ds.target_mask
        expected = np.mean(res.category_logits[rows].argmax(1) == held[rows])
        assert res.target_accuracy == expected

    def test_no_perturbation(self, small_ds):
        model = init_model(SMALL, small_ds)
        a, b = evaluate(model, small_ds), evaluate(model, small_ds)
        assert a.category_logits.tobytes() == b.category_logits.tobytes()


class TestDrivers:
    def test_suite_rows(self, small_ds):
        res = run_ablation_suite(SMALL.replace(epochs=1), small_ds, seeds=[0, 1, 2])
        assert [r.name for r in res.rows] == list(ABLATION_VARIANTS)
        assert len(res.rows) == 7
        row = res.row("ssg")
        assert row.std == pytest.approx(np.std(row.accuracies, ddof=1))

    def test_suite_needs_three_seeds(self, small_ds):
        with pytest.raises(ValueError):
            run_ablation_suite(SMALL, small_ds, seeds=[0, 1])

    def test_no_mask_row_is_mask_ratio_one(self, small_ds):
        res = run_ablation_suite(SMALL, small_ds, seeds=[0, 1, 2], variants=["ssg_no_mask"])
        direct = train(SMALL.replace(mask_ratio=1.0), small_ds).metrics
        assert metrics_jsonl(res.runs[("ssg_no_mask", 0)]) == metrics_jsonl(direct)

    def test_sweep_rows(self, small_ds):
        ratios = [0.0, 0.5, 1.0]
        out = run_mask_sweep(SMALL, small_ds, ratios)
        assert sum(len(v) for v in out.values()) == len(ratios) * SMALL.epochs
        assert out[0.0][0].reveal_rate == 1.0 and out[1.0][0].reveal_rate == 0.0

    def test_sweep_range(self, small_ds):
        with pytest.raises(ValueError):
            run_mask_sweep(SMALL, small_ds, [1.2])
