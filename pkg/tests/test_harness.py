import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffidelity.core import topk_mask
from ffidelity.explain import NoiseLadder, get_explainer
from ffidelity.harness import (
    GammaDigitTask,
    SweepResult,
    aggregate_reports,
    auc_trapezoid,
    correlation_report,
    ffid_plus_curve,
    gen_gamma_digit_dataset,
    gen_tiered_dataset,
    planted_foreground_scores,
    run_degradation_experiment,
    spearman,
)
from ffidelity.masking import LERF, MORF
from ffidelity.metrics import MetricConfig
from ffidelity.model import MlpModel, TrainConfig, accuracy
from ffidelity.theory import TierSpec, TieredClassifier, linear_g, logistic_g


def brute_spearman(x, y):
    """Average ranks by direct counting, then Pearson of the ranks."""
    def ranks(v):
        return np.array([sum(b < a for b in v) + (sum(b == a for b in v) + 1) / 2 for a in v], dtype=float)

    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt((rx @ rx) * (ry @ ry))
    return math.nan if den == 0 else float(rx @ ry / den)


class TestSpearman:
    def test_examples(self):
        assert spearman([1, 2, 3], [1, 2, 3]) == 1.0
        assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
        assert spearman([3, 1, 2], [1, 2, 3]) == pytest.approx(-0.5, abs=1e-15)

    def test_constant_is_nan(self):
        assert math.isnan(spearman([1, 1, 1], [1, 2, 3]))

    def test_errors(self):
        with pytest.raises(ValueError):
            spearman([1], [1])
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])

    def test_exhaustive_permutations(self):
        for n in range(2, 6):
            base = list(range(n))
            for perm in itertools.permutations(base):
                assert spearman(perm, base) == pytest.approx(brute_spearman(perm, base), abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 3), min_size=n, max_size=n),
        st.lists(st.integers(0, 3), min_size=n, max_size=n))))
    def test_ties_against_brute_force(self, xy):
        x, y = xy
        want = brute_spearman(x, y)
        got = spearman(x, y)
        if math.isnan(want):
            assert math.isnan(got)
        else:
            assert got == pytest.approx(want, abs=1e-12)
            assert -1.0 <= got <= 1.0


class TestAuc:
    def test_constant(self):
        assert auc_trapezoid([0.1, 0.4, 0.9], [0.3, 0.3, 0.3]) == pytest.approx(0.3)

    def test_linear(self):
        g = np.linspace(0.05, 0.95, 19)
        assert auc_trapezoid(g, 2.0 - 3.0 * g) == pytest.approx((2.0 - 0.15 + 2.0 - 2.85) / 2)

    def test_hand_example(self):
        assert auc_trapezoid([0.25, 0.5, 0.75], [0, 1, 0]) == pytest.approx(0.5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            auc_trapezoid([0.1, 0.2], [1.0])


GRID = (0.25, 0.5, 0.75)
LADDER = (0.0, 0.5, 1.0)
# hand-built table: family -> side -> p -> values over GRID
TABLE = {
    "ffid": {
        MORF: {0.0: [0.6, 0.8, 0.6], 0.5: [0.4, 0.5, 0.3], 1.0: [0.2, 0.1, 0.3]},
        LERF: {0.0: [0.1, 0.1, 0.1], 0.5: [0.2, 0.3, 0.2], 1.0: [0.5, 0.4, 0.6]},
    },
    "fid": {
        MORF: {0.0: [0.5] * 3, 0.5: [0.6] * 3, 1.0: [0.4] * 3},
        LERF: {0.0: [0.2] * 3, 0.5: [0.2] * 3, 1.0: [0.2] * 3},
    },
}


def hand_sweep(transform=lambda v: v):
    sweep = SweepResult(GRID, LADDER)
    for fam, sides in TABLE.items():
        for side, rows in sides.items():
            for p, vals in rows.items():
                for rho, v in zip(GRID, vals):
                    sweep.put((fam, side, p, rho), transform(v))
    return sweep


class TestCorrelationReport:
    def test_hand_fixture(self):
        # AUCs worked by hand: ffid MoRF (.7, .425, .175), LeRF (.1, .25, .475);
        # fid MoRF (.5, .6, .4), fid LeRF constant
        rep = correlation_report(hand_sweep())
        assert rep.macro["ffid"] == {"MoRF vs GT": -1.0, "LeRF vs GT": 1.0, "MoRF vs LeRF": -1.0}
        assert rep.macro["fid"]["MoRF vs GT"] == pytest.approx(-0.5)
        assert math.isnan(rep.macro["fid"]["LeRF vs GT"])
        # at rho=.75 MoRF values (.6, .3, .3) tie: correlation -3/(2*sqrt(3))
        np.testing.assert_allclose(rep.micro["ffid"]["MoRF vs GT"], [-1.0, -1.0, -math.sqrt(3) / 2])
        assert rep.micro_mean("ffid", "MoRF vs GT") == pytest.approx((-2 - math.sqrt(3) / 2) / 3)
        assert rep.micro_mean("fid", "MoRF vs GT") == pytest.approx(-0.5)
        assert rep.micro_undefined("fid", "LeRF vs GT") == 3
        assert rep.micro_rank["ffid"] == {"MoRF vs GT": 1.0, "LeRF vs GT": 1.0, "MoRF vs LeRF": 1.0}
        assert rep.micro_rank["fid"] == {"MoRF vs GT": 2.0, "LeRF vs GT": 2.0, "MoRF vs LeRF": 2.0}
        doc = rep.to_dict()
        assert doc["families"]["fid"]["macro"]["LeRF vs GT"] is None
        assert doc["desired"]["MoRF vs GT"] == -1.0

    def test_monotone_rescaling_invariance(self):
        a = correlation_report(hand_sweep()).to_dict()
        b = correlation_report(hand_sweep(lambda v: math.exp(3 * v) - 7)).to_dict()
        # micro correlations are rank based; macro AUCs are not, but their order is kept here
        for fam in a["families"]:
            assert a["families"][fam]["micro"] == pytest.approx(b["families"][fam]["micro"])
            assert a["families"][fam]["micro_rank"] == b["families"][fam]["micro_rank"]

    def test_morf_lerf_identity(self):
        rep = correlation_report(hand_sweep())
        for k in range(len(GRID)):
            if rep.micro["ffid"]["MoRF vs GT"][k] == -1.0 and rep.micro["ffid"]["LeRF vs GT"][k] == 1.0:
                assert rep.micro["ffid"]["MoRF vs LeRF"][k] == pytest.approx(-1.0)

    def test_noise_independent_values(self):
        sweep = SweepResult(GRID, LADDER)
        for side in (MORF, LERF):
            for p in LADDER:
                for rho in GRID:
                    sweep.put(("ffid", side, p, rho), rho)
        rep = correlation_report(sweep)
        assert all(math.isnan(v) for v in rep.macro["ffid"].values())
        assert all(math.isnan(v) for c in rep.micro["ffid"].values() for v in c)

    def test_single_explainer(self):
        sweep = SweepResult(GRID, (0.0,))
        for side in (MORF, LERF):
            for rho in GRID:
                sweep.put(("ffid", side, 0.0, rho), 0.5)
        rep = correlation_report(sweep)
        assert all(math.isnan(v) for v in rep.macro["ffid"].values())

    def test_aggregate(self):
        reps = [correlation_report(hand_sweep()), correlation_report(hand_sweep())]
        agg = aggregate_reports(reps)
        cell = agg["families"]["ffid"]["macro"]["MoRF vs GT"]
        assert cell == {"mean": -1.0, "std": 0.0, "defined": 2}
        assert agg["families"]["fid"]["macro"]["LeRF vs GT"]["defined"] == 0
        with pytest.raises(ValueError):
            aggregate_reports([])


class TestDegradationExperiment:
    def test_small_run(self, digit_setup):
        ev = digit_setup["eval"].subset(range(40))
        sweep = run_degradation_experiment(
            digit_setup["model"], digit_setup["model_r"], ev, get_explainer("saliency"),
            NoiseLadder((0.0, 0.5, 1.0)), MetricConfig(T=3), families=("fid", "rfid", "ffid"), grid=GRID)
        assert set(sweep.families) == {"fid", "rfid", "ffid"}
        assert len(sweep.values) == 3 * 2 * 3 * 3
        assert all(sweep.reps[k] == 3 for k in sweep.values if k[0] != "fid")
        rows = sweep.rows()
        assert set(rows[0]) == {"family", "side", "noise_p", "rho", "seed", "value"}

    def test_single_ladder_step_undefined(self, digit_setup):
        ev = digit_setup["eval"].subset(range(20))
        sweep = run_degradation_experiment(
            digit_setup["model"], digit_setup["model_r"], ev, get_explainer("saliency"),
            NoiseLadder((0.0,)), MetricConfig(T=2), families=("fid",), grid=GRID)
        rep = correlation_report(sweep)
        assert all(math.isnan(v) for v in rep.macro["fid"].values())

    def test_roar_family(self, digit_setup):
        tr = digit_setup["train"].subset(range(200))
        ev = digit_setup["eval"].subset(range(40))
        sweep = run_degradation_experiment(
            digit_setup["model"], digit_setup["model_r"], ev, get_explainer("saliency"),
            NoiseLadder((0.0, 1.0)), MetricConfig(T=2), families=("roar",), grid=(0.5,),
            train_data=tr, train_cfg=TrainConfig(epochs=1))
        assert len(sweep.values) == 4

    def test_roar_needs_training_data(self, digit_setup):
        with pytest.raises(ValueError):
            run_degradation_experiment(
                digit_setup["model"], digit_setup["model_r"], digit_setup["eval"].subset(range(5)),
                get_explainer("saliency"), NoiseLadder(), MetricConfig(T=1), families=("roar",))

    def test_unknown_family(self, digit_setup):
        with pytest.raises(ValueError):
            run_degradation_experiment(
                digit_setup["model"], digit_setup["model_r"], digit_setup["eval"].subset(range(5)),
                get_explainer("saliency"), NoiseLadder(), MetricConfig(T=1), families=("lime",))


class TestTieredDataset:
    def test_single_tier_constant_scores(self):
        world = TieredClassifier(TierSpec((6,)), linear_g((1.0,), (6,)))
        _, scores, _ = gen_tiered_dataset(world, 5, 0)
        assert np.unique(scores).size == 1

    def test_planted_topk_is_tier_one(self):
        sizes = (3, 4, 5)
        world = TieredClassifier(TierSpec(sizes), linear_g((1.0, 0.5, 0.2), sizes))
        data, scores, oracle = gen_tiered_dataset(world, 10, 1)
        top = topk_mask(scores, 3)
        np.testing.assert_array_equal(top, data.inputs == 3.0)
        np.testing.assert_array_equal(oracle.counts(data.inputs)[0], [3, 4, 5])

    def test_label_rate(self):
        sizes = (3, 4)
        world = TieredClassifier(TierSpec(sizes), logistic_g((1.0, 0.5), sizes, steepness=2.0, midpoint=0.7))
        n = 4000
        data, _, oracle = gen_tiered_dataset(world, n, 2)
        p = float(world.g(np.array(sizes)))
        rate = accuracy(oracle, data.inputs, data.labels)
        # the oracle always predicts class 0 here since p > 0.5
        assert p > 0.5
        assert abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_shape_must_fit(self):
        world = TieredClassifier(TierSpec((2, 2)), linear_g((1.0, 0.5), (2, 2)))
        with pytest.raises(ValueError):
            gen_tiered_dataset(world, 2, 0, shape=(3, 1))


class TestGammaDigit:
    def test_foreground_count(self):
        task = GammaDigitTask(gamma=0.1)
        data = gen_gamma_digit_dataset(task, 30, 0)
        assert task.foreground_count == 26
        np.testing.assert_array_equal(data.meta["foreground"].reshape(30, -1).sum(axis=1), 26)
        assert (data.inputs[data.meta["foreground"]] == 1.0).all()

    @pytest.mark.parametrize("gamma", [0.1, 0.15, 0.2, 0.25])
    def test_all_gammas_fit(self, gamma):
        data = gen_gamma_digit_dataset(GammaDigitTask(gamma=gamma), 8, 0)
        counts = data.meta["foreground"].reshape(8, -1).sum(axis=1)
        assert (counts == round(gamma * 256)).all()

    def test_glyph_too_large(self):
        with pytest.raises(ValueError):
            gen_gamma_digit_dataset(GammaDigitTask(gamma=0.9), 2, 0)

    def test_trained_accuracy(self, digit_setup):
        ev = digit_setup["eval"]
        assert accuracy(digit_setup["model"], ev.inputs, ev.labels) >= 0.95

    def test_background_masking(self, digit_setup):
        ev, model_r = digit_setup["eval"], digit_setup["model_r"]
        fg = ev.meta["foreground"]
        same = model_r.predict_label(ev.inputs * fg) == model_r.predict_label(ev.inputs)
        assert same.mean() >= 0.95

    def test_planted_scores(self, digit_setup):
        ev = digit_setup["eval"]
        fg = ev.meta["foreground"]
        s = planted_foreground_scores(ev, 0)
        assert s[fg].min() >= 1.0 and s[~fg].max() < 0.5
        np.testing.assert_array_equal(planted_foreground_scores(ev, None), fg.astype(float))
        k = digit_setup["task"].foreground_count
        np.testing.assert_array_equal(topk_mask(s, k), fg)

    def test_ffid_plus_curve(self, digit_setup):
        ev = digit_setup["eval"].subset(range(30))
        s, e, se = ffid_plus_curve(digit_setup["model_r"], ev, planted_foreground_scores(ev), 0.5, 0.1,
                                   [1, 20, 51], T=5)
        np.testing.assert_array_equal(s, [1, 20, 51])
        assert e.shape == se.shape == (3,) and (se >= 0).all()
        with pytest.raises(ValueError):
            ffid_plus_curve(digit_setup["model_r"], ev, planted_foreground_scores(ev), 0.5, 0.1, [0], T=2)
