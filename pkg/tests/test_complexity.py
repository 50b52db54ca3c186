"""Analytic cost formulas against hand arithmetic and the instrumented forward pass."""
import csv
import io
from fractions import Fraction

import numpy as np
import pytest

from stt import complexity as X
from stt import config as C
from stt import model as M
from stt import tensor as T

from conftest import REFERENCE_CONFIGS


def measured(cfg, batch=2):
    params = M.init_parameters(cfg, 0, np.float32)
    images = np.random.default_rng(0).standard_normal(
        (batch, cfg.in_channels, cfg.image_height, cfg.image_width)).astype(np.float32)
    with T.count_ops() as counter:
        M.forward(images, params, cfg)
    return counter


class TestFormulas:
    def test_msa_784(self):
        assert X.msa_cost(784, 384, 8).score_entries == 4_917_248

    def test_msa_single_token(self):
        c = X.msa_cost(1, 384, 8)
        assert c.score_entries == 8
        assert c.macs == 4 * 384 ** 2 + 2 * 384

    def test_msa_quadratic(self):
        assert X.msa_cost(100, 16, 4).score_entries * 4 == X.msa_cost(200, 16, 4).score_entries

    def test_msa_heads_divide(self):
        with pytest.raises(ValueError):
            X.msa_cost(10, 10, 3)

    def test_wmsa_784(self):
        c = X.wmsa_cost(784, 7, 384, 8)
        assert c.score_entries == 8 * 16 * 50 * 50 == 40_000 * 8
        assert c == X.msa_cost(50, 384, 8).scaled(16)

    def test_wmsa_single_window(self):
        assert X.wmsa_cost(49, 7, 32, 4) == X.msa_cost(50, 32, 4)

    def test_wmsa_linear_in_n(self):
        assert X.wmsa_cost(1568, 7, 32, 4).score_entries == 2 * X.wmsa_cost(784, 7, 32, 4).score_entries

    def test_wmsa_divisibility(self):
        with pytest.raises(ValueError):
            X.wmsa_cost(50, 7, 32, 4)

    def test_stm_channel_mix(self):
        full = X.stm_cost(16, 384)
        token_mix = 2 * 384 * 16 * 16
        assert full.macs - token_mix == 2_359_296
        assert full.score_entries == 0

    def test_stm_single_token(self):
        assert X.stm_cost(1, 384).macs - X.stm_cost(1, 384, hidden=0).macs == 2 * 384 * 192
        assert X.stm_cost(1, 384, hidden=0).macs == 2 * 384

    def test_stm_channel_mix_linear(self):
        token = lambda ns: 2 * 64 * ns * ns  # noqa: E731
        assert (X.stm_cost(8, 64).macs - token(8)) == 2 * (X.stm_cost(4, 64).macs - token(4))

    def test_conv_mixer(self):
        assert X.conv_mixer_cost(16, 32, 3).macs == 16 * 32 * 32 * 9


class TestScalingLaws:
    SWEEP = (196, 784, 3136)

    def test_wmsa_line_through_origin(self):
        entries = [X.wmsa_cost(n, 7, 384, 8).score_entries for n in self.SWEEP]
        slopes = {Fraction(e, n) for e, n in zip(entries, self.SWEEP)}
        assert slopes == {Fraction(8 * 50 * 50, 49)}
        # least-squares fit through the origin has zero residual, so R^2 = 1
        n = np.array(self.SWEEP, dtype=float)
        e = np.array(entries, dtype=float)
        k = (n @ e) / (n @ n)
        assert np.abs(e - k * n).max() == 0.0

    def test_global_quadratic(self):
        entries = [X.msa_cost(n, 384, 8).score_entries for n in self.SWEEP]
        assert all(Fraction(e, n * n) == 8 for e, n in zip(entries, self.SWEEP))

    def test_layer_ratio_exact(self):
        report = X.model_cost_report(C.preset("stt-s25"))
        assert Fraction(report.config["wmsa_entries_per_layer"], report.config["global_entries_per_layer"]) \
            == Fraction(40_000, 614_656)
        assert report.layer_score_ratio == pytest.approx(0.0651, abs=5e-5)


class TestReport:
    def test_class_layer_entries(self):
        report = X.model_cost_report(C.preset("stt-s25"))
        assert report.components["class.1"].score_entries == 8 * 17 ** 2
        assert report.config["Ns"] == 16 and report.config["N"] == 784

    def test_none_is_stm_minus_mixers(self):
        stm = X.model_cost_report(C.preset("stt-s25"))
        none = X.model_cost_report(C.preset("stt-s25", mixer="NONE"))
        mixers = sum((c for k, c in stm.components.items() if k.startswith("mixer.")), X.Cost())
        assert none.total + mixers == stm.total
        assert not any(k.startswith("mixer.") for k in none.components)

    @pytest.mark.parametrize("name", ["stt-s25", "desk", "tiny"])
    def test_params_match_store(self, name):
        cfg = C.preset(name)
        assert X.model_cost_report(cfg).total.params == M.init_parameters(cfg, 0).num_elements()

    @pytest.mark.parametrize("mixer", ["STM", "MSA", "CONV2", "CONV3", "NONE"])
    def test_additive_and_nonnegative(self, mixer):
        report = X.model_cost_report(C.preset("desk", mixer=mixer))
        for _, macs, scores, params in report.rows():
            assert min(macs, scores, params) >= 0
            assert all(isinstance(v, int) for v in (macs, scores, params))
        t = report.total
        assert t.macs == sum(c.macs for c in report.components.values())

    def test_baseline_is_more_expensive_at_784(self):
        assert X.model_cost_report(C.preset("stt-s25")).mac_ratio > 1.0

    def test_csv(self):
        text = X.model_cost_report(C.preset("tiny")).to_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["component", "macs", "score_entries", "params"]
        names = [r[0] for r in rows[1:]]
        assert names[0] == "stem" and "total" in names and names[-1] == "baseline.total"

    def test_table_mentions_ratio(self):
        text = X.model_cost_report(C.preset("stt-s25")).to_table()
        assert "320,000/4,917,248" in text  # 40,000 h / 614,656 h at h = 8
        assert "N=784 Ns=16 M=7 D=384 h=8 L=25" in text


class TestInstrumented:
    @pytest.mark.parametrize("name", sorted(REFERENCE_CONFIGS))
    def test_totals_match(self, name):
        cfg = REFERENCE_CONFIGS[name]
        counter = measured(cfg, batch=2)
        report = X.model_cost_report(cfg)
        assert counter.total_macs == 2 * report.total.macs
        assert counter.total_score_entries == 2 * report.total.score_entries

    @pytest.mark.parametrize("name", sorted(REFERENCE_CONFIGS))
    def test_per_component(self, name):
        cfg = REFERENCE_CONFIGS[name]
        counter = measured(cfg, batch=1)
        for comp, cost in X.model_cost_report(cfg).components.items():
            macs, scores = counter.by_prefix(comp) if comp != "embeddings" else (0, 0)
            assert (macs, scores) == (cost.macs, cost.score_entries), comp

    @pytest.mark.parametrize("mixer", ["CONV2", "CONV3", "NONE"])
    def test_other_mixers(self, mixer):
        cfg = C.preset("tiny", mixer=mixer)
        counter = measured(cfg, batch=1)
        assert counter.total_macs == X.model_cost_report(cfg).total.macs

    def test_baseline_forward(self):
        cfg = C.preset("tiny")
        params = M.init_baseline_parameters(cfg, 0)
        image = np.zeros((3, 32, 32), np.float32)
        with T.count_ops() as counter:
            M.baseline_forward(image, params, cfg)
        base = X.model_cost_report(cfg).baseline_total
        assert counter.total_macs == base.macs
        assert counter.total_score_entries == base.score_entries
        assert params.num_elements() == base.params
