import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiresnet.config import ConfigError, parse_config
from multiresnet.parallel import (
    CalibrationError,
    CostModel,
    SimScenario,
    Strategy,
    calibrate,
    effective_samples,
    read_reference_csv,
    reference_observations,
    residuals,
    simulate_step,
    speedup,
    speedup_markdown,
    speedup_table,
)

IDEAL = CostModel(t_fn=1e-4, t_fixed=0.0, bandwidth=math.inf, latency=0.0, warp=32)


class TestEffectiveSamples:
    @pytest.mark.parametrize("b,warp,expected", [(32, 32, 32), (16, 32, 32), (33, 32, 64), (1, 1, 1), (5, 4, 8)])
    def test_values(self, b, warp, expected):
        assert effective_samples(b, warp) == expected

    def test_invalid(self):
        with pytest.raises(ValueError):
            effective_samples(0, 32)

    @given(st.integers(1, 10_000), st.integers(1, 128))
    def test_idempotent_and_monotone(self, b, warp):
        e = effective_samples(b, warp)
        assert effective_samples(e, warp) == e
        assert e >= b and e % warp == 0
        assert effective_samples(b + 1, warp) >= e


class TestScenario:
    def test_model_needs_divisible_k(self):
        with pytest.raises(ValueError, match="divisible"):
            SimScenario(110, 1, 32, 2, "model")
        with pytest.raises(ValueError, match="divisible"):
            SimScenario(110, 3, 32, 2, "model")

    def test_hybrid_needs_even(self):
        with pytest.raises(ValueError, match="even"):
            SimScenario(110, 2, 32, 3, "hybrid")

    def test_depth_checked(self):
        with pytest.raises(ValueError, match="6n\\+2"):
            SimScenario(111, 1, 32)

    def test_groups(self):
        assert (SimScenario(110, 2, 32, 4, "data").groups, SimScenario(110, 2, 32, 4, "data").split) == (4, 1)
        assert (SimScenario(110, 2, 32, 2, "model").groups, SimScenario(110, 2, 32, 2, "model").split) == (1, 2)
        assert (SimScenario(110, 2, 32, 4, "hybrid").groups, SimScenario(110, 2, 32, 4, "hybrid").split) == (2, 2)

    def test_conv_layers_pairing(self):
        assert SimScenario(218, 1, 32).conv_layers == SimScenario(110, 2, 32, strategy="model").conv_layers

    def test_config_roundtrip(self):
        s = SimScenario(110, 4, 64, 4, "hybrid")
        text = "".join(f"{k} = {v}\n" for k, v in s.to_config().items())
        assert SimScenario.from_config(parse_config(text)) == s

    def test_config_missing_key(self):
        with pytest.raises(ConfigError, match="depth"):
            SimScenario.from_config({"k": "1", "batch_size": "3"})


class TestSimulate:
    def test_hand_computed_model_step(self):
        cost = CostModel(t_fn=2e-6, t_fixed=0.01, bandwidth=1e9, latency=1e-5, warp=32, bytes_per_value=4)
        s = SimScenario(8, 2, 48, 2, "model")
        # 3 blocks, one function per worker, 48 samples billed as 64
        compute = 2e-6 * 3 * 1 * 64
        # block I/O values per sample at 32x32: 16*1024 + 16*1024, 16*1024 + 32*256, 32*256 + 64*64
        io = 32768 + 24576 + 12288
        transfer = 6 * 1e-5 + io * 48 * 4 / 1e9
        r = simulate_step(s, cost)
        assert r.compute == pytest.approx(compute)
        assert r.transfer == pytest.approx(transfer)
        assert r.step_time == pytest.approx(compute + transfer + 0.01)

    def test_data_step_all_reduce(self):
        from multiresnet.model import NetworkConfig, count_config_parameters

        cost = CostModel(t_fn=1e-6, t_fixed=0.0, bandwidth=2e9, latency=1e-4, warp=1)
        s = SimScenario(20, 1, 30, 2, "data")
        params = count_config_parameters(NetworkConfig.from_depth(20, 1))
        r = simulate_step(s, cost)
        assert r.compute == pytest.approx(1e-6 * 9 * 15)
        assert r.transfer == pytest.approx(1e-4 + params * 4 / 2e9)

    def test_single_worker_has_no_transfer(self):
        r = simulate_step(SimScenario(20, 1, 32, 1, "data"), CostModel())
        assert r.transfer == 0.0

    def test_ideal_model_split_halves_compute(self):
        one = simulate_step(SimScenario(110, 2, 64, 1, "data"), IDEAL)
        two = simulate_step(SimScenario(110, 2, 64, 2, "model"), IDEAL)
        assert two.compute == pytest.approx(one.compute / 2)
        assert two.transfer == 0.0

    @pytest.mark.parametrize("batch", [2, 32, 50, 128])
    def test_ideal_data_and_model_agree(self, batch):
        ideal = CostModel(t_fn=1e-4, t_fixed=0.0, bandwidth=math.inf, latency=0.0, warp=1)
        data = simulate_step(SimScenario(110, 2, batch, 2, "data"), ideal)
        model = simulate_step(SimScenario(110, 2, batch, 2, "model"), ideal)
        assert data.step_time == pytest.approx(model.step_time)

    def test_bandwidth_and_latency_monotone(self):
        s = SimScenario(110, 4, 32, 2, "model")
        times = [simulate_step(s, CostModel(bandwidth=b)).step_time for b in (1e8, 1e9, 1e10, math.inf)]
        assert times == sorted(times, reverse=True)
        times = [simulate_step(s, CostModel(latency=l)).step_time for l in (0, 1e-5, 1e-4)]
        assert times == sorted(times)

    def test_pure(self):
        s = SimScenario(110, 4, 32, 4, "hybrid")
        assert simulate_step(s, CostModel()) == simulate_step(s, CostModel())

    def test_hybrid_is_pairwise_model_split(self):
        cost = CostModel(t_fn=1e-5, latency=1e-5, bandwidth=1e10)
        h = simulate_step(SimScenario(110, 2, 64, 4, "hybrid"), cost)
        m = simulate_step(SimScenario(110, 2, 32, 2, "model"), cost)
        assert h.compute == pytest.approx(m.compute)
        assert h.transfer > m.transfer  # plus one all-reduce between the pairs

    def test_bottleneck_functions_cost_more(self):
        basic = simulate_step(SimScenario(56, 1, 32, 1), IDEAL)
        bottleneck = simulate_step(SimScenario(83, 1, 32, 1, block_kind="bottleneck"), IDEAL)
        # both have 27 blocks; a bottleneck function has three convolutions instead of two
        assert bottleneck.compute == pytest.approx(1.5 * basic.compute)


def synthetic_observations(cost):
    scenarios = [
        SimScenario(20, 1, 32, 1, "data"),
        SimScenario(56, 1, 128, 2, "data"),
        SimScenario(110, 2, 64, 2, "model"),
        SimScenario(20, 4, 16, 2, "model"),
        SimScenario(44, 2, 96, 4, "hybrid"),
        SimScenario(218, 1, 32, 2, "data"),
    ]
    return [(s, simulate_step(s, cost).step_time) for s in scenarios]


class TestCalibrate:
    def test_recovers_known_model(self):
        truth = CostModel(t_fn=3e-5, t_fixed=0.02, bandwidth=8e9, latency=4e-5)
        fit = calibrate(synthetic_observations(truth), CostModel())
        for name in ("t_fn", "t_fixed", "bandwidth", "latency"):
            assert getattr(fit, name) == pytest.approx(getattr(truth, name), rel=0.01), name

    def test_identical_observations_rejected(self):
        obs = synthetic_observations(CostModel())[:1] * 2
        with pytest.raises(CalibrationError, match="not identifiable"):
            calibrate(obs)

    def test_names_unidentifiable_parameter(self):
        # single-worker runs never transfer: latency and bandwidth cannot be seen
        obs = [(SimScenario(d, 1, b, 1, "data"), 0.1 * i) for i, (d, b) in enumerate([(20, 32), (56, 64), (110, 128), (44, 16)], 1)]
        with pytest.raises(CalibrationError, match="latency, inv_bandwidth"):
            calibrate(obs)

    def test_non_negative(self):
        obs = [(s, t * (1 + 0.3 * (-1) ** i)) for i, (s, t) in enumerate(synthetic_observations(CostModel()))]
        fit = calibrate(obs)
        assert min(fit.t_fn, fit.t_fixed, fit.latency) >= 0
        assert fit.bandwidth > 0

    def test_residuals_zero_on_exact_data(self):
        truth = CostModel(t_fn=3e-5, t_fixed=0.02, bandwidth=8e9, latency=4e-5)
        obs = synthetic_observations(truth)
        assert max(abs(r) for r in residuals(obs, calibrate(obs))) < 1e-6


class TestSpeedup:
    def test_definition(self):
        assert speedup(100.0, 100.0) == 0.0
        assert speedup(100.0, 85.0) == pytest.approx(0.15)

    def test_pairing(self):
        rows = speedup_table([SimScenario(218, 1, 32), SimScenario(110, 2, 32, 2, "model")], CostModel())
        assert len(rows) == 1
        assert rows[0].base.scenario.depth == 218

    def test_unpaired_rejected(self):
        with pytest.raises(ValueError, match="unpaired"):
            speedup_table([SimScenario(218, 1, 32), SimScenario(110, 4, 32, 2, "model")], CostModel())
        with pytest.raises(ValueError, match="unpaired"):
            speedup_table([SimScenario(218, 1, 32)], CostModel())

    def test_scale_invariance(self):
        scen = [SimScenario(434, 1, 32), SimScenario(110, 4, 32, 2, "model")]
        cost = CostModel(t_fn=2e-5, t_fixed=0.01, bandwidth=1e10, latency=2e-5)
        a = speedup_table(scen, cost)[0].speedup
        b = speedup_table(scen, cost.scaled(7.5))[0].speedup
        assert a == pytest.approx(b, rel=1e-12)

    def test_markdown_columns(self):
        rows = speedup_table([SimScenario(218, 1, 32), SimScenario(110, 2, 32, 2, "model")], CostModel())
        md = speedup_markdown(rows).splitlines()
        assert md[0] == "| depth | k | time | depth | k | time | batch | speedup |"
        assert md[2].startswith("| 218 | 1 |")


class TestReferenceFixture:
    def test_rows(self):
        rows = read_reference_csv()
        assert [(r.base_depth, r.multi_k, r.batch) for r in rows] == [
            (218, 2, 128), (434, 4, 128), (650, 6, 128), (218, 2, 32), (434, 4, 32), (650, 6, 32)
        ]
        assert [r.speedup_pct for r in rows] == [None, 4, 10, 1, 13, 15]

    def test_published_speedups_follow_time_saved(self):
        # the published percentages agree with 1 - t_multi/t_base, rounded
        for r in read_reference_csv()[1:]:
            assert round(100 * speedup(r.base_ms, r.multi_ms)) == r.speedup_pct

    def test_observations(self):
        obs = reference_observations(read_reference_csv(), 128)
        assert len(obs) == 6
        assert obs[0][0].strategy is Strategy.DATA and obs[1][0].strategy is Strategy.MODEL
        assert obs[0][1] == pytest.approx(0.413)

    def test_calibrated_trends(self):
        rows = read_reference_csv()
        cost = calibrate(reference_observations(rows, 128))
        table = speedup_table([s for r in rows for s in (r.base, r.multi)], cost)
        small = [t.speedup for t in table if t.base.scenario.batch_size == 32]
        assert small == sorted(small)
        assert table[0].speedup <= 1e-9  # batch 128, k = 2: no gain
