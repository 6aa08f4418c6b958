from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cost import DeviceProfile
from game import GameState, allocate, closed_form_best_response, evaluate_budget
from model_graph import total_flops
from partition import build_latency_graph, min_cut
from simulation import (
    METHODS,
    ScenarioConfig,
    ScenarioError,
    compare,
    convergence_frame,
    convergence_study,
    load_scenario,
    local_mode_settled,
    parse_scenario,
    price_settled,
    run_baseline,
    run_dds,
    sample_devices,
    scenario_text,
    server_profile,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

# Small fleet on the smallest catalog graph; enough rounds to exercise the loop
QUICK = ScenarioConfig(device_count=3, models=("VGG11",), max_iters=5, seed=3)


@pytest.fixture
def twin_fleet(chain):
    """Identical slow devices on a fast link; each always offloads its whole chain."""
    model = chain([1e9, 1e9, 1e9], [1e5, 1e5])

    def build(n):
        return [DeviceProfile(id=f"d{k}", compute=1e8, bandwidth=1e8, model=model) for k in range(n)]

    return build


def test_parse_scenario():
    cfg = parse_scenario("device_count = 5  # small\nmodels = VGG11, ViT\ngamma = auto\nbandwidth_mbps = 6\n")
    assert cfg.device_count == 5
    assert cfg.models == ("VGG11", "ViT")
    assert cfg.gamma is None
    assert cfg.bandwidth_mbps == (6.0, 6.0)
    assert cfg.server_tflops == 1.2


def test_parse_scenario_on_top_of_base():
    cfg = parse_scenario("gamma = 1e-12\n", base=QUICK)
    assert cfg.gamma == 1e-12
    assert cfg.device_count == 3


@pytest.mark.parametrize(
    "text, message",
    [
        ("device_count = 5\nfoo = 1\n", "line 2: unknown key 'foo'"),
        ("device_count = many\n", "bad value for 'device_count'"),
        ("device_count\n", "line 1: expected"),
        ("bandwidth_mbps = 10,5\n", "bandwidth_mbps range"),
        ("models = LeNet\n", "Unknown models"),
        ("schedule = lottery\n", "schedule must be one of"),
        ("device_count = 0\n", "at least 1"),
    ],
)
def test_parse_scenario_errors(text, message):
    with pytest.raises(ScenarioError, match=message):
        parse_scenario(text)


def test_default_scenario_file_matches_defaults():
    assert load_scenario(str(SCENARIOS / "default.txt")) == ScenarioConfig()


def test_load_scenario_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="No such scenario file"):
        load_scenario(str(tmp_path / "nope.txt"))


def test_scenario_text_reloads():
    cfg = replace(QUICK, gamma=2.5e-12, schedule="round-robin")
    assert parse_scenario(scenario_text(cfg)) == cfg


def test_fleet_is_prefix_consistent():
    small = sample_devices(replace(QUICK, models=("VGG11", "ViT"), device_count=3))
    large = sample_devices(replace(QUICK, models=("VGG11", "ViT"), device_count=10))
    assert small == large[:3]


def test_fleet_respects_ranges():
    cfg = replace(QUICK, device_count=50, models=("VGG11", "ViT"))
    for dev in sample_devices(cfg):
        assert 5 * 125_000 <= dev.bandwidth <= 10 * 125_000
        assert 10e9 <= dev.compute <= 20e9
        assert dev.model.name in cfg.models


def test_price_settled():
    assert not price_settled([1.0, 2.0, 3.0], 5, 1e-3)
    assert price_settled([2.0] * 6, 5, 1e-3)
    assert not price_settled([2.0] * 5 + [2.01], 5, 1e-3)
    # Below a price of one the tolerance is absolute
    assert price_settled([0.0] * 5 + [5e-4], 5, 1e-3)


def test_eo_latency_independent_of_fleet_size():
    two = run_baseline(replace(QUICK, device_count=2), "EO")
    five = run_baseline(replace(QUICK, device_count=5), "EO")
    for a, b in zip(two.devices, five.devices):
        assert a.breakdown == b.breakdown
        assert a.breakdown.t_total == pytest.approx(total_flops(a.strategy.model) / a.compute)
        assert a.breakdown.t_net == a.breakdown.t_server == 0


def test_so_server_time_grows_linearly():
    two = run_baseline(replace(QUICK, device_count=2), "SO")
    four = run_baseline(replace(QUICK, device_count=4), "SO")
    for a, b in zip(two.devices, four.devices):
        assert b.breakdown.t_server == pytest.approx(2 * a.breakdown.t_server)
        assert a.g == pytest.approx(QUICK.capacity / 2)


def test_dads_single_device_matches_pinned_budget():
    cfg = replace(QUICK, device_count=1)
    run = run_baseline(cfg, "DADS")
    (dev,) = sample_devices(cfg)
    srv = server_profile(cfg)

    value, strategy = min_cut(build_latency_graph(dev.model, dev, srv.capacity))
    assert run.devices[0].strategy == strategy
    assert run.devices[0].breakdown.t_total == pytest.approx(value)

    # A device bidding all of S at a price of one sees the same allocation
    _, pinned = evaluate_budget(dev, srv, srv.capacity, 1.0, 1e-12)
    assert pinned == strategy


def test_unknown_baseline():
    with pytest.raises(ScenarioError, match="Unknown baseline"):
        run_baseline(QUICK, "DDS")


def test_run_dds_identical_devices_agree(twin_fleet):
    cfg = ScenarioConfig(
        device_count=4,
        gamma=1e-14,
        a0_fraction=0.01,
        schedule="round-robin",
        epsilon=1e-9,
        max_iters=300,
    )
    run = run_dds(cfg, devices=twin_fleet(4))
    assert run.converged
    budgets = [d.a for d in run.devices]
    assert budgets == pytest.approx([budgets[0]] * 4, rel=1e-6)
    assert all(d.strategy.server_set == frozenset({"v1", "v2", "v3"}) for d in run.devices)


def test_run_dds_single_device_reaches_best_response(twin_fleet):
    cfg = ScenarioConfig(device_count=1, gamma=1e-14, max_iters=200)
    (dev,) = twin_fleet(1)
    run = run_dds(cfg, devices=[dev])
    assert run.converged
    a = run.devices[0].a
    expected = closed_form_best_response(total_flops(dev.model), run.final_price, cfg.gamma)
    assert abs(a - expected) <= 1e-2 * cfg.capacity


def test_run_dds_series_lengths():
    run = run_dds(QUICK)
    assert 1 <= run.rounds <= QUICK.max_iters
    assert len(run.prices) == run.rounds + 1
    assert len(run.tracked_prices) == run.rounds
    assert len(run.trace) == run.rounds * QUICK.device_count
    assert run.converged == (run.convergence_round is not None)


def test_run_dds_is_deterministic():
    first = run_dds(QUICK)
    second = run_dds(QUICK)
    pd.testing.assert_frame_equal(first.trace_frame(), second.trace_frame())
    pd.testing.assert_frame_equal(first.devices_frame(), second.devices_frame())
    assert first.prices == second.prices


def test_run_dds_reports_non_convergence(capsys):
    run = run_dds(replace(QUICK, max_iters=1))
    assert not run.converged
    assert run.rounds == 1
    assert capsys.readouterr().out == ""

    run_dds(replace(QUICK, max_iters=1), verbose=True)
    assert "did not settle" in capsys.readouterr().out


def test_local_mode_settled():
    bidding = GameState(a=5.0)
    assert local_mode_settled([bidding], 2.0, 1e-3)
    assert not local_mode_settled([bidding, GameState(a=0.0)], 2.0, 1e-3)
    assert local_mode_settled([GameState(a=0.0, sniff_price=2.0005)], 2.0, 1e-3)
    assert not local_mode_settled([GameState(a=0.0, sniff_price=1.9)], 2.0, 1e-3)


def test_run_dds_waits_for_local_devices_to_sniff(twin_fleet):
    # Opening bids are too small to beat local execution, so every device drops
    # out in the first round and the board sits at zero until they sniff
    cfg = ScenarioConfig(device_count=4, gamma=1e-14, a0_fraction=1e-5, schedule="round-robin", max_iters=300)
    run = run_dds(cfg, devices=twin_fleet(4))
    assert run.prices[1] == 0.0
    assert run.converged
    assert run.convergence_round > cfg.sniff_period
    assert run.final_price > 0
    assert all(d.a > 0 for d in run.devices)


def test_run_dds_permuted_fleet_permutes_results(chain):
    devices = [
        DeviceProfile(id=f"d{k}", compute=1e8, bandwidth=1e8, model=chain([f] * 3, [1e5, 1e5], name=f"chain{k}"))
        for k, f in enumerate([1e9, 2e9, 4e9])
    ]
    cfg = ScenarioConfig(device_count=3, gamma=1e-13, a0_fraction=0.01, schedule="round-robin",
                         epsilon=1e-7, max_iters=300)

    forward = run_dds(cfg, devices=devices)
    backward = run_dds(cfg, devices=devices[::-1])
    assert forward.converged and backward.converged

    by_id = {d.device_id: d for d in backward.devices}
    for d in forward.devices:
        other = by_id[d.device_id]
        assert other.a == pytest.approx(d.a, rel=1e-4)
        assert other.strategy.server_set == d.strategy.server_set
        # Below a price of one each device settles on its own best response
        assert d.a == pytest.approx(closed_form_best_response(total_flops(d.strategy.model), 1.0, cfg.gamma), rel=1e-3)


def test_run_dds_budgets_stay_in_range():
    run = run_dds(QUICK)
    frame = run.trace_frame()
    assert frame["a"].between(0, QUICK.capacity).all()
    # Every device reports once per round, so a round's rows are the board after it
    for t, rows in frame.groupby("iteration"):
        granted = sum(allocate(a, run.prices[t]) for a in rows["a"])
        assert granted <= QUICK.capacity * (1 + 1e-12)


def test_summary_aggregates_device_rows():
    run = run_baseline(QUICK, "DADS")
    summary = run.summary()
    assert list(summary) == ["method", "N", "mean_T", "mean_Ts", "mean_Tt", "mean_Tl", "converged", "iters"]
    assert summary["mean_T"] == pytest.approx(run.devices_frame()["T"].mean())
    assert summary["mean_T"] == pytest.approx(summary["mean_Ts"] + summary["mean_Tt"] + summary["mean_Tl"])


def test_compare_rows():
    frame, dds_runs = compare(QUICK, [2, 3])
    assert len(frame) == 8
    assert list(frame["method"]) == list(METHODS) * 2
    assert list(frame["N"]) == [2] * 4 + [3] * 4
    assert sorted(dds_runs) == [2, 3]


def test_convergence_frame_columns():
    runs = convergence_study(QUICK, [0.0, 0.05])
    frame = convergence_frame(runs)
    assert list(frame.columns) == ["a0_fraction", "iteration", "A_observed", "A"]
    assert set(frame["a0_fraction"]) == {0.0, 0.05}
    assert runs[0.05].prices[0] == pytest.approx(0.05 * QUICK.device_count)


@pytest.mark.slow
def test_fleet_converges_to_common_price():
    cfg = ScenarioConfig()
    runs = convergence_study(cfg, [0.0, 0.01, 0.05, 0.1])
    finals = [run.final_price for run in runs.values()]
    for run in runs.values():
        assert run.converged
        assert run.convergence_round <= 50
    assert max(finals) <= min(finals) * 1.02

    # Starting from nothing the price climbs; starting high it falls
    assert runs[0.0].prices[1] >= runs[0.0].prices[0]
    assert runs[0.1].prices[1] < runs[0.1].prices[0]


@pytest.mark.slow
def test_scaling_against_baselines():
    frame, dds_runs = compare(ScenarioConfig(), [5, 25, 50, 100])
    by_method = {m: frame[frame["method"] == m].set_index("N") for m in METHODS}

    # Fleets are prefixes of one another, so the mean model size drifts with N
    mean_flops = {n: np.mean([total_flops(d.strategy.model) for d in run.devices]) for n, run in dds_runs.items()}
    so = by_method["SO"]["mean_Ts"]
    for n in (25, 50, 100):
        expected = (n / 5) * mean_flops[n] / mean_flops[5]
        assert so[n] / so[5] == pytest.approx(expected, rel=0.1)

    ratio = by_method["DDS"]["mean_T"] / by_method["DADS"]["mean_T"]
    assert (ratio <= 1 + 1e-9).all()
    assert ratio[100] <= 0.95

    dads_net = by_method["DADS"]["mean_Tt"]
    assert dads_net[100] < 0.05 * dads_net[5]
    assert dds_runs[100].server_flop_share > 0
