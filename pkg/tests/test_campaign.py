"""Sample sizing, campaign determinism and report files."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import nets
import oracles
from qnnharden.analysis import analyze
from qnnharden.campaign import (
    DEFAULT_THRESHOLDS,
    FAULT,
    VARIANTS,
    CampaignConfig,
    _draw,
    check_report,
    run_campaign,
    sample_size,
    write_report,
)
from qnnharden.data import Dataset, blobs2d
from qnnharden.faultsim import SPLIT_LCU, TMR_VOTE, UNPROTECTED


@pytest.mark.parametrize("space,expected", [(22528, 6734), (37472, 7645), (1, 1), (8, 8)])
def test_sample_size_examples(space, expected):
    assert sample_size(space) == expected


@given(st.integers(1, 10**6))
def test_sample_size_matches_reference_and_bounds(space):
    n = sample_size(space)
    assert 1 <= n <= space
    assert abs(n - oracles.sample_size(space)) <= 1  # the reference uses a 4-digit quantile


def test_sample_size_validation():
    with pytest.raises(ValueError):
        sample_size(0)
    with pytest.raises(ValueError):
        CampaignConfig(confidence=1.0)
    with pytest.raises(ValueError):
        CampaignConfig(accounting="bogus")
    with pytest.raises(ValueError):
        CampaignConfig(nvf_thresholds=(0.1, 1.5))


def _toy():
    net, x = nets.toy_2884()
    test = blobs2d("test", seed=3, n_per_class=15)
    return net, analyze(net, x), test


def test_campaign_is_deterministic_and_consistent():
    net, profile, test = _toy()
    cfg = CampaignConfig(seed=7, margin=0.05, nvf_thresholds=(0.0, 0.1, 0.3))
    a, b = run_campaign(net, profile, test, cfg), run_campaign(net, profile, test, cfg)
    assert a.rows == b.rows
    assert check_report(a) == []
    assert len(a.rows) == 3 * len(VARIANTS)


def test_campaign_worker_count_does_not_change_results():
    net, profile, test = _toy()
    cfg = CampaignConfig(seed=1, margin=0.05, nvf_thresholds=(0.0, 0.15))
    serial = run_campaign(net, profile, test, cfg)
    parallel = run_campaign(net, profile, test, CampaignConfig(seed=1, margin=0.05, nvf_thresholds=(0.0, 0.15), workers=2))
    assert serial.rows == parallel.rows


def test_empty_threshold_list_gives_header_only_files(tmp_path):
    net, profile, test = _toy()
    report = run_campaign(net, profile, test, CampaignConfig(nvf_thresholds=()))
    assert report.rows == []
    for path in write_report(report, tmp_path):
        with open(path) as fh:
            assert len(fh.read().splitlines()) == 1


def test_empty_test_set_rejected():
    net, profile, _ = _toy()
    with pytest.raises(ValueError):
        run_campaign(net, profile, Dataset(np.zeros((0, 2)), np.zeros(0, int), "test", 4))


def test_threshold_above_max_leaves_variants_unchanged():
    net, profile, test = _toy()
    t = min(1.0, profile.max_nvf + 1e-6)
    report = run_campaign(net, profile, test, CampaignConfig(margin=0.05, nvf_thresholds=(t,)))
    counts = {v: report.get(v, t).neuron_count for v in VARIANTS}
    assert counts[UNPROTECTED] == counts[SPLIT_LCU] == counts[TMR_VOTE] == net.neuron_count


def test_threshold_zero_size_law():
    net, profile, test = _toy()
    report = run_campaign(net, profile, test, CampaignConfig(margin=0.05, nvf_thresholds=(0.0,)))
    n = net.neuron_count
    assert report.get(SPLIT_LCU, 0.0).neuron_count == 2 * n
    assert report.get(TMR_VOTE, 0.0).neuron_count == 3 * n


def test_exhaustive_split_beats_unprotected_on_toy():
    net, profile, test = _toy()
    cfg = CampaignConfig(exhaustive=True, nvf_thresholds=(0.0, 0.1, 0.2))
    report = run_campaign(net, profile, test, cfg)
    assert check_report(report) == []
    for t in cfg.nvf_thresholds:
        u, s = report.get(UNPROTECTED, t), report.get(SPLIT_LCU, t)
        assert s.sample_size == s.faults_enumerated
        assert s.critical_fault_fraction <= u.critical_fault_fraction


def test_fault_accounting_alternative():
    net, profile, test = _toy()
    report = run_campaign(net, profile, test, CampaignConfig(exhaustive=True, nvf_thresholds=(0.1,), accounting=FAULT))
    assert check_report(report) == []
    for r in report.rows:
        assert r.critical_fault_fraction == r.faults_with_flips / r.sample_size


def test_draw_is_uniform_without_replacement():
    """Chi-square on the pooled draws of many seeds over a small fault space."""
    space, n, seeds = 40, 20, 400
    hits = np.zeros(space)
    for seed in range(seeds):
        idx = _draw(CampaignConfig(seed=seed, margin=0.2), 0, 0, space)
        assert len(idx) == len(set(idx.tolist()))
        hits[idx] += 1
    k = len(_draw(CampaignConfig(seed=0, margin=0.2), 0, 0, space))
    assert k <= n
    expected = seeds * k / space
    chi2 = float(((hits - expected) ** 2 / expected).sum())
    assert chi2 < 72.0  # 39 degrees of freedom, p ~ 0.001


def test_draws_differ_by_variant_and_threshold():
    cfg = CampaignConfig(seed=3, margin=0.2)
    a, b, c = _draw(cfg, 0, 0, 500), _draw(cfg, 1, 0, 500), _draw(cfg, 0, 1, 500)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(a, _draw(cfg, 0, 0, 500))


def test_check_report_flags_tampering():
    net, profile, test = _toy()
    report = run_campaign(net, profile, test, CampaignConfig(margin=0.1, nvf_thresholds=(0.1,)))
    row = report.rows[0]
    report.rows[0] = type(row)(**{**row.__dict__, "accuracy_loss": row.accuracy_loss + 0.5})
    assert any("accuracy_loss" in p for p in check_report(report))


def test_report_files(tmp_path):
    net, profile, test = _toy()
    report = run_campaign(net, profile, test, CampaignConfig(margin=0.1))
    paths = write_report(report, tmp_path)
    names = [p.rsplit("/", 1)[-1] for p in paths]
    assert names == ["acc_loss.csv", "critical_faults.csv", "neuron_counts.csv", "criticality.csv"]
    with open(paths[0]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["NVF", "Unprotected", "Proposed", "TMR"]
    assert [r[0] for r in rows[1:]] == [str(5 * i) for i in range(11)]
    for (t, vals), r in zip(report.table("accuracy_loss"), rows[1:]):
        for v, cell in zip(VARIANTS, r[1:]):
            assert math.isclose(float(cell), 100 * vals[v], rel_tol=1e-5, abs_tol=1e-9)
    with open(paths[2]) as fh:
        counts = list(csv.DictReader(fh))
    assert int(counts[0]["TMR"]) == 3 * net.neuron_count
    with open(paths[3]) as fh:
        crit = list(csv.DictReader(fh))
    assert [int(r["neurons"]) for r in crit] == [report.get(TMR_VOTE, t).protected_neurons for t in DEFAULT_THRESHOLDS]
