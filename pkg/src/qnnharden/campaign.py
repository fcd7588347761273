"""Statistical fault-injection campaigns over an NVF threshold sweep.

For every threshold the critical neurons are protected two ways (split +
LCU, and selective TMR) and each of the three variants gets its own fault
campaign: a uniform sample without replacement from its fault space
(neurons x 8 bits), sized for the requested confidence and margin, each
fault evaluated over the whole test set.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional

import numpy as np

from .analysis import VulnerabilityProfile, select_critical
from .data import Dataset
from .faultsim import SPLIT_LCU, TMR_VOTE, UNPROTECTED, FaultEvaluator, VariantUnderTest
from .network import QNetwork
from .transform import evenize, split_neurons, triplicate_neurons

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(11))
VARIANTS = (UNPROTECTED, SPLIT_LCU, TMR_VOTE)
COLUMN_NAMES = {UNPROTECTED: "Unprotected", SPLIT_LCU: "Proposed", TMR_VOTE: "TMR"}
PAIR = "pair"
FAULT = "fault"


@dataclass(frozen=True)
class CampaignConfig:
    confidence: float = 0.95
    margin: float = 0.01
    p_estimate: float = 0.5
    seed: int = 0
    nvf_thresholds: tuple = DEFAULT_THRESHOLDS
    exhaustive: bool = False
    accounting: str = PAIR
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if not 0 < self.margin < 1:
            raise ValueError("margin must lie in (0, 1)")
        if not 0 < self.p_estimate < 1:
            raise ValueError("p_estimate must lie in (0, 1)")
        if self.accounting not in (PAIR, FAULT):
            raise ValueError("accounting must be 'pair' or 'fault'")
        for t in self.nvf_thresholds:
            if not 0 <= t <= 1:
                raise ValueError(f"threshold {t} outside [0, 1]")
        object.__setattr__(self, "nvf_thresholds", tuple(float(t) for t in self.nvf_thresholds))
        object.__setattr__(self, "workers", max(1, int(self.workers)))


def sample_size(fault_space: int, config: Optional[CampaignConfig] = None) -> int:
    """Faults to inject for the configured confidence and margin.

    ``n = N / (1 + e^2 (N - 1) / (t^2 p (1 - p)))``, rounded up, with ``t``
    the two-sided normal quantile.
    """
    config = config or CampaignConfig()
    n_pop = int(fault_space)
    if n_pop < 1:
        raise ValueError("fault space must be at least 1")
    t = NormalDist().inv_cdf(1 - (1 - config.confidence) / 2)
    p = config.p_estimate
    n = n_pop / (1 + config.margin**2 * (n_pop - 1) / (t * t * p * (1 - p)))
    return min(n_pop, math.ceil(n))


@dataclass(frozen=True)
class CampaignRow:
    variant: str
    threshold: float
    baseline_accuracy: float
    mean_faulty_accuracy: float
    accuracy_loss: float
    critical_fault_fraction: float
    neuron_count: int
    protected_neurons: int
    sample_size: int
    faults_enumerated: int
    total_correct: int
    total_flips: int
    faults_with_flips: int
    test_size: int


@dataclass
class CampaignReport:
    config: CampaignConfig
    source_neurons: int
    rows: list = field(default_factory=list)

    def get(self, variant: str, threshold: float) -> CampaignRow:
        for r in self.rows:
            if r.variant == variant and math.isclose(r.threshold, threshold, abs_tol=1e-12):
                return r
        raise KeyError((variant, threshold))

    def table(self, metric: str) -> list:
        """``[(threshold, {variant: value})]`` in threshold order."""
        out = []
        for t in self.config.nvf_thresholds:
            out.append((t, {v: getattr(self.get(v, t), metric) for v in VARIANTS}))
        return out


def build_variants(source: QNetwork, profile: VulnerabilityProfile, threshold: float) -> dict:
    critical = select_critical(profile, threshold)
    split = split_neurons(evenize(source, critical), critical)
    tmr = triplicate_neurons(source, critical)
    return {
        UNPROTECTED: VariantUnderTest.unprotected(source),
        SPLIT_LCU: VariantUnderTest.from_protected(split),
        TMR_VOTE: VariantUnderTest.from_protected(tmr),
    }


def _eval_chunk(args):
    variant, x, labels, indices = args
    ev = FaultEvaluator(variant, x, labels)
    return [ev.evaluate_counts(variant.fault_at(int(i))) for i in indices]


def _draw(config: CampaignConfig, variant_idx: int, threshold_idx: int, space: int) -> np.ndarray:
    if config.exhaustive:
        return np.arange(space)
    n = sample_size(space, config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, variant_idx, threshold_idx]))
    return np.sort(rng.choice(space, size=n, replace=False))


def run_campaign(
    source_net: QNetwork, profile: VulnerabilityProfile, test_set: Dataset, config: Optional[CampaignConfig] = None
) -> CampaignReport:
    from .analysis import analysis_inputs

    config = config or CampaignConfig()
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    x = analysis_inputs(source_net, test_set)
    labels = test_set.labels

    jobs = []  # (threshold_idx, variant, kind, indices)
    for ti, t in enumerate(config.nvf_thresholds):
        variants = build_variants(source_net, profile, t)
        for vi, kind in enumerate(VARIANTS):
            v = variants[kind]
            jobs.append((ti, kind, v, _draw(config, vi, ti, v.fault_space)))

    chunks = []
    n_chunks = config.workers * 4 if config.workers > 1 else 1
    for j, (_, _, v, idx) in enumerate(jobs):
        for part in np.array_split(idx, min(n_chunks, max(1, len(idx)))):
            chunks.append((j, (v, x, labels, part)))
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_eval_chunk, [c[1] for c in chunks]))
    else:
        results = [_eval_chunk(c[1]) for c in chunks]

    per_job: dict = {j: [] for j in range(len(jobs))}
    for (j, _), res in zip(chunks, results):
        per_job[j].extend(res)

    report = CampaignReport(config, source_net.neuron_count)
    n_test = len(x)
    for j, (ti, kind, v, idx) in enumerate(jobs):
        counts = np.array(per_job[j], dtype=np.int64).reshape(-1, 2)
        n = len(idx)
        base = FaultEvaluator(v, x, labels).baseline_correct / n_test
        total_correct, total_flips = int(counts[:, 0].sum()), int(counts[:, 1].sum())
        with_flips = int(np.count_nonzero(counts[:, 1]))
        mean_acc = total_correct / (n * n_test)
        if config.accounting == PAIR:
            cff = total_flips / (n * n_test)
        else:
            cff = with_flips / n
        report.rows.append(
            CampaignRow(
                variant=kind,
                threshold=config.nvf_thresholds[ti],
                baseline_accuracy=base,
                mean_faulty_accuracy=mean_acc,
                accuracy_loss=base - mean_acc,
                critical_fault_fraction=cff,
                neuron_count=v.neuron_count,
                protected_neurons=len(v.plan) if v.plan is not None else 0,
                sample_size=n,
                faults_enumerated=v.fault_space,
                total_correct=total_correct,
                total_flips=total_flips,
                faults_with_flips=with_flips,
                test_size=n_test,
            )
        )
    return report


def check_report(report: CampaignReport) -> list:
    """Internal consistency checks; returns a list of failure messages."""
    problems = []
    cfg = report.config
    for r in report.rows:
        tag = f"{r.variant}@{r.threshold:g}"
        if not (0 <= r.critical_fault_fraction <= 1 and 0 <= r.mean_faulty_accuracy <= 1):
            problems.append(f"{tag}: fraction outside [0, 1]")
        if not math.isclose(r.accuracy_loss, r.baseline_accuracy - r.mean_faulty_accuracy, abs_tol=1e-12):
            problems.append(f"{tag}: accuracy_loss != baseline - mean faulty accuracy")
        denom = r.sample_size * r.test_size
        expected = r.total_flips / denom if cfg.accounting == PAIR else r.faults_with_flips / r.sample_size
        if not math.isclose(r.critical_fault_fraction, expected, abs_tol=1e-12):
            problems.append(f"{tag}: critical fault fraction inconsistent with flip counts")
        if r.sample_size > r.faults_enumerated or r.faults_enumerated != 8 * r.neuron_count:
            problems.append(f"{tag}: fault space / sample size mismatch")
    for t in cfg.nvf_thresholds:
        try:
            u, s, m = (report.get(v, t) for v in VARIANTS)
        except KeyError:
            problems.append(f"missing rows for threshold {t:g}")
            continue
        if 2 * (s.neuron_count - u.neuron_count) != m.neuron_count - u.neuron_count:
            problems.append(f"threshold {t:g}: split overhead is not half the TMR overhead")
    for v in VARIANTS:
        counts = [report.get(v, t).neuron_count for t in sorted(cfg.nvf_thresholds)]
        if any(b > a for a, b in zip(counts, counts[1:])):
            problems.append(f"{v}: neuron count increases with threshold")
    return problems


# --- report files -----------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{x:.6g}"


def _nvf_label(t: float) -> str:
    return _fmt(round(t * 100, 6))


def write_report(report: CampaignReport, out_dir, plots: bool = False) -> list:
    """Write ``acc_loss.csv``, ``critical_faults.csv``, ``neuron_counts.csv``
    and ``criticality.csv`` (optionally SVG line charts); returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    header = ["NVF"] + [COLUMN_NAMES[v] for v in VARIANTS]
    specs = [
        ("acc_loss.csv", lambda r: 100.0 * r.accuracy_loss),
        ("critical_faults.csv", lambda r: 100.0 * r.critical_fault_fraction),
        ("neuron_counts.csv", lambda r: r.neuron_count),
    ]
    paths = []
    for name, value in specs:
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t in report.config.nvf_thresholds:
                w.writerow([_nvf_label(t)] + [_fmt(value(report.get(v, t))) for v in VARIANTS])
        paths.append(path)

    path = os.path.join(out_dir, "criticality.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["NVF", "neurons", "portion"])
        for t in report.config.nvf_thresholds:
            k = report.get(TMR_VOTE, t).protected_neurons
            w.writerow([_nvf_label(t), k, _fmt(100.0 * k / report.source_neurons)])
    paths.append(path)

    if plots:
        paths.extend(_write_plots(out_dir, [p for p in paths[:3]]))
    return paths


def _write_plots(out_dir, csv_paths) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = {"acc_loss.csv": "Accuracy Loss (%)", "critical_faults.csv": "Critical Faults (%)",
              "neuron_counts.csv": "#Neurons"}
    out = []
    for path in csv_paths:
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(4, 3))
        xs = [float(r["NVF"]) for r in rows]
        for col, marker in (("Unprotected", "s"), ("Proposed", "o"), ("TMR", "^")):
            ax.plot(xs, [float(r[col]) for r in rows], marker=marker, label=col)
        ax.set_xlabel("NVF (%)")
        ax.set_ylabel(labels[os.path.basename(path)])
        ax.grid(True, linestyle="--", alpha=0.5)
        ax.legend(fontsize=7)
        fig.tight_layout()
        svg = path[:-4] + ".svg"
        fig.savefig(svg, format="svg", metadata={"Date": None})
        plt.close(fig)
        out.append(svg)
    return out
