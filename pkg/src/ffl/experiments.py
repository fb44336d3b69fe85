"""Multi-seed comparisons of training variants on one dataset."""

import copy
from dataclasses import dataclass, field

import numpy as np

from .data import load_dataset
from .trainer import train


@dataclass
class SweepResult:
    """Final metrics per variant and seed."""

    seeds: list
    records: dict = field(default_factory=dict)  # variant -> [MetricsRecord per seed]

    def values(self, variant, metric):
        """Per-seed values; ``metric`` is ``fused``, ``ensemble``, ``branch`` (mean) or ``single``."""
        out = []
        for r in self.records[variant]:
            if metric == "fused":
                out.append(r.fused_err)
            elif metric == "ensemble":
                out.append(r.ensemble_err)
            elif metric == "branch":
                out.append(r.mean_branch_err)
            elif metric == "single":
                out.append(r.branch_err[0])
            else:
                raise KeyError(metric)
        return out

    def mean(self, variant, metric):
        return float(np.mean(self.values(variant, metric)))

    def table(self):
        lines = ["variant    " + " ".join(f"seed{s:<4d}" for s in self.seeds) + "  mean"]
        for name, recs in self.records.items():
            metric = "fused" if recs[0].fused_err is not None else "single"
            vals = self.values(name, metric)
            lines.append(f"{name:<10s} " + " ".join(f"{v:8.2f}" for v in vals) + f"  {np.mean(vals):6.2f} ({metric})")
            if metric == "fused":
                vals = self.values(name, "branch")
                lines.append(f"{'':<10s} " + " ".join(f"{v:8.2f}" for v in vals) + f"  {np.mean(vals):6.2f} (branch)")
        return "\n".join(lines)


def seed_sweep(base, variants, seeds, log=None):
    """Train every variant for every seed on datasets built once from ``base``.

    ``variants`` maps a name to a list of ``key=value`` overrides applied to a
    copy of ``base`` together with ``train.seed``.
    """
    train_set = load_dataset(base.dataset_spec("train"))
    test_set = load_dataset(base.dataset_spec("test"))
    result = SweepResult(list(seeds))
    for name, overrides in variants.items():
        result.records[name] = []
        for seed in seeds:
            cfg = copy.deepcopy(base).override([*overrides, f"train.seed={seed}"])
            record = train(cfg, train_set, test_set).final
            result.records[name].append(record)
            if log is not None:
                log(f"{name} seed {seed}: branch {record.branch_err} fused {record.fused_err}")
    return result
