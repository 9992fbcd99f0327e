"""Degradation evaluation protocol: scenario grids, RDP/RGS, ablations.

RDP (robustness degradation percentage) is the relative accuracy loss of a
scenario, 100 * (clean - degraded) / clean; the headline value uses the
dual-dropout scenario (image and point streams missing).  RGS (robustness
gain score) is the RDP difference between a reference and the evaluated
model, in percentage points.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DegradationSpec, apply_degradation
from .training import TrainConfig, evaluate, full_finetune, linear_probe, pretrain

REPORT_VERSION = 1

DROPOUT_SCENARIOS = (
    ("all_three", ()),
    ("r_missing", ("r",)),
    ("s_missing", ("s",)),
    ("p_missing", ("p",)),
    ("rp_missing", ("r", "p")),
)
HEADLINE_SCENARIO = "rp_missing"

SJN_GRID = (0.05, 0.10, 0.15)
PCS_GRID = (0.30, 0.50, 0.70)


def rdp(clean_acc: float, degraded_acc: float) -> float:
    """Relative accuracy degradation in percent of the clean accuracy."""
    if clean_acc <= 0:
        raise ValueError("clean accuracy must be > 0")
    return 100.0 * (clean_acc - degraded_acc) / clean_acc


def rgs(rdp_baseline: float, rdp_method: float) -> float:
    """RDP improvement over a baseline, in percentage points."""
    return rdp_baseline - rdp_method


@dataclass
class ScenarioResult:
    scenario: str
    top1_accuracy: float
    n_eval: int


@dataclass
class RobustnessReport:
    clean: ScenarioResult
    scenarios: list                    # list[ScenarioResult]
    rdp_per_scenario: dict
    rdp_headline: float
    seed: int
    config_digest: str
    rgs_vs_baseline: float = None
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "clean": dataclasses.asdict(self.clean),
            "scenarios": [dataclasses.asdict(s) for s in self.scenarios],
            "rdp": self.rdp_per_scenario,
            "rdp_headline": self.rdp_headline,
            "rgs": self.rgs_vs_baseline,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessReport":
        return cls(
            clean=ScenarioResult(**d["clean"]),
            scenarios=[ScenarioResult(**s) for s in d["scenarios"]],
            rdp_per_scenario=d["rdp"],
            rdp_headline=d["rdp_headline"],
            seed=d["seed"],
            config_digest=d["config_digest"],
            rgs_vs_baseline=d.get("rgs"),
            version=d["version"],
        )


def _eval_scenario(params, test: Dataset, spec: DegradationSpec,
                   force_equal: bool) -> float:
    degraded = apply_degradation(test, spec)
    return evaluate(params, degraded, force_equal=force_equal)


def run_dropout_suite(params, test: Dataset, seed: int,
                      config_digest: str = "", force_equal: bool = False
                      ) -> RobustnessReport:
    """Accuracy and RDP for the five modality-dropout scenarios."""
    if len(test) == 0:
        raise ValueError("test split is empty")
    results = []
    for name, drop in DROPOUT_SCENARIOS:
        if drop:
            spec = DegradationSpec(kind="dropout", drop=drop, seed=seed)
            acc = _eval_scenario(params, test, spec, force_equal)
        else:
            acc = evaluate(params, test, force_equal=force_equal)
        results.append(ScenarioResult(name, acc, len(test)))
    clean = results[0]
    rdp_map = {r.scenario: rdp(clean.top1_accuracy, r.top1_accuracy)
               for r in results[1:]}
    return RobustnessReport(
        clean=clean,
        scenarios=results[1:],
        rdp_per_scenario=rdp_map,
        rdp_headline=rdp_map[HEADLINE_SCENARIO],
        seed=seed,
        config_digest=config_digest,
    )


def run_corruption_suite(params, test: Dataset, seed: int,
                         sjn_grid=SJN_GRID, pcs_grid=PCS_GRID,
                         config_digest: str = "", force_equal: bool = False
                         ) -> RobustnessReport:
    """Accuracy per noise / sparsity grid point plus mean per-scenario RDP."""
    if len(test) == 0:
        raise ValueError("test split is empty")
    if not sjn_grid and not pcs_grid:
        raise ValueError("both corruption grids are empty")
    clean_acc = evaluate(params, test, force_equal=force_equal)
    clean = ScenarioResult("clean", clean_acc, len(test))
    results = []
    for sigma in sjn_grid:
        spec = DegradationSpec(kind="sjn", sigma=sigma, seed=seed)
        results.append(ScenarioResult(
            spec.label(), _eval_scenario(params, test, spec, force_equal),
            len(test)))
    for d in pcs_grid:
        spec = DegradationSpec(kind="pcs", sparsity=d, seed=seed)
        results.append(ScenarioResult(
            spec.label(), _eval_scenario(params, test, spec, force_equal),
            len(test)))
    rdp_map = {r.scenario: rdp(clean_acc, r.top1_accuracy) for r in results}
    # headline here is the plain mean over the grid; the dual-dropout
    # headline lives in the dropout suite
    mean_rdp = float(np.mean(list(rdp_map.values())))
    return RobustnessReport(
        clean=clean,
        scenarios=results,
        rdp_per_scenario=rdp_map,
        rdp_headline=mean_rdp,
        seed=seed,
        config_digest=config_digest,
    )


# ---------------------------------------------------------------------------
# ablation matrix
# ---------------------------------------------------------------------------

ABLATION_CONFIGS = (
    # (row key, pretrained?, lambda overrides, fusion mode, eval protocol)
    ("1_supervised_average", False, {}, "average", "finetune"),
    ("3_cm_only_average", True,
     {"lambda_im": 0.0, "lambda_deg": 0.0, "lambda_fuse": 0.0},
     "average", "probe"),
    ("4_cm_im_average", True,
     {"lambda_deg": 0.0, "lambda_fuse": 0.0}, "average", "probe"),
    ("5_cm_im_deg_average", True,
     {"lambda_fuse": 0.0}, "average", "probe"),
    ("6_cm_im_amg", True, {"lambda_deg": 0.0}, "amg", "probe"),
    ("7_full_rcmcl", True, {}, "amg", "probe"),
)


def run_ablation_row(row_key: str, train: Dataset, test: Dataset,
                     base_cfg: TrainConfig, seed: int) -> dict:
    """Train and evaluate one ablation configuration for one seed."""
    spec = {key: cfg for key, *cfg in
            ((k, p, o, f, e) for k, p, o, f, e in ABLATION_CONFIGS)}[row_key]
    pretrained, overrides, fusion_mode, protocol = spec
    loss = dataclasses.replace(base_cfg.loss, **overrides)
    cfg = dataclasses.replace(base_cfg, loss=loss, fusion_mode=fusion_mode,
                              seed=seed)
    force_equal = fusion_mode == "average"
    if pretrained:
        params, _ = pretrain(train, cfg)
        if protocol == "probe":
            params, _, clean_acc = linear_probe(params, train, test, cfg)
        else:
            params, clean_acc = full_finetune(params, train, test, cfg)
    else:
        from .model import ModelDims, init_params
        dims = ModelDims.from_generator(train.spec, cfg.feature_dim,
                                        cfg.proj_dim, cfg.hidden_dim)
        params, clean_acc = full_finetune(init_params(dims, seed), train,
                                          test, cfg)
    report = run_dropout_suite(params, test, seed, force_equal=force_equal)
    return {
        "config": row_key,
        "seed": seed,
        "clean_acc": clean_acc,
        "rdp_headline": report.rdp_headline,
        "rdp": report.rdp_per_scenario,
    }


def run_ablation_matrix(train: Dataset, test: Dataset, base_cfg: TrainConfig,
                        seeds) -> list:
    """All ablation rows for every seed, plus per-row means.

    Returns a list of row dicts; rows with seed == "mean" aggregate the
    per-seed clean accuracy and headline RDP.
    """
    rows = []
    for key, *_ in ABLATION_CONFIGS:
        per_seed = [run_ablation_row(key, train, test, base_cfg, s)
                    for s in seeds]
        rows.extend(per_seed)
        rows.append({
            "config": key,
            "seed": "mean",
            "clean_acc": float(np.mean([r["clean_acc"] for r in per_seed])),
            "rdp_headline": float(np.mean([r["rdp_headline"]
                                           for r in per_seed])),
            "rdp": {},
        })
    return rows


# ---------------------------------------------------------------------------
# CSV mirrors of the dropout / corruption / ablation tables
# ---------------------------------------------------------------------------

def dropout_csv(report: RobustnessReport) -> str:
    header = ["method"] + [name for name, _ in DROPOUT_SCENARIOS] \
        + ["rdp_headline"]
    accs = {r.scenario: r.top1_accuracy for r in report.scenarios}
    accs["all_three"] = report.clean.top1_accuracy
    row = ["rcmcl"] + [f"{accs[name]:.2f}" for name, _ in DROPOUT_SCENARIOS] \
        + [f"{report.rdp_headline:.2f}"]
    return ",".join(header) + "\n" + ",".join(row) + "\n"


def corruption_csv(report: RobustnessReport) -> str:
    header = ["method", "clean"] + [r.scenario for r in report.scenarios] \
        + ["average_rdp"]
    row = ["rcmcl", f"{report.clean.top1_accuracy:.2f}"] \
        + [f"{r.top1_accuracy:.2f}" for r in report.scenarios] \
        + [f"{report.rdp_headline:.2f}"]
    return ",".join(header) + "\n" + ",".join(row) + "\n"


def ablation_csv(rows) -> str:
    lines = ["config,seed,clean_acc,rdp_headline"]
    for r in rows:
        lines.append(f"{r['config']},{r['seed']},{r['clean_acc']:.2f},"
                     f"{r['rdp_headline']:.2f}")
    return "\n".join(lines) + "\n"
