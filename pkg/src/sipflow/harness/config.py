"""Experiment configuration: one strict JSON document per run.

Unknown keys are rejected (a typo should fail loudly, not silently fall
back to a default). ``--paper-parity`` swaps in the full-scale budgets;
every shipped desk-scale value that is not traceable to a published
setting is listed in the summary under non_paper_parameters.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..discrepancy import DiscrepancySpec, GaussianKernel
from ..ensemble import GaussianMixtureSpec
from ..flow import FlowConfig
from ..forward import ImageSpec

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "config_hash"]

EXPERIMENTS = ("onedim", "nanocluster", "toyprotein", "mapdto", "diagnostics")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def _require_keys(obj: dict, allowed: set, required: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"missing key(s) {sorted(missing)} in {where}")


def _mixture(obj: dict, where: str) -> GaussianMixtureSpec:
    _require_keys(obj, {"components"}, {"components"}, where)
    comps = []
    for i, comp in enumerate(obj["components"]):
        _require_keys(comp, {"weight", "mean", "cov"}, {"weight", "mean", "cov"}, f"{where}.components[{i}]")
        comps.append((comp["weight"], comp["mean"], comp["cov"]))
    try:
        return GaussianMixtureSpec(tuple(comps))
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from err


_FLOW_KEYS = {
    "particles",
    "iterations",
    "learning_rate",
    "adam",
    "optimizer",
    "mc_strategy",
    "snapshot_every",
    "minibatch",
    "data_dtype",
}

_DEFAULT_FLOW = {
    "particles": 1000,
    "iterations": 1000,
    "learning_rate": 0.01,
    "adam": [0.9, 0.999, 1e-8],
    "optimizer": "adam",
    "mc_strategy": "joint#1",
    "snapshot_every": 500,
    "minibatch": None,
    "data_dtype": "float64",
}


def _flow_config(obj: dict, seed: int, where: str) -> FlowConfig:
    _require_keys(obj, _FLOW_KEYS, set(), where)
    merged = {**_DEFAULT_FLOW, **obj}
    try:
        return FlowConfig(
            iterations=int(merged["iterations"]),
            learning_rate=merged["learning_rate"],
            adam=tuple(merged["adam"]),
            optimizer=merged["optimizer"],
            mc_strategy=merged["mc_strategy"],
            seed=seed,
            snapshot_every=int(merged["snapshot_every"]),
            minibatch=None if merged["minibatch"] is None else int(merged["minibatch"]),
            particles=None if merged["particles"] is None else int(merged["particles"]),
            data_dtype=merged["data_dtype"],
        )
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from err


def _image_spec(obj: dict, where: str) -> ImageSpec:
    _require_keys(obj, {"side", "extent", "kernel_width"}, {"side", "extent", "kernel_width"}, where)
    try:
        return ImageSpec(side=int(obj["side"]), extent=float(obj["extent"]), kernel_width=float(obj["kernel_width"]))
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    output_dir: str
    paper_parity: bool
    observed_count: int
    noise_sigma: float
    raw: dict
    true_mixture: GaussianMixtureSpec | None = None
    init_mixture: GaussianMixtureSpec | None = None
    flow: FlowConfig | None = None
    discrepancy_kind: str = "energy"
    mmd_lengthscale: float | None = None
    kl_bandwidth: float | None = None
    image: ImageSpec | None = None
    protein: dict = field(default_factory=dict)
    map_settings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)
    non_paper_parameters: list = field(default_factory=list)

    def discrepancy_spec(self, kl_bandwidth: float | None = None) -> DiscrepancySpec:
        """Instantiate the configured discrepancy; KL needs the bandwidth
        resolved (from config override or Silverman on observed data)."""
        if self.discrepancy_kind == "energy":
            return DiscrepancySpec(kind="energy")
        if self.discrepancy_kind == "mmd":
            return DiscrepancySpec(kind="mmd", kernel=GaussianKernel(self.mmd_lengthscale))
        bandwidth = kl_bandwidth if kl_bandwidth is not None else self.kl_bandwidth
        if bandwidth is None:
            raise ConfigError("kl bandwidth unresolved; pass the Silverman value")
        return DiscrepancySpec(kind="kl", kde_bandwidth=bandwidth)


_TOP_KEYS = {
    "experiment",
    "seed",
    "output_dir",
    "paper_parity",
    "observed_count",
    "noise_sigma",
    "true_mixture",
    "init_mixture",
    "discrepancy",
    "flow",
    "image",
    "protein",
    "map",
    "diagnostics",
    "compare",
    "non_paper_parameters",
}

_PROTEIN_KEYS = {
    "model_seed",
    "atom_count",
    "mode_count",
    "mode_scales",
    "radius",
    "truth_bimodal_means",
    "truth_bimodal_std",
    "truth_gauss_std",
    "init_uniform",
    "pca_fixed_rotation",
}

_MAP_KEYS = {"k", "sigma", "lambda", "rotation_count", "rotation_seed", "prior_scale", "iterations", "learning_rate", "init_scale"}

_DIAG_KEYS = {
    "n_schedule",
    "k_schedule",
    "seeds",
    "observed_count",
    "opt_iterations",
    "opt_learning_rate",
    "mc_n",
    "mc_k",
    "mc_replicates",
}

_COMPARE_KEYS = {"sigma_schedule", "threshold", "budget", "check_every", "losses"}


def parse_config(doc: dict, source: str = "<config>") -> ExperimentConfig:
    _require_keys(doc, _TOP_KEYS, {"experiment", "seed", "output_dir"}, source)
    experiment = doc["experiment"]
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    seed = int(doc["seed"])
    if seed < 0:
        raise ConfigError("seed must be a nonnegative integer")

    disc = doc.get("discrepancy", {"kind": "energy"})
    _require_keys(disc, {"kind", "kernel", "bandwidth"}, {"kind"}, f"{source}.discrepancy")
    kind = disc["kind"]
    if kind not in ("energy", "mmd", "kl"):
        raise ConfigError(f"discrepancy.kind must be energy, mmd, or kl, got {kind!r}")
    lengthscale = None
    if kind == "mmd":
        kernel = disc.get("kernel")
        if not kernel:
            raise ConfigError("discrepancy.kernel required for mmd")
        _require_keys(kernel, {"type", "lengthscale"}, {"type", "lengthscale"}, f"{source}.discrepancy.kernel")
        if kernel["type"] != "gaussian":
            raise ConfigError("only the gaussian mmd kernel is configurable")
        lengthscale = float(kernel["lengthscale"])

    cfg = ExperimentConfig(
        experiment=experiment,
        seed=seed,
        output_dir=doc["output_dir"],
        paper_parity=bool(doc.get("paper_parity", False)),
        observed_count=int(doc.get("observed_count", 1000)),
        noise_sigma=float(doc.get("noise_sigma", 1.0)),
        raw=copy.deepcopy(doc),
        discrepancy_kind=kind,
        mmd_lengthscale=lengthscale,
        kl_bandwidth=None if disc.get("bandwidth") is None else float(disc["bandwidth"]),
        non_paper_parameters=list(doc.get("non_paper_parameters", [])),
    )
    if cfg.observed_count < 1:
        raise ConfigError("observed_count must be >= 1")
    if cfg.noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")

    if "true_mixture" in doc:
        cfg.true_mixture = _mixture(doc["true_mixture"], f"{source}.true_mixture")
    if "init_mixture" in doc:
        cfg.init_mixture = _mixture(doc["init_mixture"], f"{source}.init_mixture")
    if "flow" in doc:
        cfg.flow = _flow_config(doc["flow"], seed, f"{source}.flow")
    if "image" in doc:
        cfg.image = _image_spec(doc["image"], f"{source}.image")
    if "protein" in doc:
        _require_keys(doc["protein"], _PROTEIN_KEYS, set(), f"{source}.protein")
        cfg.protein = dict(doc["protein"])
    if "map" in doc:
        _require_keys(doc["map"], _MAP_KEYS, set(), f"{source}.map")
        cfg.map_settings = dict(doc["map"])
    if "diagnostics" in doc:
        _require_keys(doc["diagnostics"], _DIAG_KEYS, set(), f"{source}.diagnostics")
        cfg.diagnostics = dict(doc["diagnostics"])
    if "compare" in doc:
        _require_keys(doc["compare"], _COMPARE_KEYS, set(), f"{source}.compare")
        cfg.compare = dict(doc["compare"])

    _validate_experiment(cfg, source)
    return cfg


def _validate_experiment(cfg: ExperimentConfig, source: str) -> None:
    needs_flow = cfg.experiment in ("onedim", "nanocluster", "toyprotein")
    if needs_flow and cfg.flow is None:
        raise ConfigError(f"{source}: experiment {cfg.experiment!r} requires a flow section")
    if cfg.experiment in ("onedim", "nanocluster", "mapdto", "diagnostics") and cfg.true_mixture is None:
        raise ConfigError(f"{source}: experiment {cfg.experiment!r} requires true_mixture")
    if cfg.experiment in ("onedim", "nanocluster") and cfg.init_mixture is None:
        raise ConfigError(f"{source}: experiment {cfg.experiment!r} requires init_mixture")
    if cfg.experiment in ("nanocluster", "toyprotein") and cfg.image is None:
        raise ConfigError(f"{source}: experiment {cfg.experiment!r} requires an image section")
    if cfg.experiment == "mapdto" and not cfg.map_settings:
        raise ConfigError(f"{source}: experiment mapdto requires a map section")
    dims = {"onedim": 1, "nanocluster": 2}
    if cfg.experiment in dims and cfg.true_mixture is not None:
        if cfg.true_mixture.dim != dims[cfg.experiment]:
            raise ConfigError(f"{source}: {cfg.experiment} needs dim-{dims[cfg.experiment]} mixtures")


# Full-scale overrides applied by --paper-parity, per experiment.
PARITY_OVERRIDES = {
    "onedim": {"observed_count": 10000, "flow": {"particles": 10000, "iterations": 25000}},
    "nanocluster": {"observed_count": 1000, "image": {"side": 128}, "flow": {"particles": 1000, "iterations": 3000}},
    "toyprotein": {"observed_count": 3000, "image": {"side": 128}, "flow": {"iterations": 90000}},
}


def apply_paper_parity(doc: dict) -> dict:
    doc = copy.deepcopy(doc)
    overrides = PARITY_OVERRIDES.get(doc.get("experiment"), {})
    for key, value in overrides.items():
        if isinstance(value, dict):
            doc.setdefault(key, {})
            doc[key].update(value)
        else:
            doc[key] = value
    doc["paper_parity"] = True
    return doc


def load_config(path, seed_override: int | None = None, out_override: str | None = None, paper_parity: bool = False) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    if paper_parity:
        doc = apply_paper_parity(doc)
    if seed_override is not None:
        doc["seed"] = int(seed_override)
    if out_override is not None:
        doc["output_dir"] = str(out_override)
    return parse_config(doc, source=str(path))


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def config_hash(doc: dict) -> str:
    """Stable under key reordering: hash of the sorted-key JSON dump."""
    blob = json.dumps(_canonical(doc), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
