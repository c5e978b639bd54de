"""Experiment configuration files (TOML).

One file describes one experiment arm::

    [run]
    manifest = "synth/manifest.csv"   # required; relative to this file
    output = "runs/none-fixed"        # required; relative to this file
    mode = "fixed"                    # required; "fixed" or "early-stop"
    n_folds = 10                      # required
    seed = 0                          # required
    label = "none"                    # arm label, defaults to one derived from [augment]
    workers = 1
    epochs = 150                      # fixed mode
    patience = 50                     # early-stop mode
    max_epochs = 1000                 # early-stop ceiling
    batch_size = 16
    lr = 1e-5
    tta_k = 0

    [model]
    conv_channels = [8, 8, 16]
    kernel = 3
    pool_after = [0, 1]
    dense_units = 16

    [augment]
    kind = "compose"
    specs = [{kind = "scale", max_frac = 0.1}, {kind = "elastic", sigma_vox = 2}]

Unknown sections or keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import tomli

from .augment import AugmentSpec, NoAugment, SpecError, spec_from_dict, spec_label, spec_to_dict
from .train import MODES, TrainOptions


class ConfigError(ValueError):
    pass


REQUIRED_RUN_KEYS = ("manifest", "output", "mode", "n_folds", "seed")
OPTIONAL_RUN_KEYS = {
    "label": None,
    "workers": 1,
    "epochs": 150,
    "patience": 50,
    "max_epochs": 1000,
    "batch_size": 16,
    "lr": 1e-5,
    "tta_k": 0,
}
MODEL_KEYS = {"conv_channels", "kernel", "pool_after", "dense_units"}


@dataclass
class RunConfig:
    manifest: Path
    output: Path
    mode: str
    n_folds: int
    seed: int
    augment: AugmentSpec = field(default_factory=NoAugment)
    model: Dict[str, Any] = field(default_factory=dict)
    label: Optional[str] = None
    workers: int = 1
    epochs: int = 150
    patience: int = 50
    max_epochs: int = 1000
    batch_size: int = 16
    lr: float = 1e-5
    tta_k: int = 0

    @property
    def arm_label(self) -> str:
        return self.label or spec_label(self.augment)

    def train_options(self) -> TrainOptions:
        return TrainOptions(
            epochs=self.epochs,
            patience=self.patience,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            workers=self.workers,
            tta_k=self.tta_k,
        )

    def to_dict(self) -> dict:
        """Fully explicit form, suitable for echoing next to results."""
        run = {
            "manifest": str(self.manifest),
            "output": str(self.output),
            "mode": self.mode,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "label": self.arm_label,
        }
        for key in OPTIONAL_RUN_KEYS:
            if key != "label":
                run[key] = getattr(self, key)
        return {"run": run, "model": dict(self.model), "augment": spec_to_dict(self.augment)}


def _check_int(name, value, minimum):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return value


def parse_config(doc: Dict[str, Any], base_dir=".", check_paths: bool = True) -> RunConfig:
    base = Path(base_dir)
    unknown = set(doc) - {"run", "model", "augment"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    run = doc.get("run")
    if not isinstance(run, dict):
        raise ConfigError("missing [run] section")
    unknown = set(run) - set(REQUIRED_RUN_KEYS) - set(OPTIONAL_RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys in [run]: {sorted(unknown)}")
    missing = [k for k in REQUIRED_RUN_KEYS if k not in run]
    if missing:
        raise ConfigError(f"[run] lacks required keys: {missing}")
    if run["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {run['mode']!r}")

    model = doc.get("model", {})
    unknown = set(model) - MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in [model]: {sorted(unknown)}")
    try:
        augment = spec_from_dict(doc["augment"]) if "augment" in doc else NoAugment()
    except SpecError as exc:
        raise ConfigError(f"[augment]: {exc}") from exc

    opts = {k: run.get(k, v) for k, v in OPTIONAL_RUN_KEYS.items()}
    for key in ("workers", "epochs", "patience", "max_epochs", "batch_size"):
        _check_int(key, opts[key], 1)
    _check_int("tta_k", opts["tta_k"], 0)
    if not isinstance(opts["lr"], (int, float)) or not opts["lr"] > 0:
        raise ConfigError(f"lr must be positive, got {opts['lr']!r}")
    cfg = RunConfig(
        manifest=(base / run["manifest"]),
        output=(base / run["output"]),
        mode=run["mode"],
        n_folds=_check_int("n_folds", run["n_folds"], 2),
        seed=_check_int("seed", run["seed"], 0),
        augment=augment,
        model=dict(model),
        **opts,
    )
    cfg.lr = float(cfg.lr)
    if check_paths and not cfg.manifest.is_file():
        raise ConfigError(f"manifest {cfg.manifest} does not exist")
    return cfg


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, path.parent, check_paths)
