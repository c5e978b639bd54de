"""``augment3d`` command-line entry point.

Exit codes: 0 success, 1 partial/runtime failure, 2 configuration error,
3 I/O error. Progress goes to stderr; results go to files or stdout.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__
from .augment import NoAugment, SpecError, augment_with_params, params_record, spec_from_dict, spec_label
from .config import ConfigError, load_config
from .data import (
    DataError,
    SynthSpec,
    fetch,
    load_manifest_dataset,
    manifest_from_labels,
    parse_phenotype_csv,
    read_manifest,
    synth_generate,
    synth_dataset,
)
from .nn import ConfigError as ModelConfigError
from .nn import ModelConfig, save_checkpoint
from .rng import RngStream
from .train import (
    FOLD_CSV_HEADER,
    SUMMARY_CSV_HEADER,
    Dataset,
    ExperimentReport,
    FoldResult,
    ModeMismatch,
    compare_to_baseline,
    cross_validate,
)
from .volume import NiftiError, Volume3, read_nifti, write_nifti

log = logging.getLogger("augment3d")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (ConfigError, SpecError, ModelConfigError, click.BadParameter, json.JSONDecodeError)):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, NiftiError)):
        return EXIT_IO
    if isinstance(exc, DataError):
        return EXIT_CONFIG
    return EXIT_RUNTIME


def _parse_spec(text: str):
    """Augmentation spec from inline JSON or a .json/.toml file."""
    p = Path(text)
    if not text.lstrip().startswith("{") and p.suffix in (".json", ".toml"):
        if not p.is_file():
            raise ConfigError(f"spec file {p} not found")
        if p.suffix == ".toml":
            import tomli

            doc = tomli.loads(p.read_text())
            doc = doc.get("augment", doc)
        else:
            doc = json.loads(p.read_text())
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse spec {text!r}: {exc}") from exc
    return spec_from_dict(doc)


def _parse_shape(text: str):
    try:
        shape = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise click.BadParameter(f"shape must look like 61,73,61, got {text!r}")
    if len(shape) != 3 or min(shape) < 1:
        raise click.BadParameter(f"shape must be three positive ints, got {text!r}")
    return shape


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="More progress output on stderr.")
def main(verbose):
    """Deterministic 3D augmentation and CNN training harness."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(message)s")


@main.command("augment")
@click.option("--input", "input_path", required=True, help="Input NIfTI volume.")
@click.option("--output", "output_path", required=True, help="Output path (.nii or .nii.gz).")
@click.option("--spec", "spec_text", required=True, help="Spec as inline JSON or a .json/.toml file.")
@click.option("--seed", type=int, required=True)
def cmd_augment(input_path, output_path, spec_text, seed):
    """Augment one volume and print the drawn parameters as a JSON line."""
    try:
        spec = _parse_spec(spec_text)
        vol, _ = read_nifti(input_path)
        out, params = augment_with_params(vol, spec, RngStream(seed, ("augment",)))
        write_nifti(out, output_path, gzip=str(output_path).endswith(".gz"))
    except Exception as exc:
        _fail(_exit_code(exc), str(exc))
    records = [params_record(p) for p in params]
    record = records[0] if len(records) == 1 else {"op": "compose", "ops": records}
    click.echo(json.dumps(record, sort_keys=False))


@main.command("synth")
@click.option("--out-dir", required=True)
@click.option("--n", "n_subjects", type=int, default=120, show_default=True)
@click.option("--shape", default="16,20,16", show_default=True)
@click.option("--effect", type=float, default=1.0, show_default=True, help="Class mean shift in background SDs.")
@click.option("--smoothness", type=float, default=1.0, show_default=True, help="Gaussian blur sigma (voxels).")
@click.option("--balance", type=float, default=0.5, show_default=True, help="Fraction of positive subjects.")
@click.option("--seed", type=int, required=True)
@click.option("--raw", is_flag=True, help="Write uncompressed .nii files.")
def cmd_synth(out_dir, n_subjects, shape, effect, smoothness, balance, seed, raw):
    """Generate a synthetic labelled dataset with a manifest."""
    try:
        spec = SynthSpec(n_subjects, _parse_shape(shape), effect, smoothness, balance, seed)
        entries = synth_generate(spec, out_dir, gzip=not raw)
    except Exception as exc:
        _fail(_exit_code(exc), str(exc))
    n_pos = sum(e.label for e in entries)
    click.echo(f"wrote {len(entries)} volumes ({n_pos} positive) to {out_dir}")


@main.command("fetch")
@click.option("--manifest", "manifest_path", help="Manifest CSV (file_id,label,path).")
@click.option("--phenotype", "phenotype_path", help="Phenotype CSV instead of a manifest.")
@click.option("--id-column", default="FILE_ID", show_default=True)
@click.option("--dx-column", default="DX_GROUP", show_default=True)
@click.option("--derivative", default="reho", show_default=True)
@click.option("--out-dir", required=True)
@click.option("--url-template", required=True, help="Uses {pipeline} {strategy} {derivative} {file_id}.")
@click.option("--pipeline", default="ccs", show_default=True)
@click.option("--strategy", default="filt_global", show_default=True)
@click.option("--overwrite", is_flag=True)
@click.option("--workers", type=int, default=4, show_default=True)
@click.option("--timeout", type=float, default=60.0, show_default=True)
def cmd_fetch(manifest_path, phenotype_path, id_column, dx_column, derivative, out_dir, url_template, pipeline, strategy, overwrite, workers, timeout):
    """Download derivative volumes listed in a manifest or phenotype file."""
    if bool(manifest_path) == bool(phenotype_path):
        _fail(EXIT_CONFIG, "give exactly one of --manifest or --phenotype")
    try:
        if manifest_path:
            entries = read_manifest(manifest_path)
        else:
            entries = manifest_from_labels(parse_phenotype_csv(phenotype_path, id_column, dx_column).labels, derivative)
        summary = fetch(entries, url_template, out_dir, overwrite, pipeline, strategy, workers, timeout)
    except Exception as exc:
        _fail(_exit_code(exc), str(exc))
    click.echo(summary.line())
    for fid, reason in summary.failed:
        click.echo(f"failed {fid}: {reason}")
    sys.exit(EXIT_RUNTIME if summary.failed else EXIT_OK)


def _fold_json(out: Path, k: int) -> Path:
    return out / f"fold_{k:02d}.json"


def _write_history(path: Path, res: FoldResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for h in res.history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.train_acc), repr(h.val_loss), repr(h.val_acc)])


@main.command("train")
@click.option("--config", "config_path", required=True, help="Experiment TOML file.")
def cmd_train(config_path):
    """Run one experiment arm across its folds (resumable)."""
    try:
        cfg = load_config(config_path)
        dataset = Dataset.from_pairs(load_manifest_dataset(cfg.manifest))
        model_cfg = ModelConfig(input_shape=dataset.shape, **cfg.model)
    except Exception as exc:
        _fail(_exit_code(exc), str(exc))

    out = cfg.output
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot create {out}: {exc}")
    echo = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    echo_path = out / "config.json"
    if echo_path.exists() and echo_path.read_text() != echo:
        _fail(EXIT_CONFIG, f"{out} holds results of a different configuration")
    echo_path.write_text(echo)

    completed = {}
    for k in range(cfg.n_folds):
        p = _fold_json(out, k)
        if p.exists():
            completed[k] = FoldResult.from_dict(json.loads(p.read_text()))

    def on_fold(res: FoldResult):
        save_checkpoint(res.model, out / f"fold_{res.fold:02d}.ckpt")
        _write_history(out / f"fold_{res.fold:02d}_history.csv", res)
        _fold_json(out, res.fold).write_text(json.dumps(res.to_dict()))

    try:
        report = cross_validate(
            dataset, model_cfg, cfg.augment, cfg.mode, cfg.seed, cfg.n_folds,
            cfg.train_options(), cfg.arm_label, completed, on_fold,
        )
    except Exception as exc:
        log.exception("training failed")
        _fail(EXIT_IO if isinstance(exc, OSError) else EXIT_RUNTIME, f"training failed: {exc}")
    if isinstance(cfg.augment, NoAugment):
        report.delta_pp = 0.0
    report.write_folds_csv(out / "folds.csv")
    report.write_summary_csv(out / "summary.csv")
    click.echo(f"{report.label} {report.mode}: mean {report.mean:.4f} std {report.std:.4f} over {len(report.folds)} folds")


def read_run(run_dir: Path) -> ExperimentReport:
    """Rebuild a report (fold accuracies only) from a run directory's folds.csv."""
    with open(run_dir / "folds.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{run_dir}/folds.csv has no rows")
    folds = [
        FoldResult(int(r["fold"]), float(r["test_acc"]), int(r["best_epoch"]), int(r["epochs_run"]), [], float(r["seconds"]))
        for r in rows
    ]
    return ExperimentReport(rows[0]["spec"], rows[0]["mode"], folds)


@main.command("report")
@click.option("--runs", "runs_dir", required=True, help="Directory holding run directories.")
@click.option("--baseline", required=True, help="Arm label of the no-augmentation baseline.")
@click.option("--output", "output_path", default=None, help="Also write the table here.")
def cmd_report(runs_dir, baseline, output_path):
    """Combine run summaries into one table with deltas vs the baseline."""
    runs = sorted(p.parent for p in Path(runs_dir).rglob("summary.csv") if (p.parent / "folds.csv").exists())
    if not runs:
        _fail(EXIT_CONFIG, f"no run summaries under {runs_dir}")
    try:
        reports = [read_run(r) for r in runs]
    except Exception as exc:
        _fail(_exit_code(exc), str(exc))
    baselines = {r.mode: r for r in reports if r.label == baseline}
    if not baselines:
        _fail(EXIT_CONFIG, f"baseline {baseline!r} not found among {sorted({r.label for r in reports})}")
    rows = []
    for r in reports:
        if r.mode not in baselines:
            _fail(EXIT_CONFIG, f"no {r.mode} run for baseline {baseline!r}")
        try:
            r.delta_pp = compare_to_baseline(r, baselines[r.mode])
        except ModeMismatch as exc:
            _fail(EXIT_CONFIG, str(exc))
        rows.append(r)
    rows.sort(key=lambda r: (-r.mean, r.label, r.mode))
    lines = [SUMMARY_CSV_HEADER] + [[r.label, r.mode, f"{r.mean:.6f}", f"{r.std:.6f}", f"{r.delta_pp:+.2f}"] for r in rows]
    text = "\n".join(",".join(map(str, line)) for line in lines) + "\n"
    click.echo(text, nl=False)
    if output_path:
        Path(output_path).write_text(text)


def _bench_volume(input_path, shape):
    if input_path:
        return read_nifti(input_path)[0]
    # smooth brain-like blob: a bright ellipsoid over noise
    spec = SynthSpec(4, shape, effect=3.0, seed=0)
    return synth_dataset(spec)[0][0]


@main.command("bench")
@click.option("--spec", "spec_texts", multiple=True, required=True, help="Repeatable; one row per spec.")
@click.option("--input", "input_path", default=None, help="NIfTI volume; synthetic if omitted.")
@click.option("--shape", default="61,73,61", show_default=True, help="Synthetic volume shape.")
@click.option("--iterations", type=int, default=20, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_bench(spec_texts, input_path, shape, iterations, workers, seed):
    """Augmentation throughput and latency percentiles as CSV."""
    if iterations < 1 or workers < 1:
        _fail(EXIT_CONFIG, "iterations and workers must be positive")
    try:
        specs = [_parse_spec(t) for t in spec_texts]
        vol = _bench_volume(input_path, _parse_shape(shape))
    except Exception as exc:
        _fail(_exit_code(exc), str(exc))

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["spec", "shape", "iterations", "workers", "volumes_per_sec", "p50_ms", "p95_ms"])
    for spec in specs:
        rows = bench_spec(vol, spec, iterations, workers, seed)
        w.writerow([spec_label(spec), "x".join(map(str, vol.shape)), iterations, workers] + rows)


def bench_spec(vol: Volume3, spec, iterations: int, workers: int = 1, seed: int = 0, warmup: int = 3):
    """``[volumes_per_sec, p50_ms, p95_ms]`` for augmenting ``vol`` with ``spec``."""
    from .augment import apply_pipeline

    rng = RngStream(seed, ("bench",))

    def one(i):
        t = time.perf_counter()
        apply_pipeline(vol, spec, rng.child(i))
        return time.perf_counter() - t

    for i in range(warmup):
        one(-1 - i)
    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            lat = list(pool.map(one, range(iterations)))
    else:
        lat = [one(i) for i in range(iterations)]
    total = time.perf_counter() - t0
    lat_ms = np.array(lat) * 1e3
    return [f"{iterations / total:.3f}", f"{np.percentile(lat_ms, 50):.3f}", f"{np.percentile(lat_ms, 95):.3f}"]


if __name__ == "__main__":
    main()
