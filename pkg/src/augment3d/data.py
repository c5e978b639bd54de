"""Dataset manifests, phenotype labels, downloading derivative files and a
synthetic labelled-volume generator for desk-scale runs.

Labels are ints: 1 = positive (ASD), 0 = negative (control). On disk
(manifest and phenotype files) the diagnostic-group convention is used
instead: code 1 = positive, code 2 = negative.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import RngStream
from .volume import IoFailure, NiftiError, Volume3, read_nifti, write_nifti

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE = 1, 0
DEFAULT_CODE_MAP = {1: POSITIVE, 2: NEGATIVE}
MANIFEST_HEADER = ["file_id", "label", "path"]
QUARANTINE_SUFFIX = ".bad"


class DataError(ValueError):
    pass


class MissingColumn(DataError):
    pass


class EmptyResult(DataError):
    pass


class ShapeInconsistency(DataError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


def label_to_code(label: int) -> int:
    return 1 if label == POSITIVE else 2


def code_to_label(code: int) -> int:
    if code not in DEFAULT_CODE_MAP:
        raise DataError(f"label code must be 1 or 2, got {code}")
    return DEFAULT_CODE_MAP[code]


# -- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    file_id: str
    label: int
    path: str = ""  # local path (relative to the manifest) or http(s) URL
    derivative: str = "reho"

    def __post_init__(self):
        if not self.file_id:
            raise DataError("manifest entry needs a file identifier")
        if self.label not in (POSITIVE, NEGATIVE):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def is_remote(self) -> bool:
        return self.path.startswith(("http://", "https://"))


def read_manifest(path) -> List[ManifestEntry]:
    """Parse a ``file_id,label,path`` CSV (label codes 1/2)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
            fields = rows[0].keys() if rows else []
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    if rows:
        missing = [c for c in ("file_id", "label") if c not in fields]
        if missing:
            raise MissingColumn(f"manifest {path} lacks columns {missing}")
    entries = []
    for row in rows:
        try:
            code = int(float(row["label"]))
        except ValueError as exc:
            raise DataError(f"bad label {row['label']!r} for {row['file_id']}") from exc
        entries.append(
            ManifestEntry(row["file_id"], code_to_label(code), row.get("path") or "", row.get("derivative") or "reho")
        )
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.file_id, label_to_code(e.label), e.path])


def resolve_path(entry: ManifestEntry, base_dir) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() else Path(base_dir) / p


# -- phenotype ----------------------------------------------------------------


@dataclass
class PhenotypeLabels:
    labels: Dict[str, int]
    skipped: int = 0

    @property
    def counts(self) -> Dict[int, int]:
        values = list(self.labels.values())
        return {POSITIVE: values.count(POSITIVE), NEGATIVE: values.count(NEGATIVE)}


def parse_phenotype_csv(path, id_column: str = "FILE_ID", dx_column: str = "DX_GROUP", code_map=None) -> PhenotypeLabels:
    """Map subject identifiers to labels using the diagnostic-group column.

    Rows whose code is not in ``code_map`` (default ``{1: positive, 2:
    negative}``) are skipped and counted.

    Raises:
        MissingColumn: a named column is absent.
        EmptyResult: no row produced a label.
    """
    code_map = DEFAULT_CODE_MAP if code_map is None else {int(k): v for k, v in code_map.items()}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in (id_column, dx_column):
            if col not in fields:
                raise MissingColumn(f"column {col!r} not in {path}")
        labels, skipped = {}, 0
        for row in reader:
            try:
                code = int(float(row[dx_column]))
            except (TypeError, ValueError):
                code = None
            if code not in code_map or not row[id_column]:
                skipped += 1
                continue
            labels[row[id_column]] = code_map[code]
    if skipped:
        log.warning("skipped %d phenotype rows with unknown diagnostic codes", skipped)
    if not labels:
        raise EmptyResult(f"no labelled rows in {path}")
    return PhenotypeLabels(labels, skipped)


def manifest_from_labels(labels: Dict[str, int], derivative: str = "reho") -> List[ManifestEntry]:
    return [ManifestEntry(fid, y, "", derivative) for fid, y in labels.items()]


# -- fetching -----------------------------------------------------------------


@dataclass
class FetchSummary:
    fetched: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: List[Tuple[str, str]] = field(default_factory=list)

    def line(self) -> str:
        return f"fetched {len(self.fetched)}, skipped {len(self.skipped)}, failed {len(self.failed)}"


def local_name(entry: ManifestEntry) -> str:
    return f"{entry.file_id}_{entry.derivative}.nii.gz"


def expand_url(template: str, entry: ManifestEntry, pipeline: str, strategy: str) -> str:
    return template.format(pipeline=pipeline, strategy=strategy, derivative=entry.derivative, file_id=entry.file_id)


def fetch(
    manifest: Sequence[ManifestEntry],
    base_url_template: str,
    out_dir,
    overwrite: bool = False,
    pipeline: str = "ccs",
    strategy: str = "filt_global",
    workers: int = 4,
    timeout: float = 60.0,
    session=None,
) -> FetchSummary:
    """Download each entry's derivative into ``out_dir``.

    Existing files are skipped unless ``overwrite``. Every download is
    parsed with :func:`read_nifti`; failures are renamed with a ``.bad``
    suffix. Per-entry failures are recorded in the summary, not raised.
    A ``manifest.csv`` listing the files now present is written to
    ``out_dir``.

    Raises:
        IoFailure: ``out_dir`` cannot be created or written.
    """
    import requests

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise IoFailure(f"output directory {out} is not writable: {exc}") from exc

    http = session or requests.Session()

    def one(entry: ManifestEntry):
        target = out / local_name(entry)
        if target.exists() and not overwrite:
            return "skipped", entry.file_id, None
        url = entry.path if entry.is_remote else expand_url(base_url_template, entry, pipeline, strategy)
        part = target.with_name(target.name + ".part")
        try:
            resp = http.get(url, timeout=timeout, allow_redirects=True)
            if resp.status_code != 200:
                return "failed", entry.file_id, f"HttpFailure: HTTP {resp.status_code} for {url}"
            part.write_bytes(resp.content)
        except requests.RequestException as exc:
            return "failed", entry.file_id, f"HttpFailure: {exc}"
        try:
            read_nifti(part)
        except NiftiError as exc:
            os.replace(part, target.with_name(target.name + QUARANTINE_SUFFIX))
            return "failed", entry.file_id, f"ValidationFailure: {exc}"
        os.replace(part, target)
        return "fetched", entry.file_id, None

    summary = FetchSummary()
    with ThreadPoolExecutor(max(1, workers)) as pool:
        results = list(pool.map(one, manifest))
    present = []
    for entry, (status, fid, reason) in zip(manifest, results):
        if status == "failed":
            log.warning("%s: %s", fid, reason)
            summary.failed.append((fid, reason))
        else:
            getattr(summary, status).append(fid)
            present.append(ManifestEntry(entry.file_id, entry.label, local_name(entry), entry.derivative))
    write_manifest(present, out / "manifest.csv")
    return summary


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Smoothed-noise volumes; positives carry a mean shift of ``effect``
    background standard deviations inside a centred ellipsoid (~10% of
    voxels)."""

    n_subjects: int = 120
    shape: Tuple[int, int, int] = (16, 20, 16)
    effect: float = 1.0
    smoothness: float = 1.0
    balance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if self.n_subjects < 4:
            raise DataError("need at least 4 subjects")
        if self.effect < 0:
            raise DataError("effect size must be non-negative")
        n_pos = self.n_positive
        if n_pos < 1 or n_pos > self.n_subjects - 1:
            raise DataError(f"balance {self.balance} leaves a class empty")

    @property
    def n_positive(self) -> int:
        return int(round(self.n_subjects * self.balance))


ELLIPSOID_FRACTION = 0.10


def ellipsoid_mask(shape) -> np.ndarray:
    """Centred ellipsoid with semi-axes proportional to the volume extent,
    sized to cover about 10% of the voxels."""
    r = (6.0 * ELLIPSOID_FRACTION / math.pi) ** (1.0 / 3.0)
    axes = [(np.arange(n) - (n - 1) / 2.0) / (r * n / 2.0) for n in shape]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return gx**2 + gy**2 + gz**2 <= 1.0


def synth_volume(spec: SynthSpec, index: int, label: int, mask: Optional[np.ndarray] = None) -> Volume3:
    rng = RngStream(spec.seed, ("synth", "subject", index))
    noise = rng.normal(1.0, int(np.prod(spec.shape))).reshape(spec.shape)
    if spec.smoothness > 0:
        noise = gaussian_filter(noise, spec.smoothness, mode="nearest")
    noise = (noise - noise.mean()) / noise.std()
    if label == POSITIVE and spec.effect > 0:
        noise = noise + spec.effect * (ellipsoid_mask(spec.shape) if mask is None else mask)
    return Volume3(noise.astype(np.float32))


def synth_labels(spec: SynthSpec) -> np.ndarray:
    labels = np.zeros(spec.n_subjects, dtype=np.int64)
    labels[: spec.n_positive] = POSITIVE
    return labels[RngStream(spec.seed, ("synth", "labels")).permutation(spec.n_subjects)]


def synth_dataset(spec: SynthSpec) -> List[Tuple[Volume3, int]]:
    """In-memory version of :func:`synth_generate`."""
    mask = ellipsoid_mask(spec.shape)
    return [(synth_volume(spec, i, int(y), mask), int(y)) for i, y in enumerate(synth_labels(spec))]


def synth_generate(spec: SynthSpec, out_dir, gzip: bool = True) -> List[ManifestEntry]:
    """Write ``spec.n_subjects`` NIfTI volumes plus ``manifest.csv`` to ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    suffix = ".nii.gz" if gzip else ".nii"
    entries = []
    for i, (vol, y) in enumerate(synth_dataset(spec)):
        fid = f"synth_{i:04d}"
        write_nifti(vol, out / (fid + suffix), gzip=gzip)
        entries.append(ManifestEntry(fid, y, fid + suffix))
    write_manifest(entries, out / "manifest.csv")
    return entries


# -- loading ------------------------------------------------------------------


def load_dataset(manifest: Sequence[ManifestEntry], base_dir=".") -> List[Tuple[Volume3, int]]:
    """Read every manifest entry in order and check that shapes agree.

    Raises:
        EmptyResult: empty manifest.
        ShapeInconsistency: some volume differs from the first one's shape.
    """
    if not manifest:
        raise EmptyResult("manifest is empty")
    pairs = []
    for e in manifest:
        if e.is_remote or not e.path:
            raise DataError(f"{e.file_id} has no local path; fetch it first")
        vol, _ = read_nifti(resolve_path(e, base_dir))
        pairs.append((vol, e.label))
    ref = pairs[0][0].shape
    offenders = [e.file_id for e, (v, _) in zip(manifest, pairs) if v.shape != ref]
    if offenders:
        raise ShapeInconsistency(f"volumes differ from shape {ref}: {', '.join(offenders)}", offenders)
    return pairs


def load_manifest_dataset(manifest_path) -> List[Tuple[Volume3, int]]:
    return load_dataset(read_manifest(manifest_path), Path(manifest_path).parent)
