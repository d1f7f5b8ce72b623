"""
Dataset bundles: slide windows paired with raw expression vectors, grouped
by patient and slide.

On disk a bundle is a directory with ``manifest.json`` (the hierarchy) and
``bundle.egnd`` (the arrays). External data enters through a manifest that
points at PNG or ``.npy`` window files and a CSV expression table.
"""
import csv
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .checkpoint import canonical_json, write_atomic
from .errors import DataError

__all__ = (
    "DatasetBundle",
    "encode_egnd",
    "decode_egnd",
    "save_bundle",
    "load_bundle",
    "ingest_external",
    "select_top_genes",
    "load_window_image",
)

logger = logging.getLogger(__name__)

EGND_MAGIC = b"EGND"
EGND_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "bundle.egnd"


@dataclass
class DatasetBundle:
    """
    :param windows: (N, 3, H, W) RGB values in [0, 1].
    :param raw_expression: (N, M) nonnegative expression values.
    :param window_ids: (N,) unique ids.
    :param patient_ids: (N,) owning patient of every window.
    :param slide_ids: (N,) owning slide of every window. A slide belongs to
        exactly one patient.
    :param metadata: Free-form JSON-serialisable generation details.
    """

    windows: np.ndarray
    raw_expression: np.ndarray
    window_ids: np.ndarray
    patient_ids: np.ndarray
    slide_ids: np.ndarray
    genes: List[str]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.raw_expression = np.asarray(self.raw_expression, dtype=np.float64)
        self.window_ids = np.asarray(self.window_ids, dtype=np.int64)
        self.patient_ids = np.asarray(self.patient_ids, dtype=np.int64)
        self.slide_ids = np.asarray(self.slide_ids, dtype=np.int64)
        self.check()

    def __len__(self) -> int:
        return int(self.windows.shape[0])

    @property
    def num_genes(self) -> int:
        return int(self.raw_expression.shape[1])

    @property
    def image_size(self) -> int:
        return int(self.windows.shape[-1])

    def patients(self) -> List[int]:
        return [int(p) for p in np.unique(self.patient_ids)]

    def check(self) -> None:
        n = self.windows.shape[0]
        if self.windows.ndim != 4 or self.windows.shape[1] != 3:
            raise DataError(f"Windows must have shape (N, 3, H, W), got {self.windows.shape}.")
        if self.raw_expression.ndim != 2 or self.raw_expression.shape[0] != n:
            raise DataError(
                f"Expression matrix has shape {self.raw_expression.shape}, expected {n} rows."
            )
        for name in ("window_ids", "patient_ids", "slide_ids"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"{name} must hold {n} entries.")
        if len(self.genes) != self.raw_expression.shape[1]:
            raise DataError(
                f"{len(self.genes)} gene names for {self.raw_expression.shape[1]} columns."
            )
        if len(np.unique(self.window_ids)) != n:
            raise DataError("Window ids are not unique.")
        if n and self.raw_expression.min() < 0:
            row = int(np.argwhere(self.raw_expression < 0)[0, 0])
            raise DataError(f"Window {int(self.window_ids[row])} has negative expression.")

        owner: Dict[int, int] = {}
        for slide, patient in zip(self.slide_ids.tolist(), self.patient_ids.tolist()):
            if owner.setdefault(slide, patient) != patient:
                raise DataError(f"Slide {slide} belongs to patients {owner[slide]} and {patient}.")

    def position(self, window_id: int) -> int:
        "Row of `window_id`."
        rows = np.flatnonzero(self.window_ids == window_id)
        if not len(rows):
            raise DataError(f"No window with id {window_id!r}.")
        return int(rows[0])

    def subset(self, rows: Sequence[int]) -> "DatasetBundle":
        rows = np.asarray(rows, dtype=np.int64)
        return DatasetBundle(
            windows=self.windows[rows],
            raw_expression=self.raw_expression[rows],
            window_ids=self.window_ids[rows],
            patient_ids=self.patient_ids[rows],
            slide_ids=self.slide_ids[rows],
            genes=list(self.genes),
            metadata=dict(self.metadata),
        )

    def manifest(self) -> Dict[str, Any]:
        patients: List[Dict[str, Any]] = []
        for patient in self.patients():
            slides = []
            for slide in np.unique(self.slide_ids[self.patient_ids == patient]):
                rows = np.flatnonzero(self.slide_ids == slide)
                slides.append(
                    {
                        "id": int(slide),
                        "windows": [
                            {
                                "id": int(self.window_ids[r]),
                                "image": int(r),
                                "expression_row": int(r),
                            }
                            for r in rows
                        ],
                    }
                )
            patients.append({"id": patient, "slides": slides})
        return {"patients": patients, "genes": list(self.genes), "metadata": self.metadata}


def encode_egnd(bundle: DatasetBundle) -> bytes:
    n, _, h, w = bundle.windows.shape
    header = EGND_MAGIC + struct.pack("<I4Q", EGND_VERSION, n, bundle.num_genes, h, w)
    return b"".join(
        [
            header,
            np.ascontiguousarray(bundle.windows, dtype="<f8").tobytes(),
            np.ascontiguousarray(bundle.raw_expression, dtype="<f8").tobytes(),
        ]
    )


def decode_egnd(data: bytes, path: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    header_size = 4 + struct.calcsize("<I4Q")
    if len(data) < header_size or data[:4] != EGND_MAGIC:
        raise DataError(f"{path!r} is not an EGND blob.")
    version, n, m, h, w = struct.unpack("<I4Q", data[4:header_size])
    if version != EGND_VERSION:
        raise DataError(f"{path!r}: unsupported EGND version {version}.")

    window_count = n * 3 * h * w
    expected = header_size + 8 * (window_count + n * m)
    if len(data) != expected:
        raise DataError(f"{path!r} holds {len(data)} bytes, expected {expected}.")
    values = np.frombuffer(data, dtype="<f8", offset=header_size).astype(np.float64)
    windows = values[:window_count].reshape(n, 3, h, w)
    expression = values[window_count:].reshape(n, m)
    return windows, expression


def save_bundle(bundle: DatasetBundle, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    write_atomic(os.path.join(directory, BLOB_NAME), encode_egnd(bundle))
    write_atomic(
        os.path.join(directory, MANIFEST_NAME), canonical_json(bundle.manifest()).encode("utf-8")
    )
    logger.info("Saved bundle of %d windows to %s", len(bundle), directory)


def _walk_manifest(manifest: Any, path: str) -> List[Tuple[int, int, Dict[str, Any]]]:
    "Flatten the hierarchy into (patient id, slide id, window record)."
    if not isinstance(manifest, dict) or not isinstance(manifest.get("patients"), list):
        raise DataError(f"{path!r}: manifest needs a 'patients' list.")

    result = []
    for patient in manifest["patients"]:
        try:
            patient_id = int(patient["id"])
            slides = patient["slides"]
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{path!r}: malformed patient record {patient!r}.")
        for slide in slides:
            try:
                slide_id = int(slide["id"])
                windows = slide["windows"]
            except (KeyError, TypeError, ValueError):
                raise DataError(f"{path!r}: malformed slide record {slide!r}.")
            for window in windows:
                required = {"id", "image", "expression_row"}
                if not isinstance(window, dict) or not required <= set(window):
                    raise DataError(f"{path!r}: malformed window record {window!r}.")
                try:
                    int(window["id"])
                except (TypeError, ValueError):
                    raise DataError(f"{path!r}: window id {window['id']!r} is not an integer.")
                result.append((patient_id, slide_id, window))
    return result


def load_bundle(directory: str) -> DatasetBundle:
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    blob_path = os.path.join(directory, BLOB_NAME)
    for p in (manifest_path, blob_path):
        if not os.path.exists(p):
            raise DataError(f"Missing bundle file {p!r}.")

    with open(manifest_path) as f:
        manifest = json.load(f)
    with open(blob_path, "rb") as f:
        windows, expression = decode_egnd(f.read(), blob_path)

    records = _walk_manifest(manifest, manifest_path)
    if len(records) != windows.shape[0]:
        raise DataError(
            f"Manifest lists {len(records)} windows, blob holds {windows.shape[0]}."
        )
    images = np.array([int(w["image"]) for _, _, w in records], dtype=np.int64)
    rows = np.array([int(w["expression_row"]) for _, _, w in records], dtype=np.int64)

    return DatasetBundle(
        windows=windows[images],
        raw_expression=expression[rows],
        window_ids=[int(w["id"]) for _, _, w in records],
        patient_ids=[p for p, _, _ in records],
        slide_ids=[s for _, s, _ in records],
        genes=list(manifest.get("genes", [])),
        metadata=dict(manifest.get("metadata", {})),
    )


def load_window_image(path: str, image_size: int) -> np.ndarray:
    """
    Read a PNG (or anything Pillow opens) or a ``.npy`` array and return a
    (3, image_size, image_size) array in [0, 1].
    """
    if not os.path.exists(path):
        raise DataError(f"Window file {path!r} does not exist.")

    if path.endswith(".npy"):
        array = np.load(path).astype(np.float64)
        if array.ndim == 3 and array.shape[0] == 3:
            array = array.transpose(1, 2, 0)
        if array.ndim != 3 or array.shape[2] != 3:
            raise DataError(f"{path!r}: expected an RGB array, got shape {array.shape}.")
        if array.min() < 0 or array.max() > 1:
            raise DataError(f"{path!r}: values must lie in [0, 1].")
        if array.shape[:2] == (image_size, image_size):
            return array.transpose(2, 0, 1)
        image = Image.fromarray(np.round(array * 255).astype(np.uint8))
    else:
        try:
            image = Image.open(path).convert("RGB")
        except OSError as e:
            raise DataError(f"{path!r} is not a readable image ({e}).")

    if image.size != (image_size, image_size):
        image = image.resize((image_size, image_size), Image.BILINEAR)
    return (np.asarray(image, dtype=np.float64) / 255.0).transpose(2, 0, 1)


def select_top_genes(expression: np.ndarray, num_genes: int) -> np.ndarray:
    """
    Column indices of the `num_genes` genes with the largest mean, largest
    first. Ties keep the table order.
    """
    means = expression.mean(axis=0)
    return np.argsort(-means, kind="stable")[:num_genes]


def _read_expression_table(path: str) -> Tuple[List[str], np.ndarray]:
    if not os.path.exists(path):
        raise DataError(f"Expression table {path!r} does not exist.")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            genes = [g.strip() for g in next(reader)]
        except StopIteration:
            raise DataError(f"{path!r} is empty.")
        rows = []
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(genes):
                raise DataError(
                    f"{path!r} line {line_number}: {len(row)} values, expected {len(genes)}."
                )
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{path!r} line {line_number}: non-numeric value.")
            if min(values) < 0:
                raise DataError(f"{path!r} line {line_number}: negative expression value.")
            rows.append(values)
    return genes, np.array(rows, dtype=np.float64).reshape(len(rows), len(genes))


def ingest_external(
    manifest_path: str, image_size: int, num_genes: int, max_windows: Optional[int] = None
) -> DatasetBundle:
    """
    Build a bundle from an external manifest.

    The manifest follows the bundle schema with two differences: ``image`` is
    a path (relative to the manifest) and a top-level ``expression_table``
    names a CSV file whose header row holds the gene names. Only the
    `num_genes` genes with the largest mean expression are kept.
    """
    if not os.path.exists(manifest_path):
        raise DataError(f"Manifest {manifest_path!r} does not exist.")
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as f:
        try:
            manifest = json.load(f)
        except ValueError as e:
            raise DataError(f"{manifest_path!r} is not valid JSON ({e}).")

    table = manifest.get("expression_table") if isinstance(manifest, dict) else None
    if not isinstance(table, str):
        raise DataError(f"{manifest_path!r}: missing 'expression_table'.")
    genes, table_rows = _read_expression_table(os.path.join(base, table))
    if len(genes) < num_genes:
        raise DataError(f"Expression table has {len(genes)} genes, {num_genes} requested.")

    records = _walk_manifest(manifest, manifest_path)
    if max_windows is not None:
        records = records[:max_windows]
    if not records:
        raise DataError(f"{manifest_path!r} lists no windows.")

    windows = []
    expression = []
    for _, _, window in records:
        row = int(window["expression_row"])
        if not 0 <= row < len(table_rows):
            raise DataError(
                f"Window {window['id']!r}: expression_row {row} outside the table "
                f"({len(table_rows)} rows)."
            )
        windows.append(load_window_image(os.path.join(base, str(window["image"])), image_size))
        expression.append(table_rows[row])

    expression_matrix = np.array(expression).reshape(len(records), len(genes))
    keep = select_top_genes(expression_matrix, num_genes)
    logger.info("Ingested %d windows, kept %d of %d genes", len(records), num_genes, len(genes))

    return DatasetBundle(
        windows=np.array(windows).reshape(len(records), 3, image_size, image_size),
        raw_expression=expression_matrix[:, keep],
        window_ids=[int(w["id"]) for _, _, w in records],
        patient_ids=[p for p, _, _ in records],
        slide_ids=[s for _, s, _ in records],
        genes=[genes[i] for i in keep],
        metadata={"source": "external", "manifest": os.path.abspath(manifest_path)},
    )
