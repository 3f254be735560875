"""NIfTI-1 reading/writing and dataset ingestion.

Only single-file little-endian NIfTI-1 (``n+1``) is supported, optionally
gzip-compressed. Orientation (qform/sform) is ignored; spacing comes from
``pixdim``.
"""

from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from mieval.volcore import InvalidLabelError, LabelMap, Volume

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

_DTYPES = {
    DT_UINT8: np.dtype("<u1"),
    DT_INT16: np.dtype("<i2"),
    DT_FLOAT32: np.dtype("<f4"),
}


class NiftiError(ValueError):
    """Base class for NIfTI parse errors."""


class HeaderSizeError(NiftiError):
    pass


class EndiannessError(NiftiError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class BadDimensionsError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class InvalidLabelFileError(NiftiError, InvalidLabelError):
    pass


class ClinicalParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class DatasetError(ValueError):
    """Raised for missing files, bad layouts and impossible splits."""


@dataclass
class NiftiHeader:
    dim: tuple[int, ...]
    pixdim: tuple[float, ...]
    datatype: int
    bitpix: int
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes


def _maybe_gunzip(blob: bytes) -> bytes:
    if blob[:2] == b"\x1f\x8b":
        return gzip.decompress(blob)
    return blob


def parse_header(blob: bytes) -> NiftiHeader:
    if len(blob) < HEADER_SIZE:
        raise TruncatedPayloadError(f"file holds {len(blob)} bytes, header needs {HEADER_SIZE}")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", blob, 0)[0] == HEADER_SIZE:
            raise EndiannessError("big-endian NIfTI files are not supported")
        raise HeaderSizeError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}")
    magic = bytes(blob[344:348])
    if magic != MAGIC:
        raise BadMagicError(f"magic {magic!r} is not single-file NIfTI-1 {MAGIC!r}")
    dim = struct.unpack_from("<8h", blob, 40)
    datatype, bitpix = struct.unpack_from("<hh", blob, 70)
    pixdim = struct.unpack_from("<8f", blob, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", blob, 108)
    return NiftiHeader(dim, pixdim, datatype, bitpix, scl_slope, scl_inter, vox_offset, magic)


def read_nifti(blob: bytes, labels: bool = False) -> Union[Volume, LabelMap]:
    """Decode a NIfTI-1 blob into a ``Volume`` (or ``LabelMap`` if ``labels``)."""
    blob = _maybe_gunzip(bytes(blob))
    hdr = parse_header(blob)

    ndim = hdr.dim[0]
    if ndim not in (2, 3):
        raise BadDimensionsError(f"dim[0]={ndim}; only 2D and 3D images are supported")
    sizes = hdr.dim[1 : ndim + 1]
    if any(s < 1 for s in sizes):
        raise BadDimensionsError(f"non-positive dimension in {sizes}")
    nx, ny = sizes[0], sizes[1]
    nz = sizes[2] if ndim == 3 else 1

    if hdr.datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {hdr.datatype} not supported")
    dtype = _DTYPES[hdr.datatype]

    offset = int(hdr.vox_offset)
    if offset < HEADER_SIZE:
        raise TruncatedPayloadError(f"vox_offset {hdr.vox_offset} lies inside the header")
    count = nx * ny * nz
    nbytes = count * dtype.itemsize
    if len(blob) < offset + nbytes:
        raise TruncatedPayloadError(
            f"payload needs {nbytes} bytes at offset {offset}, file has {len(blob) - offset}"
        )
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(nz, ny, nx)

    dx, dy = float(hdr.pixdim[1]), float(hdr.pixdim[2])
    dz = float(hdr.pixdim[3]) if ndim == 3 else 1.0
    spacing = tuple(abs(s) if s != 0 else 1.0 for s in (dz, dy, dx))

    values = raw
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        slope, inter = float(hdr.scl_slope), float(hdr.scl_inter)
        if slope != 1.0 or inter != 0.0:
            values = raw.astype(np.float64) * slope + inter

    if labels:
        rounded = np.asarray(values)
        if rounded.dtype.kind == "f" and np.any(rounded != np.round(rounded)):
            raise InvalidLabelFileError("label file holds non-integer values")
        if np.any((rounded < 0) | (rounded > 4)):
            bad = sorted(set(np.unique(rounded[(rounded < 0) | (rounded > 4)]).tolist()))
            raise InvalidLabelFileError(f"label values outside 0..4: {bad}")
        return LabelMap(rounded.astype(np.uint8), spacing)
    return Volume(np.asarray(values, dtype=np.float32), spacing)


def write_nifti(img: Union[Volume, LabelMap], compress: bool = False) -> bytes:
    """Encode as single-file NIfTI-1. Labels go out as uint8, images as float32."""
    if isinstance(img, LabelMap):
        data = np.ascontiguousarray(img.labels, dtype="<u1")
        datatype = DT_UINT8
    else:
        data = np.ascontiguousarray(img.data, dtype="<f4")
        datatype = DT_FLOAT32
    nz, ny, nx = data.shape
    dz, dy, dx = img.spacing

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    struct.pack_into("<h", hdr, 254, 0)  # sform_code
    hdr[344:348] = MAGIC

    out = bytes(hdr) + b"\x00" * 4 + data.tobytes()
    if compress:
        buf = io.BytesIO()
        # mtime=0 keeps the compressed bytes reproducible
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as fh:
            fh.write(out)
        return buf.getvalue()
    return out


def load_volume(path, case_id: str = "") -> Volume:
    vol = read_nifti(Path(path).read_bytes())
    return Volume(vol.data, vol.spacing, case_id)


def load_labels(path, case_id: str = "") -> LabelMap:
    lm = read_nifti(Path(path).read_bytes(), labels=True)
    return LabelMap(lm.labels, lm.spacing, case_id)


def save_nifti(img: Union[Volume, LabelMap], path) -> None:
    path = Path(path)
    path.write_bytes(write_nifti(img, compress=path.name.endswith(".gz")))


# -- clinical records --------------------------------------------------------


@dataclass
class RawClinicalRecord:
    items: list[tuple[str, str]] = field(default_factory=list)

    def as_dict(self) -> dict[str, str]:
        return dict(self.items)

    def keys(self) -> list[str]:
        return [k for k, _ in self.items]


def parse_clinical_file(text: str) -> RawClinicalRecord:
    """Parse ``key: value`` lines. Blank lines are skipped."""
    items = []
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise ClinicalParseError(lineno, f"expected 'key: value', got {line.strip()!r}")
        key, value = line.split(":", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ClinicalParseError(lineno, "empty key")
        if key in seen:
            raise ClinicalParseError(lineno, f"duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        items.append((key, value))
    return RawClinicalRecord(items)


def read_clinical_csv(path) -> dict[str, RawClinicalRecord]:
    """One row per case; the first column holds the case id."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return {}
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise ClinicalParseError(1, "duplicate column names in header")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ClinicalParseError(lineno, f"expected {len(header)} fields, got {len(row)}")
        case_id = row[0].strip()
        if case_id in out:
            raise ClinicalParseError(lineno, f"duplicate case id {case_id!r}")
        out[case_id] = RawClinicalRecord([(k, v.strip()) for k, v in zip(header[1:], row[1:])])
    return out


# -- dataset layout ----------------------------------------------------------


@dataclass
class DatasetLayout:
    """Where per-case files live, relative to the case folder.

    ``{case}`` in a pattern is replaced by the case id (the folder name). The
    default mirrors the EMIDEC distribution: ``Case_N###`` folders are normal
    and ``Case_P###`` folders pathological.
    """

    image: str = "Images/{case}.nii.gz"
    labels: Optional[str] = "Contours/{case}.nii.gz"
    clinical: Optional[str] = "{case}.txt"
    class_prefixes: dict = field(
        default_factory=lambda: {"Case_N": "normal", "Case_P": "pathological"}
    )

    def class_of(self, case_id: str) -> Optional[str]:
        # longest prefix wins so that overlapping prefixes stay unambiguous
        for prefix in sorted(self.class_prefixes, key=len, reverse=True):
            if case_id.startswith(prefix):
                return self.class_prefixes[prefix]
        return None


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    image: Path
    labels: Optional[Path] = None
    clinical: Optional[Path] = None
    cls: Optional[str] = None


@dataclass
class DatasetIndex:
    cases: list[CaseEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    def get(self, case_id: str) -> CaseEntry:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def subset(self, ids: Sequence[str]) -> "DatasetIndex":
        wanted = set(ids)
        return DatasetIndex([c for c in self.cases if c.case_id in wanted])


def load_dataset(root, layout: Optional[DatasetLayout] = None) -> DatasetIndex:
    root = Path(root)
    layout = layout or DatasetLayout()
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    cases = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        cid = folder.name
        image = folder / layout.image.format(case=cid)
        if not image.is_file():
            raise DatasetError(f"case {cid}: image file {image} not found")
        labels = clinical = None
        if layout.labels:
            cand = folder / layout.labels.format(case=cid)
            labels = cand if cand.is_file() else None
        if layout.clinical:
            cand = folder / layout.clinical.format(case=cid)
            clinical = cand if cand.is_file() else None
        cases.append(CaseEntry(cid, image, labels, clinical, layout.class_of(cid)))
    return DatasetIndex(cases)


def split_dataset(
    idx: DatasetIndex,
    n_val: int,
    val_pathological: int,
    val_normal: int,
    seed: int,
) -> tuple[DatasetIndex, DatasetIndex]:
    """Random train/validation split with a fixed per-class validation count."""
    if n_val != val_pathological + val_normal:
        raise DatasetError(
            f"n_val={n_val} must equal val_pathological + val_normal = {val_pathological + val_normal}"
        )
    rng = np.random.default_rng(seed)
    val_ids = []
    for cls, want in (("pathological", val_pathological), ("normal", val_normal)):
        pool = [c.case_id for c in idx.cases if c.cls == cls]
        if want > len(pool):
            raise DatasetError(f"requested {want} {cls} validation cases, only {len(pool)} available")
        if want:
            val_ids.extend(pool[i] for i in rng.permutation(len(pool))[:want])
    val_set = set(val_ids)
    train = DatasetIndex([c for c in idx.cases if c.case_id not in val_set])
    val = DatasetIndex([c for c in idx.cases if c.case_id in val_set])
    return train, val
