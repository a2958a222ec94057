#!/usr/bin/env python3
"""
Video data model, tensor container and preprocessing.

Container layout (little-endian):
    magic  b"TRUS1"
    u8     rank (1..8; videos are rank 4, axis order T,H,W,C)
    u32    dims x rank
    u8     dtype code (1 float32, 2 uint8, 3 float64, 4 int64)
    payload, row-major
"""

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import (
    ContainerFormatError,
    DataError,
    NonFiniteInputError,
    SplitError,
    TruncatedPayloadError,
)

MAGIC = b"TRUS1"
MAX_RANK = 8
CONTAINER_SUFFIX = ".trus"
SIDECAR_SUFFIX = ".sample.json"
DEFAULT_CACHE_SIZE = 64

DTYPE_CODES: Dict[int, np.dtype] = {
    1: np.dtype("<f4"),
    2: np.dtype("u1"),
    3: np.dtype("<f8"),
    4: np.dtype("<i8"),
}
_CODE_FOR_KIND = {np.dtype(v).str: k for k, v in DTYPE_CODES.items()}


@dataclass
class TrusSample:
    """One paired B-mode/SWE video, arrays laid out as (T, H, W, C)."""

    id: str
    bmode: np.ndarray
    swe: np.ndarray
    label: int
    lesion_mask: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.bmode.ndim != 4:
            raise DataError(f"Sample '{self.id}': expected a 4-D video, got shape {self.bmode.shape}")
        if self.bmode.shape != self.swe.shape:
            raise DataError(
                f"Sample '{self.id}': B-mode shape {self.bmode.shape} != SWE shape {self.swe.shape}"
            )
        if self.label not in (0, 1):
            raise DataError(f"Sample '{self.id}': label must be 0 or 1, got {self.label}")
        if self.lesion_mask is not None and self.lesion_mask.shape != self.bmode.shape[:3]:
            raise DataError(
                f"Sample '{self.id}': mask shape {self.lesion_mask.shape} != video (T,H,W) {self.bmode.shape[:3]}"
            )

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.bmode.shape)


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    bmode_path: str
    swe_path: str
    label: Literal[0, 1]
    mask_path: Optional[str] = None


class DatasetManifest(BaseModel):
    """Enumerable collection of samples; paths are relative to `root`."""

    model_config = ConfigDict(extra="forbid")

    entries: List[ManifestEntry]
    master_seed: int = 0
    split_tag: Literal["train", "test", "all"] = "all"
    label_counts: Dict[str, int] = Field(default_factory=dict)
    root: Optional[Path] = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def _check_entries(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids: {dupes}")
        counts = _count_labels(self.entries)
        if self.label_counts and self.label_counts != counts:
            raise ValueError(f"label_counts {self.label_counts} inconsistent with entries {counts}")
        self.label_counts = counts
        return self

    @property
    def ids(self) -> List[str]:
        return [e.id for e in self.entries]

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise DataError(f"Sample '{sample_id}' is not in the manifest")

    def resolve(self, relative: str) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / relative

    def missing_files(self) -> List[str]:
        """Return the ids whose referenced files do not exist."""
        missing = []
        for e in self.entries:
            paths = [e.bmode_path, e.swe_path] + ([e.mask_path] if e.mask_path else [])
            if not all(self.resolve(p).exists() for p in paths):
                missing.append(e.id)
        return missing

    def check_files(self):
        missing = self.missing_files()
        if missing:
            raise DataError(f"Missing sample files for ids: {', '.join(missing)}")

    def subset(self, ids: List[str], split_tag: str) -> "DatasetManifest":
        wanted = set(ids)
        entries = [e for e in self.entries if e.id in wanted]
        return DatasetManifest(
            entries=entries, master_seed=self.master_seed, split_tag=split_tag, root=self.root
        )


def _count_labels(entries: List[ManifestEntry]) -> Dict[str, int]:
    positives = sum(1 for e in entries if e.label == 1)
    return {"0": len(entries) - positives, "1": positives}


# --- preprocessing ---

def _check_finite(array: np.ndarray):
    finite = np.isfinite(array)
    if not finite.all():
        first = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise NonFiniteInputError(first)


def normalize_intensities(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize one video to [0, 1]; constant videos map to zeros."""
    raw = np.asarray(raw)
    _check_finite(raw)
    values = raw.astype(np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(raw.shape, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def resize_video(video: np.ndarray, target: Tuple[int, int, int]) -> np.ndarray:
    """Trilinear resize over (T, H, W) with endpoint-aligned sampling; channels are independent."""
    video = np.asarray(video)
    if video.ndim != 4:
        raise DataError(f"Expected a (T,H,W,C) video, got shape {video.shape}")
    if video.size == 0:
        raise DataError(f"Cannot resize an empty video of shape {video.shape}")
    if len(target) != 3 or any(int(d) < 1 for d in target):
        raise DataError(f"Target dims must be three integers >= 1, got {target}")
    target = tuple(int(d) for d in target)
    if tuple(video.shape[:3]) == target:
        return video.copy()

    tensor = torch.from_numpy(np.ascontiguousarray(video)).permute(3, 0, 1, 2).unsqueeze(0)
    dtype = tensor.dtype if tensor.is_floating_point() else torch.float32
    resized = F.interpolate(tensor.to(dtype), size=target, mode="trilinear", align_corners=True)
    return resized.squeeze(0).permute(1, 2, 3, 0).contiguous().numpy()


# --- container ---

def _dtype_code(array: np.ndarray) -> int:
    code = _CODE_FOR_KIND.get(array.dtype.newbyteorder("<").str)
    if code is None:
        raise ContainerFormatError(f"Unsupported dtype {array.dtype} for the tensor container")
    return code


def encode_array(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim < 1 or array.ndim > MAX_RANK:
        raise ContainerFormatError(f"Rank {array.ndim} outside 1..{MAX_RANK}")
    code = _dtype_code(array)
    if array.dtype.kind == "f":
        _check_finite(array)
    header = MAGIC + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", code)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + payload


def decode_array(data: bytes, source="<bytes>") -> np.ndarray:
    if len(data) < len(MAGIC) + 1 or data[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"{source}: bad magic bytes, not a TRUS1 container")
    offset = len(MAGIC)
    (rank,) = struct.unpack_from("<B", data, offset)
    offset += 1
    if rank < 1 or rank > MAX_RANK:
        raise ContainerFormatError(f"{source}: rank {rank} outside 1..{MAX_RANK}")
    header_end = offset + 4 * rank + 1
    if len(data) < header_end:
        raise ContainerFormatError(f"{source}: header truncated")
    dims = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    (code,) = struct.unpack_from("<B", data, offset)
    offset += 1
    if code not in DTYPE_CODES:
        raise ContainerFormatError(f"{source}: unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - offset
    if actual < expected:
        raise TruncatedPayloadError(source, expected, actual)
    if actual > expected:
        raise ContainerFormatError(f"{source}: {actual - expected} trailing bytes after payload")
    return np.frombuffer(data, dtype=dtype, offset=offset, count=int(np.prod(dims))).reshape(dims).copy()


def write_array(path, array: np.ndarray):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_array(array))
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e


def read_array(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    return decode_array(data, source=path)


# --- samples ---

def sample_file_names(sample_id: str, with_mask: bool) -> Dict[str, Optional[str]]:
    return {
        "bmode_path": f"{sample_id}_bmode{CONTAINER_SUFFIX}",
        "swe_path": f"{sample_id}_swe{CONTAINER_SUFFIX}",
        "mask_path": f"{sample_id}_mask{CONTAINER_SUFFIX}" if with_mask else None,
    }


def save_sample(sample: TrusSample, directory) -> ManifestEntry:
    """Write one container per modality (plus mask) and a JSON sidecar into `directory`."""
    directory = Path(directory)
    names = sample_file_names(sample.id, sample.lesion_mask is not None)
    write_array(directory / names["bmode_path"], sample.bmode.astype(np.float32, copy=False))
    write_array(directory / names["swe_path"], sample.swe.astype(np.float32, copy=False))
    if sample.lesion_mask is not None:
        write_array(directory / names["mask_path"], sample.lesion_mask.astype(np.uint8))
    entry = ManifestEntry(id=sample.id, label=sample.label, **names)
    sidecar = directory / f"{sample.id}{SIDECAR_SUFFIX}"
    try:
        sidecar.write_text(entry.model_dump_json(indent=2))
    except OSError as e:
        raise DataError(f"Cannot write {sidecar}: {e}") from e
    logger.debug(f"Saved sample {sample.id} to {directory}")
    return entry


def load_entry(entry: ManifestEntry, root) -> TrusSample:
    root = Path(root)
    bmode = read_array(root / entry.bmode_path)
    swe = read_array(root / entry.swe_path)
    if bmode.ndim != 4 or swe.ndim != 4 or bmode.shape != swe.shape:
        raise ContainerFormatError(
            f"Sample '{entry.id}': dimension mismatch between B-mode {bmode.shape} and SWE {swe.shape}"
        )
    if bmode.dtype != np.float32 or swe.dtype != np.float32:
        raise ContainerFormatError(f"Sample '{entry.id}': videos must be float32")
    mask = None
    if entry.mask_path:
        mask = read_array(root / entry.mask_path)
        if mask.dtype != np.uint8:
            raise ContainerFormatError(f"Sample '{entry.id}': mask must be uint8")
    return TrusSample(id=entry.id, bmode=bmode, swe=swe, label=entry.label, lesion_mask=mask)


def load_sample(path) -> TrusSample:
    """Load a sample from its JSON sidecar (or from its B-mode container path)."""
    path = Path(path)
    if path.name.endswith(f"_bmode{CONTAINER_SUFFIX}"):
        path = path.with_name(path.name[: -len(f"_bmode{CONTAINER_SUFFIX}")] + SIDECAR_SUFFIX)
    try:
        entry = ManifestEntry.model_validate_json(path.read_text())
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    except ValueError as e:
        raise DataError(f"Invalid sample sidecar {path}: {e}") from e
    return load_entry(entry, path.parent)


# --- manifests ---

def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.model_dump_json(indent=2))
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"Cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"Manifest {path} is not valid JSON: {e}") from e
    try:
        manifest = DatasetManifest.model_validate(data)
    except ValueError as e:
        raise DataError(f"Invalid manifest {path}: {e}") from e
    manifest.root = path.parent
    return manifest


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_manifest(manifest: DatasetManifest, test_fraction: float, seed: int):
    """Stratified, seeded split into (train, test) manifests."""
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    by_label = {0: [], 1: []}
    for e in sorted(manifest.entries, key=lambda e: e.id):
        by_label[e.label].append(e.id)
    for label, ids in by_label.items():
        if len(ids) < 2:
            raise SplitError(f"Class {label} has {len(ids)} sample(s); stratification needs at least 2")

    total = len(manifest.entries)
    n_test = _round_half_up(total * test_fraction)
    quotas = {label: len(ids) * n_test / total for label, ids in by_label.items()}
    counts = {label: int(math.floor(q)) for label, q in quotas.items()}
    # largest remainder, ties broken towards the positive class
    for label in sorted(quotas, key=lambda k: (-(quotas[k] - counts[k]), -k)):
        if sum(counts.values()) >= n_test:
            break
        counts[label] += 1

    rng = np.random.default_rng(seed)
    test_ids: List[str] = []
    for label in (0, 1):
        ids = by_label[label]
        order = rng.permutation(len(ids))
        test_ids.extend(ids[i] for i in order[: counts[label]])
    test_set = set(test_ids)
    train_ids = [i for i in manifest.ids if i not in test_set]

    logger.info(f"Split {total} samples into {len(train_ids)} train / {len(test_ids)} test (seed {seed})")
    return manifest.subset(train_ids, "train"), manifest.subset(sorted(test_ids), "test")


class SampleStore:
    """Loads manifest samples by id, applying the optional resize.

    The most recently used `max_items` samples stay in memory; 0 disables caching.
    """

    def __init__(self, manifest: DatasetManifest, input_dims: Optional[Tuple[int, int, int]] = None,
                 max_items: int = DEFAULT_CACHE_SIZE):
        if max_items < 0:
            raise ValueError(f"max_items must be >= 0, got {max_items}")
        self.manifest = manifest
        self.input_dims = tuple(input_dims) if input_dims else None
        self.max_items = max_items
        self._cache: "OrderedDict[str, TrusSample]" = OrderedDict()

    @property
    def cached_ids(self) -> List[str]:
        """Cached ids, least recently used first."""
        return list(self._cache)

    def get(self, sample_id: str) -> TrusSample:
        if sample_id in self._cache:
            self._cache.move_to_end(sample_id)
            return self._cache[sample_id]
        entry = self.manifest.entry(sample_id)
        sample = load_entry(entry, self.manifest.root or Path("."))
        if self.input_dims:
            sample = self._preprocess(sample)
        if self.max_items:
            self._cache[sample_id] = sample
            while len(self._cache) > self.max_items:
                self._cache.popitem(last=False)
        return sample

    def _preprocess(self, sample: TrusSample) -> TrusSample:
        bmode = normalize_intensities(resize_video(sample.bmode, self.input_dims))
        swe = normalize_intensities(resize_video(sample.swe, self.input_dims))
        mask = None
        if sample.lesion_mask is not None:
            resized = resize_video(sample.lesion_mask[..., None].astype(np.float32), self.input_dims)
            mask = (resized[..., 0] >= 0.5).astype(np.uint8)
        return TrusSample(id=sample.id, bmode=bmode, swe=swe, label=sample.label, lesion_mask=mask)
