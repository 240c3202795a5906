"""Versioned, checksummed binary artifact files and memory accounting.

File layout (little endian)::

    magic      8 bytes   b"SLDDART1"
    version    uint32
    hlen       uint64    length of the JSON header
    header     hlen bytes, UTF-8 JSON: metadata + section table
    payload    concatenated float64 sections
    sha256     32 bytes over everything above

Every array, the inner rate and the best metric travel as float64
sections, so a round trip is bit-exact. A human-readable ``.json``
sidecar is written next to each saved file; it is never read back.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distill import FORMAT_VERSION, DistilledArtifact
from .nets import ModelSpec

MAGIC = b"SLDDART1"
SUPPORTED_VERSIONS = (FORMAT_VERSION,)
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class ArtifactError(ValueError):
    pass


class VersionError(ArtifactError):
    pass


class ChecksumError(ArtifactError):
    pass


class TruncatedError(ArtifactError):
    pass


def _sections(artifact: DistilledArtifact) -> list[tuple[str, np.ndarray]]:
    out = [
        ("images", artifact.images),
        ("labels", artifact.labels),
        ("inner_rate", np.array(artifact.inner_rate)),
        ("best_metric", np.array(artifact.best_metric)),
    ]
    if artifact.normalization is not None:
        out.append(("normalization", np.array(artifact.normalization)))
    for name in sorted(artifact.bn_params or {}):
        out.append((f"bn/{name}", np.asarray(artifact.bn_params[name], dtype=np.float64)))
    return out


def dumps(artifact: DistilledArtifact, version: int = FORMAT_VERSION) -> bytes:
    table, blobs, offset = [], [], 0
    for name, arr in _sections(artifact):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model_spec": artifact.model_spec.to_dict(),
        "config": artifact.config,
        "best_step": int(artifact.best_step),
        "validation_seed": int(artifact.validation_seed),
        "payload_bytes": offset,
        "sections": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, version, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> DistilledArtifact:
    if len(data) < _PREFIX.size:
        raise TruncatedError(f"file is {len(data)} bytes, shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ArtifactError(f"not an artifact file (magic {magic!r})")
    if version not in SUPPORTED_VERSIONS:
        raise VersionError(f"format version {version} is not supported; supported versions: {list(SUPPORTED_VERSIONS)}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise TruncatedError("file ends inside the header")
    try:
        header = json.loads(data[_PREFIX.size:start])
        need = start + int(header["payload_bytes"]) + _DIGEST
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        if len(data) < start + _DIGEST:
            raise TruncatedError("file ends before the checksum") from exc
        raise ChecksumError("header is unreadable; file is corrupted") from exc
    if len(data) < need:
        raise TruncatedError(f"file is {len(data)} bytes, expected {need}")
    if len(data) > need:
        raise ArtifactError(f"{len(data) - need} unexpected trailing bytes")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("sha256 checksum mismatch; file is corrupted")

    arrays = {}
    for sec in header["sections"]:
        lo = start + sec["offset"]
        raw = data[lo:lo + sec["nbytes"]]
        arrays[sec["name"]] = np.frombuffer(raw, dtype=sec["dtype"]).reshape(sec["shape"]).astype(np.float64)
    bn = {k[3:]: v for k, v in arrays.items() if k.startswith("bn/")} or None
    return DistilledArtifact(
        images=arrays["images"],
        labels=arrays["labels"],
        inner_rate=float(arrays["inner_rate"]),
        model_spec=ModelSpec.from_dict(header["model_spec"]),
        config=header["config"],
        bn_params=bn,
        best_metric=float(arrays["best_metric"]),
        best_step=header["best_step"],
        validation_seed=header["validation_seed"],
        normalization=tuple(arrays["normalization"]) if "normalization" in arrays else None,
        format_version=version,
    )


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save(artifact: DistilledArtifact, path) -> Path:
    """Write ``path`` atomically plus its ``<path>.json`` metadata sidecar."""
    path = Path(path)
    data = dumps(artifact)
    _atomic_write(path, data)
    report = size_report(artifact.model_spec, artifact)
    meta = {
        "format_version": artifact.format_version,
        "sha256": hashlib.sha256(data).hexdigest(),
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "model": artifact.model_spec.name,
        "model_spec": artifact.model_spec.to_dict(),
        "num_images": artifact.num_images,
        "inner_rate": artifact.inner_rate,
        "soft_labels": artifact.labels.tolist(),
        "best_metric": None if math.isnan(artifact.best_metric) else artifact.best_metric,
        "best_step": artifact.best_step,
        "validation_seed": artifact.validation_seed,
        "normalization": artifact.normalization,
        "config": artifact.config,
        "size": report.to_dict(),
    }
    _atomic_write(sidecar_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return path


def load(path) -> DistilledArtifact:
    return loads(Path(path).read_bytes())


# memory accounting

_UNITS = {"B": 1, "KB": 1000, "MB": 1000**2, "GB": 1000**3}
_SIZE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([KMG]?B)\s*$", re.IGNORECASE)


def parse_size(text: str) -> float:
    """Bytes in a quoted size such as ``"250.23KB"`` (decimal units)."""
    m = _SIZE.match(text)
    if not m:
        raise ValueError(f"cannot parse size {text!r}")
    return float(m.group(1)) * _UNITS[m.group(2).upper()]


def format_size(nbytes: float) -> str:
    for unit in ("GB", "MB", "KB"):
        if nbytes >= _UNITS[unit]:
            return f"{nbytes / _UNITS[unit]:.2f}{unit}"
    return f"{int(nbytes)}B"


def rate_from_quoted(memory: str, memory_star: str) -> float:
    return parse_size(memory_star) / parse_size(memory)


@dataclass(frozen=True)
class SizeReport:
    """Payload byte counts of a full model versus its distilled artifact.

    Counts are values times bytes per value. Container overhead (magic,
    header, section table, checksum) is excluded.
    """

    model: str
    full_model_values: int
    artifact_values: int
    bytes_per_value: int = 8

    note = "payload only; container header, section table and checksum excluded"

    @property
    def full_model_bytes(self) -> int:
        return self.full_model_values * self.bytes_per_value

    @property
    def artifact_bytes(self) -> int:
        return self.artifact_values * self.bytes_per_value

    @property
    def full_model_bytes_32(self) -> int:
        return self.full_model_values * 4

    @property
    def artifact_bytes_32(self) -> int:
        return self.artifact_values * 4

    @property
    def compression_rate(self) -> float:
        return self.artifact_bytes / self.full_model_bytes

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "full_model_bytes": self.full_model_bytes,
            "artifact_bytes": self.artifact_bytes,
            "full_model_bytes_32": self.full_model_bytes_32,
            "artifact_bytes_32": self.artifact_bytes_32,
            "compression_rate": self.compression_rate,
            "note": self.note,
        }


def size_report(spec: ModelSpec, artifact: DistilledArtifact | None = None, num_images: int | None = None) -> SizeReport:
    """Memory is every parameter plus BN running statistics; Memory* is
    the distilled images, soft labels, inner rate and BN statistics.

    Without an artifact, ``num_images`` hypothetical images are counted.
    """
    if artifact is not None:
        if artifact.model_spec != spec:
            raise ValueError("artifact was distilled for a different model spec")
        data_values = artifact.images.size + artifact.labels.size
    else:
        m = num_images or 0
        data_values = m * int(np.prod(spec.input_shape)) + m * spec.num_classes
    full = spec.parameter_count() + spec.bn_stat_count()
    return SizeReport(spec.name, full, data_values + 1 + spec.bn_stat_count())


SIZE_COLUMNS = (
    "model", "memory", "memory_star", "compression_rate",
    "memory_bytes", "memory_star_bytes", "memory_bytes_32", "memory_star_bytes_32",
)


def write_size_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SIZE_COLUMNS)
        for r in reports:
            w.writerow([
                r.model, format_size(r.full_model_bytes), format_size(r.artifact_bytes), f"{r.compression_rate:.5f}",
                r.full_model_bytes, r.artifact_bytes, r.full_model_bytes_32, r.artifact_bytes_32,
            ])
