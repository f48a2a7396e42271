"""
Artifact files - JSON manifests beside raw little-endian blobs

Every artifact the lab writes is a text manifest (JSON rendered from a
pydantic model) plus, for parameter-sized payloads, a binary blob whose
SHA-256 is recorded in the manifest. Readers verify size and hash before
handing data back.
"""
import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from .errors import ArtifactIOError, IntegrityError

logger = logging.getLogger(__name__)

LAB_VERSION = "0.1.0"

ModelT = TypeVar("ModelT", bound=BaseModel)
PathLike = Union[str, Path]


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode("utf-8"))


def sha256_file(path: PathLike) -> str:
    return sha256_bytes(read_bytes(path))


def read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc.strerror or exc}") from exc


def read_text(path: PathLike) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise IntegrityError(f"{path} is not valid UTF-8 text") from exc


def write_bytes(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def write_text(path: PathLike, text: str) -> Path:
    return write_bytes(path, text.encode("utf-8"))


def array_to_blob(values: np.ndarray, dtype: str) -> bytes:
    """Serialise a 1-D array as little-endian `dtype` ('<f4' or '<f8')"""
    return np.ascontiguousarray(values, dtype=np.dtype(dtype)).tobytes()


def blob_to_array(payload: bytes, dtype: str, count: int, source: PathLike) -> np.ndarray:
    item = np.dtype(dtype).itemsize
    if len(payload) != count * item:
        raise IntegrityError(
            f"{source} is truncated or corrupted: expected {count * item} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.dtype(dtype)).astype(np.dtype(dtype).newbyteorder("="))


def write_model_json(path: PathLike, record: BaseModel) -> Path:
    return write_text(path, record.model_dump_json(indent=2) + "\n")


def read_model_json(path: PathLike, model: Type[ModelT]) -> ModelT:
    text = read_text(path)
    try:
        return model.model_validate_json(text)
    except ValidationError as exc:
        raise IntegrityError(f"{path} is not a valid {model.__name__} manifest: {exc.error_count()} problem(s)") from exc


def verify_hash(payload: bytes, expected: str, source: PathLike) -> None:
    actual = sha256_bytes(payload)
    if actual != expected:
        raise IntegrityError(f"content hash mismatch for {source}: manifest says {expected[:12]}…, file is {actual[:12]}…")


def render_csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(cell) for cell in row])
    return buffer.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    return write_text(path, render_csv(header, rows))


def read_csv(path: PathLike) -> List[dict]:
    return list(csv.DictReader(io.StringIO(read_text(path))))


def _csv_cell(cell: object) -> object:
    if isinstance(cell, float):
        return repr(cell)
    if isinstance(cell, np.floating):
        return repr(float(cell))
    return cell


def dump_json(payload: object) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n"
