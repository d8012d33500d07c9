"""Named-tensor checkpoints and the GRAFTCK1 container format.

Layout of a file::

    bytes 0..7     b"GRAFTCK1"
    bytes 8..15    header length L, unsigned 64-bit little-endian
    bytes 16..16+L UTF-8 JSON header
    remainder      concatenated little-endian f32 buffers

The header maps tensor name -> {"dtype": "f32", "shape": [M, N],
"role": ..., "offsets": [begin, end]} with offsets relative to the data
section. An optional "__metadata__" entry holds a string -> string map.
Tensor order in the header is the checkpoint order.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import (
    CheckpointIOError,
    CorruptFileError,
    FormatError,
    InvalidValueError,
    PairingError,
    ShapeError,
)

MAGIC = b"GRAFTCK1"
METADATA_KEY = "__metadata__"
_PREFIX = len(MAGIC) + 8


class TensorRole(str, enum.Enum):
    ATTENTION = "attention"
    MLP = "mlp"
    LORA_A = "lora-A"
    LORA_B = "lora-B"
    OTHER = "other"


def as_matrix(values) -> np.ndarray:
    """Coerce ``values`` to a read-only, C-ordered 2-D float32 array."""
    arr = np.array(values, dtype=np.float32, order="C", copy=True)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {arr.ndim}-D")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be >= 1, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Tensor:
    data: np.ndarray
    role: TensorRole = TensorRole.OTHER

    def __post_init__(self):
        object.__setattr__(self, "data", as_matrix(self.data))
        object.__setattr__(self, "role", TensorRole(self.role))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.role == other.role and self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    __hash__ = None


class Checkpoint:
    """Ordered mapping from tensor name to :class:`Tensor`, plus string metadata.

    Treated as immutable: tensor arrays are read-only and the helpers that
    "modify" a checkpoint return a new one.
    """

    __slots__ = ("_entries", "_metadata")

    def __init__(self, entries: Mapping[str, Tensor] | None = None, metadata: Mapping[str, str] | None = None):
        self._entries: dict[str, Tensor] = {}
        for name, tensor in (entries or {}).items():
            if not isinstance(name, str) or name == METADATA_KEY:
                raise InvalidValueError(f"invalid tensor name {name!r}")
            if not isinstance(tensor, Tensor):
                tensor = Tensor(tensor)
            self._entries[name] = tensor
        self._metadata: dict[str, str] = {}
        for key, value in (metadata or {}).items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise InvalidValueError("metadata must map str to str")
            self._metadata[key] = value

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, object],
        roles: Mapping[str, TensorRole | str] | None = None,
        metadata: Mapping[str, str] | None = None,
    ) -> "Checkpoint":
        roles = roles or {}
        return cls(
            {name: Tensor(arr, TensorRole(roles.get(name, TensorRole.OTHER))) for name, arr in arrays.items()},
            metadata,
        )

    @property
    def metadata(self) -> dict[str, str]:
        return dict(self._metadata)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._entries.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "Checkpoint":
        """New checkpoint with the data of the named tensors swapped, order and roles kept."""
        entries = {}
        for name, tensor in self._entries.items():
            entries[name] = Tensor(updates[name], tensor.role) if name in updates else tensor
        return Checkpoint(entries, self._metadata)

    def with_metadata(self, **extra: str) -> "Checkpoint":
        return Checkpoint(self._entries, {**self._metadata, **extra})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if list(self._entries) != list(other._entries) or self._metadata != other._metadata:
            return False
        for name, t in self._entries.items():
            o = other._entries[name]
            if t != o:
                return False
        return True

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        shapes = ", ".join(f"{n}:{t.shape[0]}x{t.shape[1]}" for n, t in self._entries.items())
        return f"Checkpoint({shapes})"


def check_finite(ckpt: Checkpoint) -> None:
    for name, tensor in ckpt.items():
        if not np.isfinite(tensor.data).all():
            raise InvalidValueError(f"tensor {name!r} contains NaN or Inf")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    check_finite(ckpt)
    header: dict[str, object] = {}
    if ckpt.metadata:
        header[METADATA_KEY] = ckpt.metadata
    buffers = []
    cursor = 0
    for name, tensor in ckpt.items():
        raw = tensor.data.astype("<f4", copy=False).tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(tensor.shape),
            "role": tensor.role.value,
            "offsets": [cursor, cursor + len(raw)],
        }
        buffers.append(raw)
        cursor += len(raw)
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(buffers)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    payload = encode_checkpoint(ckpt)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise CheckpointIOError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def _parse_entry(name: str, spec: object) -> tuple[tuple[int, int], TensorRole, int, int]:
    if not isinstance(spec, dict):
        raise FormatError(f"{name}: header entry must be an object")
    if spec.get("dtype") != "f32":
        raise FormatError(f"{name}: unsupported dtype {spec.get('dtype')!r}")
    shape = spec.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 2
        or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in shape)
    ):
        raise FormatError(f"{name}: shape must be two positive integers, got {shape!r}")
    try:
        role = TensorRole(spec.get("role", TensorRole.OTHER.value))
    except ValueError:
        raise FormatError(f"{name}: unknown role {spec.get('role')!r}") from None
    offsets = spec.get("offsets")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
    ):
        raise FormatError(f"{name}: offsets must be two non-negative integers")
    return (shape[0], shape[1]), role, offsets[0], offsets[1]


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX:
        if MAGIC.startswith(blob[: len(MAGIC)]):
            raise CorruptFileError(f"file too short ({len(blob)} bytes)")
        raise FormatError("bad magic bytes")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic bytes")
    (head_len,) = struct.unpack("<Q", blob[len(MAGIC) : _PREFIX])
    if _PREFIX + head_len > len(blob):
        raise CorruptFileError(f"header length {head_len} exceeds file size")
    try:
        header = json.loads(blob[_PREFIX : _PREFIX + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")

    data = memoryview(blob)[_PREFIX + head_len :]
    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise FormatError("__metadata__ must be a string map")

    entries = {}
    cursor = 0
    for name, spec in header.items():
        (rows, cols), role, begin, end = _parse_entry(name, spec)
        if begin != cursor or end < begin:
            raise CorruptFileError(f"{name}: offsets [{begin}, {end}] overlap or leave a gap")
        if end - begin != rows * cols * 4:
            raise CorruptFileError(f"{name}: buffer of {end - begin} bytes does not hold {rows}x{cols} f32")
        if end > len(data):
            raise CorruptFileError(f"{name}: data section truncated")
        arr = np.frombuffer(data[begin:end], dtype="<f4").reshape(rows, cols)
        if not np.isfinite(arr).all():
            raise InvalidValueError(f"tensor {name!r} contains NaN or Inf")
        entries[name] = Tensor(arr, role)
        cursor = end
    if cursor != len(data):
        raise CorruptFileError(f"data section has {len(data) - cursor} trailing bytes")
    return Checkpoint(entries, metadata)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointIOError(exc.errno, f"cannot read {path}: {exc.strerror}") from exc
    return decode_checkpoint(blob)


def read_header(path: str | os.PathLike) -> dict:
    """Raw header dict of a container file, without materializing tensor data."""
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(_PREFIX)
            if len(prefix) < _PREFIX or prefix[: len(MAGIC)] != MAGIC:
                raise FormatError("bad magic bytes")
            (head_len,) = struct.unpack("<Q", prefix[len(MAGIC) :])
            if head_len > os.fstat(fh.fileno()).st_size - _PREFIX:
                raise CorruptFileError(f"header length {head_len} exceeds file size")
            head = fh.read(head_len)
    except OSError as exc:
        raise CheckpointIOError(exc.errno, f"cannot read {path}: {exc.strerror}") from exc
    if len(head) != head_len:
        raise CorruptFileError("header truncated")
    try:
        return json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from None


@dataclass
class PairReport:
    fusable: list[str] = field(default_factory=list)
    mismatched: list[tuple[str, tuple[int, int], tuple[int, int]]] = field(default_factory=list)
    only_a: list[str] = field(default_factory=list)
    only_b: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.mismatched or self.only_a or self.only_b)


def validate_pair(a: Checkpoint, b: Checkpoint) -> PairReport:
    """Classify every tensor name of ``a`` and ``b`` exactly once."""
    report = PairReport()
    for name, tensor in a.items():
        if name not in b:
            report.only_a.append(name)
        elif tensor.shape == b[name].shape:
            report.fusable.append(name)
        else:
            report.mismatched.append((name, tensor.shape, b[name].shape))
    report.only_b = [name for name in b if name not in a]
    return report


def adapter_name(tensor_name: str) -> str:
    """``"layers.0.q.A"`` -> ``"layers.0.q"``; the last dotted component names the factor."""
    return tensor_name.rsplit(".", 1)[0] if "." in tensor_name else tensor_name


def lora_pairs(ckpt: Checkpoint) -> dict[str, tuple[str, str]]:
    """Map adapter name -> (A tensor name, B tensor name).

    Raises PairingError when an adapter lacks one factor, has a duplicate,
    or when B's column count differs from A's row count (the rank).
    """
    found: dict[str, dict[TensorRole, str]] = {}
    for name, tensor in ckpt.items():
        if tensor.role not in (TensorRole.LORA_A, TensorRole.LORA_B):
            continue
        slot = found.setdefault(adapter_name(name), {})
        if tensor.role in slot:
            raise PairingError(adapter_name(name), f"duplicate {tensor.role.value} tensor")
        slot[tensor.role] = name
    pairs = {}
    for adapter, slot in found.items():
        if TensorRole.LORA_A not in slot or TensorRole.LORA_B not in slot:
            missing = "lora-B" if TensorRole.LORA_A in slot else "lora-A"
            raise PairingError(adapter, f"missing {missing} tensor")
        a_name, b_name = slot[TensorRole.LORA_A], slot[TensorRole.LORA_B]
        rank = ckpt[a_name].shape[0]
        if ckpt[b_name].shape[1] != rank:
            raise PairingError(adapter, f"B has {ckpt[b_name].shape[1]} columns but A has rank {rank}")
        pairs[adapter] = (a_name, b_name)
    return pairs
