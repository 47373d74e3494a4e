"""
realmerge - training-free checkpoint merging
Copyright (C) 2026 realmerge maintainers

Tensor archives and task vectors
================================
Load, save and do exact arithmetic on named-tensor checkpoint archives.

:codeauthor:    realmerge maintainers
:maturity:      new
:depends:       numpy
:platform:      all

An archive file is laid out as follows (all integers little-endian):

* bytes ``0..8``: unsigned 64-bit header length ``H``
* bytes ``8..8+H``: UTF-8 JSON object mapping tensor name to
  ``{"dtype": "f32", "shape": [...], "role": "...", "offset": [begin, end]}``, plus an optional
  ``"__meta__"`` string map
* the rest: raw little-endian float32 payload, tensors concatenated in name-sorted order,
  offsets relative to the payload start

Tensors are stored as float32 and widened exactly to float64 on load. All merge math runs in
float64; :func:`save_archive` rounds back to float32.

.. note::
    Head tensors (role ``head``) never enter a task vector. They are merged separately with
    :func:`realmerge.merge.average_head`.
"""
import enum
import json
import logging
import struct
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np

from realmerge.exceptions import ArchiveError
from realmerge.exceptions import LayoutMismatchError

# Globals
log = logging.getLogger(__name__)

META_KEY = "__meta__"
HEADER_LEN_FMT = "<Q"
PAYLOAD_DTYPE = np.dtype("<f4")


class Role(str, enum.Enum):
    """
    Role tag of a tensor. Only ``attention`` and ``mlp`` matrices are rank-truncated.
    """

    ATTENTION = "attention"
    MLP = "mlp"
    HEAD = "head"
    OTHER = "other"


TRUNCATABLE_ROLES = (Role.ATTENTION, Role.MLP)


def _frozen(array):
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class TensorEntry:
    """
    A single named tensor: shape, role and row-major float64 data.
    """

    shape: tuple
    role: Role
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(dim) for dim in self.shape)
        if any(dim < 1 for dim in shape):
            raise ArchiveError(
                f"Tensor shape {shape} has non-positive dimensions", "malformed-header"
            )
        data = _frozen(np.asarray(self.data, dtype=np.float64).reshape(-1))
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ArchiveError(
                f"Tensor data length {data.size} does not match shape {shape}", "malformed-header"
            )
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "data", data)

    @property
    def size(self):
        return self.data.size

    def array(self):
        """
        Return the data reshaped to ``shape`` (read-only view).
        """
        return self.data.reshape(self.shape)


@dataclass(frozen=True)
class TensorArchive:
    """
    Ordered, immutable collection of named tensors.

    Iteration order is the lexicographic order of tensor names.
    """

    entries: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        entries = {}
        for name in sorted(self.entries):
            entry = self.entries[name]
            if not isinstance(entry, TensorEntry):
                entry = TensorEntry(*entry)
            entries[name] = entry
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in dict(self.meta).items()})

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name):
        return self.entries[name]

    def names(self, roles=None):
        """
        Tensor names in sorted order, optionally restricted to ``roles``.
        """
        if roles is None:
            return list(self.entries)
        roles = {Role(role) for role in roles}
        return [name for name, entry in self.entries.items() if entry.role in roles]

    def backbone_names(self):
        """
        Names of every non-head tensor, in flattening order.
        """
        return [name for name, entry in self.entries.items() if entry.role != Role.HEAD]

    def head_names(self):
        return self.names([Role.HEAD])

    @property
    def archive_id(self):
        return self.meta.get("id", "")

    def with_meta(self, **meta):
        merged = dict(self.meta)
        merged.update({k: str(v) for k, v in meta.items()})
        return TensorArchive(self.entries, merged)

    def replace(self, tensors, meta=None):
        """
        Return a copy in which the tensors named in ``tensors`` (name -> array) are replaced.
        """
        entries = dict(self.entries)
        for name, values in tensors.items():
            old = entries[name]
            entries[name] = TensorEntry(old.shape, old.role, np.asarray(values).reshape(-1))
        return TensorArchive(entries, self.meta if meta is None else meta)

    def equals(self, other, atol=0.0):
        """
        Compare names, shapes, roles and data (exactly unless ``atol`` is given).
        """
        if list(self.entries) != list(other.entries):
            return False
        for name, entry in self.entries.items():
            theirs = other.entries[name]
            if entry.shape != theirs.shape or entry.role != theirs.role:
                return False
            if atol:
                if not np.allclose(entry.data, theirs.data, rtol=0.0, atol=atol):
                    return False
            elif not np.array_equal(entry.data, theirs.data):
                return False
        return True


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class TaskVector:
    """
    Flattened parameter difference ``specialist - base`` over the non-head tensors.

    ``layout`` maps the flat vector back to named tensors; two task vectors are
    arithmetic-compatible iff their layouts are identical.
    """

    values: np.ndarray
    layout: tuple
    base_id: str = ""
    specialist_id: str = ""

    def __post_init__(self):
        layout = tuple(
            entry
            if isinstance(entry, LayoutEntry)
            else LayoutEntry(entry[0], tuple(entry[1]), int(entry[2]))
            for entry in self.layout
        )
        values = _frozen(np.asarray(self.values, dtype=np.float64).reshape(-1))
        expected = 0
        for entry in layout:
            if entry.offset != expected:
                raise LayoutMismatchError(f"Layout offsets are not contiguous at {entry.name}")
            expected += entry.size
        if expected != values.size:
            raise LayoutMismatchError(
                f"Layout covers {expected} values but the vector holds {values.size}"
            )
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.values.size

    def compatible(self, other):
        return self.layout == other.layout

    def with_values(self, values, specialist_id=None):
        return TaskVector(
            values,
            self.layout,
            base_id=self.base_id,
            specialist_id=self.specialist_id if specialist_id is None else specialist_id,
        )

    def tensor(self, name):
        """
        Return the slice of the vector belonging to tensor ``name``, reshaped.
        """
        for entry in self.layout:
            if entry.name == name:
                return self.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)
        raise KeyError(name)


@dataclass(frozen=True)
class LayerSlice:
    """
    A 2-D attention/MLP tensor inside a task vector.
    """

    name: str
    rows: int
    cols: int
    offset: int

    @property
    def size(self):
        return self.rows * self.cols

    def view(self, values):
        return values[self.offset : self.offset + self.size].reshape(self.rows, self.cols)


def _fail(message, code):
    log.error(message)
    raise ArchiveError(message, code)


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ArchiveError(f"Duplicate tensor name '{key}' in header", "duplicate-name")
        seen[key] = value
    return seen


def load_archive(path):
    """
    Load an archive file.

    path
        Path to the archive file.

    Raises :class:`~realmerge.exceptions.ArchiveError` with one of the codes
    ``missing-file``, ``malformed-header``, ``truncated-payload``, ``duplicate-name`` or
    ``non-finite``.

    CLI Example:

    .. code-block:: bash

        realmerge inspect specialist_fs.ckpt
    """
    path = Path(path)
    log.debug(f"Loading archive {path}")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        _fail(f"Cannot read archive {path}: {exc}", "missing-file")

    if len(raw) < 8:
        _fail(f"Archive {path} is shorter than its header length field", "malformed-header")
    (header_len,) = struct.unpack_from(HEADER_LEN_FMT, raw, 0)
    if 8 + header_len > len(raw):
        _fail(f"Header of {path} claims {header_len} bytes, file is too short", "malformed-header")
    try:
        header = json.loads(
            raw[8 : 8 + header_len].decode("utf-8"), object_pairs_hook=_reject_duplicates
        )
    except ArchiveError as exc:
        log.error(str(exc))
        raise
    except (UnicodeDecodeError, ValueError) as exc:
        _fail(f"Header of {path} is not valid UTF-8 JSON: {exc}", "malformed-header")
    if not isinstance(header, dict):
        _fail(f"Header of {path} is not a JSON object", "malformed-header")

    meta = header.pop(META_KEY, {})
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        _fail(f"'{META_KEY}' of {path} is not a string map", "malformed-header")

    payload = memoryview(raw)[8 + header_len :]
    entries = {}
    expected = 0
    for name in sorted(header):
        info = header[name]
        try:
            dtype = info["dtype"]
            shape = [int(dim) for dim in info["shape"]]
            role = Role(info["role"])
            begin, end = (int(pos) for pos in info["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            _fail(f"Tensor '{name}' in {path} has a malformed entry: {exc}", "malformed-header")
        if dtype != "f32":
            _fail(f"Tensor '{name}' in {path} has unsupported dtype {dtype}", "malformed-header")
        count = int(np.prod(shape, dtype=np.int64))
        if begin < 0 or end - begin != count * PAYLOAD_DTYPE.itemsize:
            _fail(
                f"Tensor '{name}' in {path} has offsets that do not match its shape",
                "malformed-header",
            )
        if end > len(payload):
            _fail(
                f"Tensor '{name}' in {path} ends at {end} but the payload has {len(payload)} bytes",
                "truncated-payload",
            )
        if begin != expected:
            _fail(
                f"Tensor '{name}' in {path} starts at {begin}, expected {expected}: payload "
                "chunks must be contiguous and in name order",
                "malformed-header",
            )
        expected = end
        data = np.frombuffer(payload[begin:end], dtype=PAYLOAD_DTYPE).astype(np.float64)
        if not np.all(np.isfinite(data)):
            _fail(f"Tensor '{name}' in {path} contains non-finite values", "non-finite")
        entries[name] = TensorEntry(tuple(shape), role, data)
    if expected != len(payload):
        _fail(
            f"Archive {path} has {len(payload) - expected} payload bytes no tensor claims",
            "malformed-header",
        )

    log.debug(f"Loaded {len(entries)} tensors from {path}")
    return TensorArchive(entries, meta)


def archive_bytes(archive):
    """
    Serialize an archive to bytes. Deterministic: tensors in name-sorted order.
    """
    header = {}
    chunks = []
    offset = 0
    for name, entry in archive.entries.items():
        chunk = entry.data.astype(PAYLOAD_DTYPE).tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(entry.shape),
            "role": entry.role.value,
            "offset": [offset, offset + len(chunk)],
        }
        chunks.append(chunk)
        offset += len(chunk)
    if archive.meta:
        header[META_KEY] = dict(sorted(archive.meta.items()))
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(HEADER_LEN_FMT, len(header_bytes)) + header_bytes + b"".join(chunks)


def save_archive(archive, path):
    """
    Write ``archive`` to ``path``.

    archive
        The :class:`TensorArchive` to write. Values are rounded to float32.

    path
        Destination file. Parent directories must exist.
    """
    path = Path(path)
    log.debug(f"Saving archive with {len(archive)} tensors to {path}")
    data = archive_bytes(archive)
    try:
        path.write_bytes(data)
    except OSError as exc:
        _fail(f"Cannot write archive {path}: {exc}", "unwritable-path")


def _check_pair(specialist, base):
    if list(specialist.entries) != list(base.entries):
        missing = set(specialist.entries) ^ set(base.entries)
        raise LayoutMismatchError(f"Archives differ in tensor names: {sorted(missing)}")
    for name, entry in base.entries.items():
        other = specialist.entries[name]
        if other.shape != entry.shape or other.role != entry.role:
            raise LayoutMismatchError(
                f"Tensor '{name}' differs: {other.shape}/{other.role.value} vs "
                f"{entry.shape}/{entry.role.value}"
            )


def backbone_layout(archive):
    """
    Flat layout of every non-head tensor in name-sorted order.
    """
    layout = []
    offset = 0
    for name in archive.backbone_names():
        entry = archive.entries[name]
        layout.append(LayoutEntry(name, entry.shape, offset))
        offset += entry.size
    return tuple(layout)


def flatten(archive):
    """
    Concatenate the non-head tensors of ``archive`` into one float64 vector.
    """
    names = archive.backbone_names()
    if not names:
        return np.zeros(0)
    return np.concatenate([archive.entries[name].data for name in names])


def task_vector(specialist, base):
    """
    Compute ``specialist - base`` over all non-head tensors.

    specialist
        Fine-tuned archive.

    base
        Shared pretrained archive. Names, shapes and roles must match ``specialist``.
    """
    _check_pair(specialist, base)
    values = flatten(specialist) - flatten(base)
    return TaskVector(
        values,
        backbone_layout(base),
        base_id=base.archive_id,
        specialist_id=specialist.archive_id,
    )


def apply_update(base, update, heads=None):
    """
    Return ``base + update`` on the non-head tensors.

    base
        Base archive.

    update
        :class:`TaskVector` whose layout matches the non-head layout of ``base``.

    heads
        Optional mapping of head tensor name to replacement values (for example the averaged
        head). Head tensors not listed are copied unchanged from ``base``.
    """
    if update.layout != backbone_layout(base):
        raise LayoutMismatchError("Update layout does not match the base archive")
    tensors = {}
    for entry in update.layout:
        block = update.values[entry.offset : entry.offset + entry.size]
        tensors[entry.name] = base.entries[entry.name].data + block
    for name, values in (heads or {}).items():
        if base.entries[name].role != Role.HEAD:
            raise LayoutMismatchError(f"Tensor '{name}' is not a head tensor")
        tensors[name] = np.asarray(values, dtype=np.float64)
    return base.replace(tensors)


def _require_compatible(*vectors):
    first = vectors[0]
    for other in vectors[1:]:
        if not first.compatible(other):
            raise LayoutMismatchError("Task vectors have different layouts")


def vnorm(u):
    """
    Euclidean norm. Accumulates in numpy's fixed pairwise order over the flat vector.
    """
    return float(np.sqrt(np.sum(u.values * u.values)))


def vdot(u, v):
    _require_compatible(u, v)
    return float(np.sum(u.values * v.values))


def vaxpy(a, u, v):
    """
    ``a * u + v``; the result keeps the identifiers of ``v``.
    """
    _require_compatible(u, v)
    return v.with_values(a * u.values + v.values)


def classify_slices(update, archive):
    """
    Return one :class:`LayerSlice` per 2-D attention/MLP tensor of ``update``.

    Every other tensor is pass-through: it joins norms and averages but is never truncated.
    """
    slices = []
    for entry in update.layout:
        tensor = archive.entries[entry.name]
        if tensor.role in TRUNCATABLE_ROLES and len(entry.shape) == 2:
            slices.append(LayerSlice(entry.name, entry.shape[0], entry.shape[1], entry.offset))
    log.debug(f"{len(slices)} of {len(update.layout)} tensors are truncatable slices")
    return slices
