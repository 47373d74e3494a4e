import json
import struct

import numpy as np
import pytest
from realmerge.archive import Role
from realmerge.archive import TaskVector
from realmerge.archive import TensorArchive
from realmerge.archive import apply_update
from realmerge.archive import archive_bytes
from realmerge.archive import classify_slices
from realmerge.archive import flatten
from realmerge.archive import load_archive
from realmerge.archive import save_archive
from realmerge.archive import task_vector
from realmerge.archive import vaxpy
from realmerge.archive import vdot
from realmerge.archive import vnorm
from realmerge.exceptions import ArchiveError
from realmerge.exceptions import LayoutMismatchError

from tests.conftest import make_archive
from tests.conftest import vector_archive

ROLES = [role.value for role in Role]


def _random_archive(rng, n_tensors):
    tensors = {}
    for index in range(n_tensors):
        shape = tuple(int(dim) for dim in rng.integers(1, 5, size=rng.integers(1, 3)))
        tensors[f"t{rng.integers(1000)}.{index}"] = (
            ROLES[rng.integers(len(ROLES))],
            rng.normal(size=shape).astype(np.float32),
        )
    return make_archive(tensors, f"random-{n_tensors}")


def _write_raw(path, header, payload=b""):
    header_bytes = json.dumps(header).encode("utf-8")
    path.write_bytes(struct.pack("<Q", len(header_bytes)) + header_bytes + payload)


def test_zero_tensor_round_trip(tmp_path):
    path = tmp_path / "zeros.ckpt"
    save_archive(make_archive({"w": ("mlp", np.zeros((2, 2)))}), path)
    loaded = load_archive(path)
    assert loaded.names() == ["w"]
    assert loaded["w"].shape == (2, 2)
    assert loaded["w"].role == Role.MLP
    assert np.array_equal(loaded["w"].data, np.zeros(4))


def test_round_trip_bytes_identical(tmp_path, rng):
    for case in range(50):
        archive = _random_archive(rng, 5)
        first = tmp_path / f"a{case}.ckpt"
        second = tmp_path / f"b{case}.ckpt"
        save_archive(archive, first)
        save_archive(load_archive(first), second)
        assert first.read_bytes() == second.read_bytes()
        assert load_archive(second).equals(archive)


def test_empty_archive(tmp_path):
    path = tmp_path / "empty.ckpt"
    save_archive(TensorArchive({}), path)
    loaded = load_archive(path)
    assert len(loaded) == 0
    assert loaded.meta == {}


def test_payload_in_name_order(tmp_path):
    archive = make_archive({"b": ("other", [2.0]), "a": ("other", [1.0])})
    raw = archive_bytes(archive)
    (header_len,) = struct.unpack_from("<Q", raw, 0)
    header = json.loads(raw[8 : 8 + header_len])
    assert header["a"]["offset"] == [0, 4]
    assert header["b"]["offset"] == [4, 8]
    payload = np.frombuffer(raw[8 + header_len :], dtype="<f4")
    assert payload.tolist() == [1.0, 2.0]


def test_meta_round_trip(tmp_path):
    path = tmp_path / "meta.ckpt"
    save_archive(vector_archive([1.0], "spec-a").with_meta(note="x"), path)
    assert load_archive(path).meta == {"id": "spec-a", "note": "x"}


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.ckpt"
    header = {"w": {"dtype": "f32", "shape": [4], "role": "other", "offset": [0, 16]}}
    _write_raw(path, header, np.zeros(2, dtype="<f4").tobytes())
    with pytest.raises(ArchiveError) as exc:
        load_archive(path)
    assert exc.value.code == "truncated-payload"


@pytest.mark.parametrize(
    "header",
    [
        {"w": {"dtype": "f64", "shape": [1], "role": "other", "offset": [0, 4]}},
        {"w": {"dtype": "f32", "shape": [2], "role": "other", "offset": [0, 4]}},
        {"w": {"dtype": "f32", "shape": [1], "role": "bogus", "offset": [0, 4]}},
        {"w": {"dtype": "f32", "shape": [1], "role": "other"}},
        {"__meta__": {"id": 3}},
        [1, 2],
    ],
)
def test_malformed_header(tmp_path, header):
    path = tmp_path / "bad.ckpt"
    _write_raw(path, header, np.zeros(1, dtype="<f4").tobytes())
    with pytest.raises(ArchiveError) as exc:
        load_archive(path)
    assert exc.value.code == "malformed-header"


def test_header_longer_than_file(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(ArchiveError) as exc:
        load_archive(path)
    assert exc.value.code == "malformed-header"


def _entry(begin, end):
    return {"dtype": "f32", "shape": [(end - begin) // 4], "role": "other", "offset": [begin, end]}


@pytest.mark.parametrize(
    "header",
    [
        {"a": _entry(0, 4), "b": _entry(8, 12)},
        {"a": _entry(0, 8), "b": _entry(4, 12)},
        {"a": _entry(4, 8), "b": _entry(0, 4)},
        {"a": _entry(0, 4)},
    ],
    ids=["gap", "overlap", "out-of-order", "trailing-bytes"],
)
def test_payload_layout_checked(tmp_path, header):
    path = tmp_path / "bad.ckpt"
    _write_raw(path, header, np.zeros(3, dtype="<f4").tobytes())
    with pytest.raises(ArchiveError) as exc:
        load_archive(path)
    assert exc.value.code == "malformed-header"


def test_duplicate_name(tmp_path):
    path = tmp_path / "dup.ckpt"
    entry = '{"dtype": "f32", "shape": [1], "role": "other", "offset": [0, 4]}'
    header_bytes = f'{{"w": {entry}, "w": {entry}}}'.encode("utf-8")
    path.write_bytes(struct.pack("<Q", len(header_bytes)) + header_bytes + bytes(4))
    with pytest.raises(ArchiveError) as exc:
        load_archive(path)
    assert exc.value.code == "duplicate-name"


def test_non_finite(tmp_path):
    path = tmp_path / "nan.ckpt"
    header = {"w": {"dtype": "f32", "shape": [2], "role": "other", "offset": [0, 8]}}
    _write_raw(path, header, np.array([1.0, np.nan], dtype="<f4").tobytes())
    with pytest.raises(ArchiveError) as exc:
        load_archive(path)
    assert exc.value.code == "non-finite"


def test_missing_file(tmp_path):
    with pytest.raises(ArchiveError) as exc:
        load_archive(tmp_path / "nope.ckpt")
    assert exc.value.code == "missing-file"


def test_unwritable_path(tmp_path):
    with pytest.raises(ArchiveError) as exc:
        save_archive(vector_archive([1.0]), tmp_path / "missing-dir" / "a.ckpt")
    assert exc.value.code == "unwritable-path"


def test_task_vector_identity():
    base = vector_archive([1.0, 2.0], "base")
    tau = task_vector(base, base)
    assert np.array_equal(tau.values, [0.0, 0.0])


def test_task_vector_difference():
    tau = task_vector(vector_archive([3.0, 5.0], "spec"), vector_archive([1.0, 2.0], "base"))
    assert tau.values.tolist() == [2.0, 3.0]
    assert tau.base_id == "base"
    assert tau.specialist_id == "spec"


def test_task_vector_skips_heads():
    base = make_archive({"body": ("mlp", np.zeros((2, 2))), "head.w": ("head", [1.0, 1.0])})
    spec = make_archive({"body": ("mlp", np.ones((2, 2))), "head.w": ("head", [5.0, 5.0])})
    tau = task_vector(spec, base)
    assert tau.dim == 4
    assert [entry.name for entry in tau.layout] == ["body"]


def test_task_vector_layout_mismatch():
    with pytest.raises(LayoutMismatchError):
        task_vector(vector_archive([1.0, 2.0, 3.0]), vector_archive([1.0, 2.0]))
    with pytest.raises(LayoutMismatchError):
        task_vector(vector_archive([1.0], name="a"), vector_archive([1.0], name="b"))


def test_apply_update():
    base = vector_archive([0.0, 0.0])
    zero = task_vector(base, base)
    assert apply_update(base, zero).equals(base)
    update = zero.with_values([1.0, -1.0])
    assert apply_update(base, update)["w"].data.tolist() == [1.0, -1.0]


def test_apply_update_heads():
    base = make_archive({"body": ("mlp", np.zeros((1, 2))), "head.w": ("head", [0.0])})
    update = task_vector(base, base).with_values([2.0, 3.0])
    merged = apply_update(base, update, {"head.w": [7.0]})
    assert merged["body"].data.tolist() == [2.0, 3.0]
    assert merged["head.w"].data.tolist() == [7.0]
    with pytest.raises(LayoutMismatchError):
        apply_update(base, update, {"body": [0.0, 0.0]})


def test_apply_then_task_vector():
    base = vector_archive([0.5, 1.5, -2.0])
    update = task_vector(base, base).with_values([0.25, -0.5, 1.0])
    assert np.array_equal(task_vector(apply_update(base, update), base).values, update.values)


def test_vector_ops():
    u = TaskVector([3.0, 4.0], (("w", (2,), 0),))
    v = u.with_values([1.0, 2.0])
    assert vnorm(u) == 5.0
    assert vdot(u, u) == pytest.approx(vnorm(u) ** 2, rel=1e-15)
    assert vaxpy(2.0, u, v).values.tolist() == [7.0, 10.0]
    other = TaskVector([1.0, 2.0], (("x", (2,), 0),))
    with pytest.raises(LayoutMismatchError):
        vdot(u, other)


def test_task_vector_layout_checked():
    with pytest.raises(LayoutMismatchError):
        TaskVector([1.0, 2.0, 3.0], (("w", (2,), 0),))


def test_classify_biases_only():
    base = make_archive({"b1": ("mlp", [1.0, 2.0]), "b2": ("attention", [3.0])})
    assert classify_slices(task_vector(base, base), base) == []


def test_classify_excludes_head():
    base = make_archive({"attn.w": ("attention", np.eye(4)), "head.w": ("head", np.ones((2, 4)))})
    slices = classify_slices(task_vector(base, base), base)
    assert [layer.name for layer in slices] == ["attn.w"]
    assert (slices[0].rows, slices[0].cols, slices[0].offset) == (4, 4, 0)


def test_flatten_order():
    archive = make_archive({"z": ("other", [3.0]), "a": ("mlp", [[1.0, 2.0]])})
    assert flatten(archive).tolist() == [1.0, 2.0, 3.0]
