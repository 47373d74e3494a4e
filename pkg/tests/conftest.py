import numpy as np
import pytest
from realmerge.archive import Role
from realmerge.archive import TensorArchive
from realmerge.archive import task_vector
from realmerge.model import ModelShape
from realmerge.model import init_model


def make_archive(tensors, archive_id="", **meta):
    """
    Build an archive from ``name -> (role, array)``.
    """
    entries = {}
    for name, (role, values) in tensors.items():
        values = np.asarray(values, dtype=np.float64)
        entries[name] = (values.shape, Role(role), values.reshape(-1))
    if archive_id:
        meta["id"] = archive_id
    return TensorArchive(entries, meta)


def vector_archive(values, archive_id="", name="w"):
    return make_archive({name: ("other", values)}, archive_id)


@pytest.fixture
def archive_factory():
    return make_archive


@pytest.fixture
def rng():
    return np.random.default_rng(20260)


@pytest.fixture
def tiny_shape():
    return ModelShape(p=6, h=5, d=4)


@pytest.fixture
def tiny_base(tiny_shape):
    return init_model(tiny_shape, seed=3)


@pytest.fixture
def tiny_specialists(tiny_base):
    """
    Three perturbed copies of ``tiny_base`` with distinct ids.
    """
    rng = np.random.default_rng(11)
    specialists = []
    for index in range(3):
        tensors = {
            name: entry.data + 0.1 * rng.normal(size=entry.size)
            for name, entry in tiny_base.entries.items()
        }
        specialists.append(tiny_base.replace(tensors).with_meta(id=f"spec-{index}"))
    return specialists


@pytest.fixture
def tiny_taus(tiny_base, tiny_specialists):
    return [task_vector(spec, tiny_base) for spec in tiny_specialists]
