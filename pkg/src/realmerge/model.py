"""
realmerge - training-free checkpoint merging
Copyright (C) 2026 realmerge maintainers

Toy detector model
==================
A two-layer detector stored as a :class:`~realmerge.archive.TensorArchive`, with its pre-logit
feature map, scores and analytic logistic-loss gradients.

:codeauthor:    realmerge maintainers
:maturity:      new
:depends:       numpy, scipy
:platform:      all

Layout (``p`` inputs, ``h`` hidden units, ``d`` features):

=========================  ========  ==========
tensor                     shape     role
=========================  ========  ==========
``backbone.fc1.weight``    h x p     mlp
``backbone.fc1.bias``      h         other
``backbone.proj.weight``   d x h     attention
``backbone.proj.bias``     d         other
``head.weight``            1 x d     head
``head.bias``              1         head
=========================  ========  ==========

``phi(x) = W2 tanh(W1 x + b1) + b2`` and ``score(x) = w . phi(x) + c``.
"""
import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from realmerge.archive import Role
from realmerge.archive import TensorArchive
from realmerge.exceptions import DegenerateError
from realmerge.exceptions import LayoutMismatchError

# Globals
log = logging.getLogger(__name__)

FC1_WEIGHT = "backbone.fc1.weight"
FC1_BIAS = "backbone.fc1.bias"
PROJ_WEIGHT = "backbone.proj.weight"
PROJ_BIAS = "backbone.proj.bias"
HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"


class ClassTag(str, enum.Enum):
    REAL = "real"
    OWN_FAKE = "own_fake"
    OTHER_FAKE = "other_fake"


@dataclass(frozen=True)
class ModelShape:
    p: int = 32
    h: int = 16
    d: int = 8


@dataclass(frozen=True)
class Dataset:
    """
    Labelled samples. ``y`` is ``0`` for Real and ``1`` for Fake; ``family`` names the generator
    family each sample was drawn for.
    """

    x: np.ndarray
    y: np.ndarray
    family: np.ndarray
    sample_ids: np.ndarray

    def __len__(self):
        return int(self.y.size)

    def subset(self, mask):
        mask = np.asarray(mask)
        return Dataset(self.x[mask], self.y[mask], self.family[mask], self.sample_ids[mask])

    def select(self, class_tag, family_id=None):
        """
        Samples of one class. ``own_fake`` and ``other_fake`` are relative to ``family_id``.
        """
        class_tag = ClassTag(class_tag)
        if class_tag == ClassTag.REAL:
            return self.subset(self.y == 0)
        if family_id is None:
            raise DegenerateError(f"class_tag {class_tag.value} needs a family_id")
        own = self.family == family_id
        if class_tag == ClassTag.OWN_FAKE:
            return self.subset((self.y == 1) & own)
        return self.subset((self.y == 1) & ~own)

    @classmethod
    def concat(cls, datasets):
        datasets = list(datasets)
        return cls(
            np.concatenate([ds.x for ds in datasets]),
            np.concatenate([ds.y for ds in datasets]),
            np.concatenate([ds.family for ds in datasets]),
            np.concatenate([ds.sample_ids for ds in datasets]),
        )


def model_shape(archive):
    try:
        h, p = archive.entries[FC1_WEIGHT].shape
        d = archive.entries[PROJ_WEIGHT].shape[0]
    except KeyError as exc:
        raise LayoutMismatchError(f"Archive is not a toy detector: missing {exc}") from exc
    return ModelShape(p, h, d)


def init_model(shape, seed):
    """
    Seeded initialization shared by every specialist: Gaussian weights with variance
    ``1 / fan_in`` and zero biases.
    """
    rng = np.random.default_rng(seed)
    fc1 = rng.normal(0.0, shape.p**-0.5, (shape.h, shape.p))
    proj = rng.normal(0.0, shape.h**-0.5, (shape.d, shape.h))
    head = rng.normal(0.0, shape.d**-0.5, (1, shape.d))
    tensors = {
        FC1_WEIGHT: ((shape.h, shape.p), Role.MLP, fc1),
        FC1_BIAS: ((shape.h,), Role.OTHER, np.zeros(shape.h)),
        PROJ_WEIGHT: ((shape.d, shape.h), Role.ATTENTION, proj),
        PROJ_BIAS: ((shape.d,), Role.OTHER, np.zeros(shape.d)),
        HEAD_WEIGHT: ((1, shape.d), Role.HEAD, head),
        HEAD_BIAS: ((1,), Role.HEAD, np.zeros(1)),
    }
    entries = {name: (shp, role, data.reshape(-1)) for name, (shp, role, data) in tensors.items()}
    return TensorArchive(entries, {"id": "base", "seed": seed})


def params_of(archive):
    return {name: entry.array() for name, entry in archive.entries.items()}


def _check_inputs(archive, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = model_shape(archive).p
    if x.shape[1] != p:
        raise LayoutMismatchError(f"Inputs have {x.shape[1]} features, the model expects {p}")
    return x


def _forward(params, x):
    hidden = np.tanh(x @ params[FC1_WEIGHT].T + params[FC1_BIAS])
    phi = hidden @ params[PROJ_WEIGHT].T + params[PROJ_BIAS]
    return hidden, phi


def features(archive, x):
    """
    Pre-logit features ``phi(x)``, one row per input.
    """
    x = _check_inputs(archive, x)
    return _forward(params_of(archive), x)[1]


def scores(archive, x):
    """
    Detector logits ``w . phi(x) + c``; larger means more likely Fake.
    """
    x = _check_inputs(archive, x)
    params = params_of(archive)
    _, phi = _forward(params, x)
    return phi @ params[HEAD_WEIGHT][0] + params[HEAD_BIAS][0]


def logistic_loss(archive, data):
    logits = scores(archive, data.x)
    return float(np.mean(np.logaddexp(0.0, logits) - data.y * logits))


def param_gradients(params, x, y):
    """
    Mean logistic loss and its gradient for a parameter dict (tensor name -> shaped array).
    """
    hidden, phi = _forward(params, x)
    w = params[HEAD_WEIGHT][0]
    logits = phi @ w + params[HEAD_BIAS][0]
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))

    g_logit = (expit(logits) - y) / y.size
    g_phi = np.outer(g_logit, w)
    g_pre = (g_phi @ params[PROJ_WEIGHT]) * (1.0 - hidden * hidden)
    grads = {
        HEAD_WEIGHT: (phi.T @ g_logit)[None, :],
        HEAD_BIAS: np.array([np.sum(g_logit)]),
        PROJ_WEIGHT: g_phi.T @ hidden,
        PROJ_BIAS: np.sum(g_phi, axis=0),
        FC1_WEIGHT: g_pre.T @ x,
        FC1_BIAS: np.sum(g_pre, axis=0),
    }
    return loss, grads


def loss_and_gradients(archive, data):
    """
    Mean logistic loss over ``data`` and its gradient for every tensor of ``archive``.
    """
    x = _check_inputs(archive, data.x)
    return param_gradients(params_of(archive), x, np.asarray(data.y, dtype=np.float64))
