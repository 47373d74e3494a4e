"""
realmerge - training-free checkpoint merging
Copyright (C) 2026 realmerge maintainers

Closed-form merging
===================
Weight Averaging, Task Arithmetic, TIES, CART and Real-aware Residual Merging (R2M), plus
averaged heads.

:codeauthor:    realmerge maintainers
:maturity:      new
:depends:       numpy
:platform:      all

All merges return an update :class:`~realmerge.archive.TaskVector`; :func:`merge_archives`
applies it to the base and attaches the averaged specialist head.

R2M in short:

1. ``tau_bar`` is the mean task vector, ``M_c`` the row-centered task matrix.
2. The Real core is ``tau_core = V_k V_k^T tau_bar`` with ``V_k`` the top-``k`` right singular
   vectors of ``M_c``.
3. Residuals ``delta_i = tau_i - tau_bar`` are rank-truncated per attention/MLP slice.
4. Truncated residuals are rescaled to the mean residual norm and averaged.
5. ``update = tau_core + eta * tau_res_merge``.

.. note::
    Every merge sorts specialists by ``specialist_id`` before summing, so outputs do not depend
    on the order in which specialists are passed in.
"""
import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from pathlib import Path

import numpy as np

from realmerge.archive import apply_update
from realmerge.archive import classify_slices
from realmerge.archive import task_vector
from realmerge.archive import vnorm
from realmerge.exceptions import ConfigError
from realmerge.exceptions import LayoutMismatchError
from realmerge.linalg import Projector
from realmerge.linalg import gram_right_singular
from realmerge.linalg import thin_svd
from realmerge.linalg import truncate_rank

# Globals
log = logging.getLogger(__name__)

DEGENERATE_CORE_CUTOFF = 1e-12


class MergeMethod(str, enum.Enum):
    WA = "wa"
    TA = "ta"
    TIES = "ties"
    CART = "cart"
    R2M = "r2m"


class EtaVariant(str, enum.Enum):
    """
    ``core_norm``: ``eta = alpha * ||tau_core||``.
    ``core_over_res_norm``: ``eta = alpha * ||tau_core|| / (||tau_res_merge|| + eps)``, which
    makes the residual block's final norm ``alpha * ||tau_core||``.
    """

    CORE_NORM = "core_norm"
    CORE_OVER_RES_NORM = "core_over_res_norm"


TUNING_GRIDS = {
    MergeMethod.WA: {},
    MergeMethod.TA: {"alpha": (0.5, 1.0)},
    MergeMethod.TIES: {"sparsity_p": (0.1, 0.3, 0.5, 0.7)},
    MergeMethod.CART: {"alpha": (0.5, 1.0), "rank_frac": (0.1, 0.3, 0.5, 0.7)},
    MergeMethod.R2M: {"alpha": (0.4, 0.5, 0.6), "rank_frac": (0.1, 0.3, 0.5, 0.7)},
}


@dataclass
class MergeConfig:
    """
    Method selector and hyperparameters.

    method
        One of ``wa``, ``ta``, ``ties``, ``cart``, ``r2m``.

    alpha
        R2M residual scale, or the global scale of TA and CART. Default is ``0.5``.

    rank_frac
        Retained rank per slice as a fraction of ``min(m, n)``. Default is ``0.7``.

    k
        Rank of the Real core. Default is ``1``.

    sparsity_p
        Fraction of coordinates TIES keeps per task. Default is ``0.3``.

    eps
        Norm-matching guard. Default is ``1e-12``.

    eta_variant
        ``core_over_res_norm`` (default) or ``core_norm``.

    wa_anchor
        TIES only: anchor the trimmed, sign-elected sum at the weight average instead of
        taking the disjoint mean. Default is ``False``.
    """

    method: MergeMethod = MergeMethod.R2M
    alpha: float = 0.5
    rank_frac: float = 0.7
    k: int = 1
    sparsity_p: float = 0.3
    eps: float = 1e-12
    eta_variant: EtaVariant = EtaVariant.CORE_OVER_RES_NORM
    wa_anchor: bool = False

    def __post_init__(self):
        try:
            self.method = MergeMethod(self.method)
            self.eta_variant = EtaVariant(self.eta_variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.alpha = float(self.alpha)
        self.rank_frac = float(self.rank_frac)
        self.sparsity_p = float(self.sparsity_p)
        self.eps = float(self.eps)
        self.k = int(self.k)
        self.wa_anchor = bool(self.wa_anchor)
        if self.alpha < 0.0 or not math.isfinite(self.alpha):
            raise ConfigError(f"alpha must be a finite value >= 0, got {self.alpha}")
        if not 0.0 < self.rank_frac <= 1.0:
            raise ConfigError(f"rank_frac must be in (0, 1], got {self.rank_frac}")
        if not 0.0 < self.sparsity_p <= 1.0:
            raise ConfigError(f"sparsity_p must be in (0, 1], got {self.sparsity_p}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")

    def off_grid(self):
        """
        Names of hyperparameters the selected method uses that lie off the tuning grid.
        """
        grid = TUNING_GRIDS[self.method]
        return [name for name, values in grid.items() if getattr(self, name) not in values]

    @property
    def label(self):
        """
        Short, stable identifier used for report and file names.
        """
        if self.method == MergeMethod.WA:
            return "wa"
        if self.method == MergeMethod.TA:
            return f"ta-a{self.alpha:g}"
        if self.method == MergeMethod.TIES:
            return f"ties-p{self.sparsity_p:g}" + ("-anchor" if self.wa_anchor else "")
        if self.method == MergeMethod.CART:
            return f"cart-e{self.alpha:g}-r{self.rank_frac:g}"
        label = f"r2m-a{self.alpha:g}-r{self.rank_frac:g}-k{self.k}"
        return label + ("-cn" if self.eta_variant == EtaVariant.CORE_NORM else "")

    def to_dict(self):
        data = asdict(self)
        data["method"] = self.method.value
        data["eta_variant"] = self.eta_variant.value
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown MergeConfig keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"Cannot read merge config {path}: {exc}") from exc
        return cls.from_dict(data)


def grid_configs(method, **overrides):
    """
    Every config of the tuning grid for ``method``.
    """
    method = MergeMethod(method)
    grid = TUNING_GRIDS[method]
    configs = [dict(overrides, method=method)]
    for name, values in grid.items():
        configs = [dict(cfg, **{name: value}) for cfg in configs for value in values]
    return [MergeConfig(**cfg) for cfg in configs]


@dataclass
class CoreDecomposition:
    """
    Everything R2M computes on the way to the update, kept for inspection.
    """

    tau_bar: object
    top_vectors: Projector
    top_values: np.ndarray
    tau_core: object
    residuals: list
    truncated: list
    matched: list
    m_mean: float
    res_merge: object
    eta: float
    retained_ranks: dict = field(default_factory=dict)
    degenerate: bool = False

    def summary(self):
        return {
            "tau_core_norm": vnorm(self.tau_core),
            "tau_bar_norm": vnorm(self.tau_bar),
            "res_merge_norm": vnorm(self.res_merge),
            "m_mean": self.m_mean,
            "eta": self.eta,
            "core_rank": self.top_vectors.rank,
            "top_values": [float(v) for v in self.top_values],
            "retained_ranks": dict(self.retained_ranks),
            "degenerate": self.degenerate,
        }


@dataclass
class HeadSet:
    """
    Equal-shape specialist heads.
    """

    heads: list

    @property
    def averaged(self):
        return average_head(self)


def _sorted(taus):
    if not taus:
        raise ConfigError("At least one task vector is required")
    first = taus[0]
    for other in taus[1:]:
        if not first.compatible(other):
            raise LayoutMismatchError("Task vectors have different layouts")
    return sorted(taus, key=lambda tau: tau.specialist_id)


def _stack(taus):
    return np.stack([tau.values for tau in taus])


def _require_pair(taus, what):
    if len(taus) < 2:
        raise ConfigError(f"{what} needs at least two specialists, got {len(taus)}")


def slice_rank(rank_frac, rows, cols):
    """
    ``max(1, round(rank_frac * min(m, n)))`` with halves rounded up.
    """
    return max(1, int(math.floor(rank_frac * min(rows, cols) + 0.5)))


def merge_wa(base, taus):  # pylint: disable=unused-argument
    """
    Uniform mean of the task vectors.
    """
    taus = _sorted(taus)
    mean = np.sum(_stack(taus), axis=0) / len(taus)
    return taus[0].with_values(mean, specialist_id="wa")


def merge_ta(base, taus, alpha):
    """
    ``alpha`` times the weight average.
    """
    averaged = merge_wa(base, taus)
    return averaged.with_values(alpha * averaged.values, specialist_id="ta")


def ties_trim(tau, p):
    """
    Keep the ``ceil(p * D)`` largest-magnitude coordinates of ``tau``, ties to the lower index.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"p must be in (0, 1], got {p}")
    values = tau.values
    dim = values.size
    keep = min(dim, max(1, int(math.ceil(p * dim - 1e-9)))) if dim else 0
    order = np.argsort(-np.abs(values), kind="stable")
    trimmed = np.zeros_like(values)
    trimmed[order[:keep]] = values[order[:keep]]
    return tau.with_values(trimmed)


def _elect(trimmed):
    elected = np.sign(np.sum(trimmed, axis=0))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0.0)
    return elected, agree


def merge_ties(base, taus, p, wa_anchor=False):
    """
    Trim, elect a sign per coordinate, drop disagreeing entries, then take the disjoint mean.

    With ``wa_anchor`` the sign-elected trimmed vectors are summed on top of the weight
    average instead.
    """
    taus = _sorted(taus)
    trimmed = _stack([ties_trim(tau, p) for tau in taus])
    _, agree = _elect(trimmed)
    kept = np.where(agree, trimmed, 0.0)
    if wa_anchor:
        log.info("TIES anchored at the weight average (wa_anchor=True)")
        averaged = merge_wa(base, taus)
        return averaged.with_values(averaged.values + np.sum(kept, axis=0), specialist_id="ties")
    log.info("TIES anchored at the base with a disjoint mean (wa_anchor=False)")
    counts = np.sum(agree, axis=0)
    total = np.sum(kept, axis=0)
    merged = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    return taus[0].with_values(merged, specialist_id="ties")


def _truncate_one(values, slices, rank_frac):
    out = np.array(values, dtype=np.float64)
    ranks = {}
    for layer in slices:
        r_abs = slice_rank(rank_frac, layer.rows, layer.cols)
        block = truncate_rank(layer.view(values), r_abs)
        out[layer.offset : layer.offset + layer.size] = block.reshape(-1)
        ranks[layer.name] = r_abs
    return out, ranks


def layer_truncate(residuals, slices, rank_frac, threads=1):
    """
    Rank-truncate every slice of every residual. Pass-through tensors are copied unchanged.

    Returns ``(truncated, retained_ranks)``.
    """
    if threads > 1 and len(residuals) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda res: _truncate_one(res.values, slices, rank_frac), residuals)
            )
    else:
        results = [_truncate_one(res.values, slices, rank_frac) for res in residuals]
    truncated = [res.with_values(values) for res, (values, _) in zip(residuals, results)]
    ranks = results[0][1] if results else {}
    return truncated, ranks


def _centered(taus, tau_bar):
    return [tau.with_values(tau.values - tau_bar.values) for tau in taus]


def merge_cart(base, taus, eta, rank_frac, threads=1):
    """
    ``tau_bar + eta * mean_i LayerTrunc(tau_i - tau_bar)``.
    """
    taus = _sorted(taus)
    _require_pair(taus, "CART")
    tau_bar = merge_wa(base, taus)
    slices = classify_slices(tau_bar, base)
    truncated, _ = layer_truncate(_centered(taus, tau_bar), slices, rank_frac, threads)
    low_rank = np.sum(_stack(truncated), axis=0) / len(truncated)
    return tau_bar.with_values(tau_bar.values + eta * low_rank, specialist_id="cart")


def r2m_core(taus, k):
    """
    Real core of the task vectors.

    Returns ``(tau_core, basis, tau_bar, singular_values)``. If every singular value of the
    centered task matrix is below ``1e-12`` times the mean task-vector norm, the core falls back
    to ``tau_bar`` with an empty basis.
    """
    taus = _sorted(taus)
    _require_pair(taus, "R2M")
    if k > len(taus) - 1:
        raise ConfigError(f"k={k} exceeds N-1={len(taus) - 1}")
    stacked = _stack(taus)
    tau_bar = taus[0].with_values(np.sum(stacked, axis=0) / len(taus), specialist_id="tau_bar")
    centered = stacked - tau_bar.values
    singular = np.sqrt(np.maximum(thin_svd(centered @ centered.T).S, 0.0))
    scale = float(np.mean([vnorm(tau) for tau in taus]))
    if float(np.max(singular)) <= DEGENERATE_CORE_CUTOFF * scale:
        log.info("Centered task matrix is degenerate, falling back to tau_core = tau_bar")
        core = tau_bar.with_values(tau_bar.values, specialist_id="tau_core")
        return core, Projector.empty(tau_bar.dim), tau_bar, singular
    basis, _ = gram_right_singular(centered, k)
    projector = Projector(basis)
    core = tau_bar.with_values(basis @ (basis.T @ tau_bar.values), specialist_id="tau_core")
    log.debug(f"Real core: |tau_bar|={vnorm(tau_bar):.4g}, |tau_core|={vnorm(core):.4g}")
    return core, projector, tau_bar, singular


def r2m_residuals(taus, tau_bar, rank_frac, slices, threads=1):
    """
    Centered residuals truncated per slice. Returns ``(residuals, truncated, retained_ranks)``.
    """
    taus = _sorted(taus)
    residuals = _centered(taus, tau_bar)
    truncated, ranks = layer_truncate(residuals, slices, rank_frac, threads)
    return residuals, truncated, ranks


def r2m_norm_match(truncated, eps):
    """
    Rescale every truncated residual to the mean residual norm.

    Returns ``(matched, m_mean)``; a zero residual stays zero.
    """
    if not truncated:
        raise ConfigError("At least one residual is required")
    norms = np.array([vnorm(res) for res in truncated])
    m_mean = float(np.sum(norms) / len(norms))
    matched = [
        res.with_values(m_mean * res.values / (norm + eps)) for res, norm in zip(truncated, norms)
    ]
    return matched, m_mean


def r2m_merge(base, taus, cfg, threads=1):
    """
    Full R2M update.

    base
        Base archive (supplies roles for slice classification).

    taus
        Task vectors of at least two specialists.

    cfg
        :class:`MergeConfig` with ``method = r2m``.

    threads
        Worker threads for per-residual truncation. Results do not depend on it.

    Returns ``(update, decomposition)``.
    """
    if cfg.method != MergeMethod.R2M:
        raise ConfigError(f"r2m_merge called with method {cfg.method.value}")
    taus = _sorted(taus)
    core, basis, tau_bar, singular = r2m_core(taus, cfg.k)
    slices = classify_slices(tau_bar, base)
    degenerate = basis.rank == 0
    if degenerate:
        residuals = [tau.with_values(np.zeros(tau.dim)) for tau in taus]
        truncated = list(residuals)
        ranks = {layer.name: slice_rank(cfg.rank_frac, layer.rows, layer.cols) for layer in slices}
    else:
        residuals, truncated, ranks = r2m_residuals(taus, tau_bar, cfg.rank_frac, slices, threads)
    matched, m_mean = r2m_norm_match(truncated, cfg.eps)
    res_merge = tau_bar.with_values(
        np.sum(_stack(matched), axis=0) / len(matched), specialist_id="res_merge"
    )
    core_norm = vnorm(core)
    if cfg.eta_variant == EtaVariant.CORE_NORM:
        eta = cfg.alpha * core_norm
    else:
        eta = cfg.alpha * core_norm / (vnorm(res_merge) + cfg.eps)
    update = core.with_values(core.values + eta * res_merge.values, specialist_id="r2m")
    log.debug(f"R2M: eta={eta:.4g} ({cfg.eta_variant.value}), m_mean={m_mean:.4g}")
    decomp = CoreDecomposition(
        tau_bar=tau_bar,
        top_vectors=basis,
        top_values=singular,
        tau_core=core,
        residuals=residuals,
        truncated=truncated,
        matched=matched,
        m_mean=m_mean,
        res_merge=res_merge,
        eta=eta,
        retained_ranks=ranks,
        degenerate=degenerate,
    )
    return update, decomp


def average_head(heads):
    """
    Elementwise mean of equal-shape heads, summed in list order.
    """
    arrays = [np.asarray(head, dtype=np.float64) for head in heads.heads]
    if not arrays:
        raise ConfigError("At least one head is required")
    shape = arrays[0].shape
    if any(arr.shape != shape for arr in arrays):
        raise LayoutMismatchError("Heads have different shapes")
    total = np.zeros(shape)
    for arr in arrays:
        total = total + arr
    return total / len(arrays)


def average_heads(specialists):
    """
    Averaged head tensors of a list of specialist archives, sorted by archive id.
    """
    ordered = sorted(specialists, key=lambda archive: archive.archive_id)
    return {
        name: average_head(HeadSet([archive.entries[name].array() for archive in ordered]))
        for name in ordered[0].head_names()
    }


def merge_updates(base, taus, cfg, threads=1):
    """
    Dispatch to the backbone merge selected by ``cfg``. Returns ``(update, decomposition)``;
    the decomposition is ``None`` for every method but R2M.
    """
    off = cfg.off_grid()
    if off:
        log.info(f"{cfg.method.value}: off-grid hyperparameters {off}")
    if cfg.method == MergeMethod.WA:
        return merge_wa(base, taus), None
    if cfg.method == MergeMethod.TA:
        return merge_ta(base, taus, cfg.alpha), None
    if cfg.method == MergeMethod.TIES:
        return merge_ties(base, taus, cfg.sparsity_p, cfg.wa_anchor), None
    if cfg.method == MergeMethod.CART:
        return merge_cart(base, taus, cfg.alpha, cfg.rank_frac, threads), None
    return r2m_merge(base, taus, cfg, threads)


def merge_archives(base, specialists, cfg, threads=1):
    """
    Merge specialist archives into one model: backbone via ``cfg``, head via
    :func:`average_heads`.

    base
        Shared pretrained archive.

    specialists
        Fine-tuned archives with the same names, shapes and roles as ``base``.

    cfg
        :class:`MergeConfig`.

    Returns ``(merged_archive, decomposition_or_None)``.

    CLI Example:

    .. code-block:: bash

        realmerge merge base.ckpt fs.ckpt fr.ckpt efs.ckpt --method r2m --alpha 0.5 --rank-frac 0.7 --out merged.ckpt
    """
    if not specialists:
        raise ConfigError("At least one specialist is required")
    log.debug(f"Merging {len(specialists)} specialists with {cfg.label}")
    taus = [task_vector(archive, base) for archive in specialists]
    update, decomp = merge_updates(base, taus, cfg, threads)
    heads = average_heads(specialists) if base.head_names() else {}
    merged = apply_update(base, update, heads)
    merged = merged.with_meta(
        id=f"merged-{cfg.label}",
        method=cfg.method.value,
        config=json.dumps(cfg.to_dict(), sort_keys=True),
        specialists=",".join(sorted(archive.archive_id for archive in specialists)),
    )
    return merged, decomp
