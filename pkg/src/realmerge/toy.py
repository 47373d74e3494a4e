"""
realmerge - training-free checkpoint merging
Copyright (C) 2026 realmerge maintainers

Toy merging protocol
====================
Desk-scale end-to-end runs: synthetic generator families, tiny specialists trained by gradient
descent from one shared initialization, every merge method, and the seen/unseen evaluation.

:codeauthor:    realmerge maintainers
:maturity:      new
:depends:       numpy
:platform:      all

Every family shares the Real distribution ``N(real_mean, noise^2 I)``. A family's Fake samples
are the Real distribution shifted by ``real_gap`` along one real axis common to all families,
plus ``cue_strength`` along the family's own cue. Seen families differ in how far their Fakes
sit from Real along the axis; unseen families sit at the nominal gap with fresh cues, so the
axis transfers to them and the cues do not. The axis, the cues and ``real_mean`` are built
orthogonal to each other.

Output directory layout written by :func:`run_protocol`::

    base.ckpt
    specialists/<family>.ckpt
    merged/<label>.ckpt
    reports/<label>.json
    comparison.txt
    ablation.txt            (only with tune)
    similarity.json

An incremental re-merge adds ``specialists/<new family>.ckpt``,
``merged/incremental-<label>.ckpt``, ``reports/incremental-<label>.json`` and
``comparison-incremental.txt`` without touching any existing file.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from pathlib import Path

import numpy as np

from realmerge.archive import load_archive
from realmerge.archive import save_archive
from realmerge.exceptions import ConfigError
from realmerge.exceptions import DivergenceError
from realmerge.merge import MergeConfig
from realmerge.merge import MergeMethod
from realmerge.merge import TUNING_GRIDS
from realmerge.merge import grid_configs
from realmerge.merge import merge_archives
from realmerge.metrics import EvalReport
from realmerge.metrics import ScoreSet
from realmerge.metrics import auc
from realmerge.metrics import feature_similarity
from realmerge.metrics import render_table
from realmerge.model import Dataset
from realmerge.model import ModelShape
from realmerge.model import init_model
from realmerge.model import param_gradients
from realmerge.model import params_of
from realmerge.model import scores

# Globals
log = logging.getLogger(__name__)

MAX_CUE_COS = 0.5
DIVERGENCE_FACTOR = 10.0
SIMILARITY_TAGS = ("real", "own_fake", "other_fake")


def _unit_or_fail(vec, what):
    vec = np.asarray(vec, dtype=np.float64)
    if abs(np.linalg.norm(vec) - 1.0) > 1e-12:
        raise ConfigError(f"{what} is not a unit vector")
    return vec


@dataclass(frozen=True)
class ToyGeneratorFamily:
    """
    One synthetic generator. ``real_axis`` may be omitted only when ``real_gap`` is zero.
    """

    family_id: str
    real_mean: np.ndarray
    cue: np.ndarray
    cue_strength: float = 1.5
    noise_scale: float = 0.25
    seed: int = 0
    real_axis: np.ndarray = None
    real_gap: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cue", _unit_or_fail(self.cue, f"Cue of family {self.family_id}"))
        object.__setattr__(self, "real_mean", np.asarray(self.real_mean, dtype=np.float64))
        if self.real_axis is not None:
            axis = _unit_or_fail(self.real_axis, f"Real axis of family {self.family_id}")
            object.__setattr__(self, "real_axis", axis)
        elif self.real_gap != 0.0:
            raise ConfigError(f"Family {self.family_id} has a real_gap but no real_axis")

    @property
    def fake_shift(self):
        """
        Mean offset of the Fake samples from ``real_mean``.
        """
        shift = self.cue_strength * self.cue
        if self.real_axis is not None:
            shift = shift + self.real_gap * self.real_axis
        return shift


@dataclass
class ToySpecialist:
    checkpoint: object
    losses: list
    family_id: str
    converged: bool = True


def _default_merge_configs():
    return [
        {"method": "wa"},
        {"method": "ta", "alpha": 0.5},
        {"method": "ties", "sparsity_p": 0.3},
        {"method": "cart", "alpha": 0.5, "rank_frac": 0.7},
        {"method": "r2m", "alpha": 0.5, "rank_frac": 0.7, "eta_variant": "core_norm"},
    ]


@dataclass
class ProtocolConfig:
    """
    Everything :func:`run_protocol` needs. Sample counts are per class and per family.

    ``real_gap`` is the nominal Fake offset along the shared real axis. Seen families get
    ``real_gap * f`` with ``f`` spread evenly over ``[1 - real_gap_spread, 1 + real_gap_spread]``
    in a seeded order; unseen and reserve families get ``real_gap`` itself.
    """

    seed: int = 0
    n_seen: int = 4
    n_unseen: int = 2
    p: int = 32
    h: int = 16
    d: int = 8
    real_gap: float = 1.5
    real_gap_spread: float = 0.6
    cue_strength: float = 0.2
    noise_scale: float = 1.0
    real_mean_norm: float = 1.0
    n_train: int = 2000
    n_val: int = 300
    n_test: int = 1000
    epochs: int = 400
    step_size: float = 0.1
    loss_threshold: float = 0.68
    merge_configs: list = field(default_factory=_default_merge_configs)
    incremental: bool = False
    tune: bool = False
    all_in_one: bool = True
    scaling_sizes: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_seen < 1 or self.n_unseen < 0:
            raise ConfigError("n_seen must be >= 1 and n_unseen >= 0")
        if min(self.n_train, self.n_test) < 1 or self.n_val < 0:
            raise ConfigError("n_train and n_test must be >= 1")
        if self.epochs < 0 or self.step_size <= 0.0:
            raise ConfigError("epochs must be >= 0 and step_size > 0")
        if not 0.0 <= self.real_gap_spread < 1.0:
            raise ConfigError(f"real_gap_spread must be in [0, 1), got {self.real_gap_spread}")
        if self.p < self.n_seen + self.n_unseen + 3:
            raise ConfigError(
                f"p={self.p} cannot hold {self.n_seen + self.n_unseen + 1} cues next to "
                "the real axis and the real mean"
            )
        self.merge_configs = [
            cfg if isinstance(cfg, MergeConfig) else MergeConfig.from_dict(cfg)
            for cfg in self.merge_configs
        ]
        self.scaling_sizes = [int(n) for n in self.scaling_sizes]
        if any(n < 1 or n > self.n_seen for n in self.scaling_sizes):
            raise ConfigError(f"scaling_sizes must lie in [1, {self.n_seen}]")

    @classmethod
    def cue_only(cls, **overrides):
        """
        Families told apart by their cues alone (no real gap): strong cues, low noise and small
        splits. The similarity table is read on this geometry.
        """
        preset = {
            "real_gap": 0.0,
            "cue_strength": 1.5,
            "noise_scale": 0.25,
            "n_train": 100,
            "n_val": 50,
            "n_test": 100,
            "epochs": 300,
            "loss_threshold": 0.6,
        }
        preset.update(overrides)
        return cls(**preset)

    @property
    def shape(self):
        return ModelShape(self.p, self.h, self.d)

    def to_dict(self):
        data = asdict(self)
        data["merge_configs"] = [cfg.to_dict() for cfg in self.merge_configs]
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown ProtocolConfig keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"Cannot read protocol config {path}: {exc}") from exc
        return cls.from_dict(data)


### DATA ###


def _unit(vec):
    return vec / np.linalg.norm(vec)


def _accept(candidate, cues):
    return all(abs(float(np.dot(candidate, cue))) <= MAX_CUE_COS for cue in cues)


def _orthogonal_draw(rng, p, against):
    """
    Random unit vector orthogonal to every vector in ``against``.
    """
    basis, _ = np.linalg.qr(np.stack(against, axis=1))
    vec = rng.normal(size=p)
    return _unit(vec - basis @ (basis.T @ vec))


def seen_gap_factors(cfg, rng):
    """
    Per seen family multipliers of ``real_gap``: evenly spread around 1, in a seeded order.
    """
    if cfg.n_seen == 1:
        return np.ones(1)
    spread = cfg.real_gap_spread
    return rng.permutation(np.linspace(1.0 - spread, 1.0 + spread, cfg.n_seen))


def make_families(cfg):
    """
    Seen, unseen and one reserve family (for incremental merging).

    All families share one real axis. Cues are orthogonal to it with pairwise
    ``|cos| <= 0.5``, and ``real_mean`` is orthogonal to the axis and every cue.

    Returns ``(seen, unseen, reserve)``.
    """
    rng = np.random.default_rng(cfg.seed)
    axis = _unit(rng.normal(size=cfg.p))
    cues = []

    def _draw():
        for _ in range(1000):
            fresh = _orthogonal_draw(rng, cfg.p, [axis])
            if _accept(fresh, cues):
                cues.append(fresh)
                return fresh
        raise ConfigError(f"Cannot place {len(cues) + 1} cues with |cos| <= {MAX_CUE_COS}")

    seen_cues = [_draw() for _ in range(cfg.n_seen)]
    unseen_cues = [_draw() for _ in range(cfg.n_unseen)]
    reserve_cue = _draw()
    real_mean = cfg.real_mean_norm * _orthogonal_draw(rng, cfg.p, [axis] + cues)
    factors = seen_gap_factors(cfg, rng)

    def _family(family_id, cue, index, gap):
        return ToyGeneratorFamily(
            family_id,
            real_mean,
            cue,
            cfg.cue_strength,
            cfg.noise_scale,
            seed=cfg.seed * 1000 + index,
            real_axis=axis,
            real_gap=float(gap),
        )

    seen = [
        _family(f"seen-{i}", cue, i, cfg.real_gap * factor)
        for i, (cue, factor) in enumerate(zip(seen_cues, factors))
    ]
    unseen = [
        _family(f"unseen-{i}", cue, 100 + i, cfg.real_gap) for i, cue in enumerate(unseen_cues)
    ]
    reserve = _family("new-0", reserve_cue, 200, cfg.real_gap)
    log.debug(f"Seen real gaps: {[round(family.real_gap, 4) for family in seen]}")
    return seen, unseen, reserve


def gen_toy_data(family, n_per_class, split_seed):
    """
    ``n_per_class`` Real and ``n_per_class`` Fake samples of ``family``.

    family
        :class:`ToyGeneratorFamily`.

    n_per_class
        Samples per label, at least 1.

    split_seed
        Combined with the family seed to seed the draw.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng([family.seed, split_seed])
    dim = family.real_mean.size
    real = family.real_mean + family.noise_scale * rng.normal(size=(n_per_class, dim))
    fake = family.real_mean + family.fake_shift
    fake = fake + family.noise_scale * rng.normal(size=(n_per_class, dim))
    ids = np.array([f"{family.family_id}/{split_seed}/{k}" for k in range(2 * n_per_class)])
    return Dataset(
        x=np.vstack([real, fake]),
        y=np.concatenate([np.zeros(n_per_class, dtype=int), np.ones(n_per_class, dtype=int)]),
        family=np.full(2 * n_per_class, family.family_id),
        sample_ids=ids,
    )


def split_dataset(data, sizes, seed):
    """
    Split ``data`` into disjoint parts with ``sizes[j]`` samples per class each.
    """
    rng = np.random.default_rng(seed)
    parts = [[] for _ in sizes]
    for label in (0, 1):
        index = rng.permutation(np.flatnonzero(data.y == label))
        if sum(sizes) > index.size:
            raise ConfigError(f"Cannot split {index.size} samples into {list(sizes)}")
        start = 0
        for part, size in zip(parts, sizes):
            part.extend(index[start : start + size])
            start += size
    return [data.subset(np.sort(np.array(part, dtype=int))) for part in parts]


### TRAINING ###


def train_specialist(data, epochs, step_size, seed, init=None, family_id="", shape=None):
    """
    Full-batch gradient descent on the logistic loss.

    data
        :class:`~realmerge.model.Dataset` with both labels.

    epochs
        Number of steps; ``0`` returns the initialization.

    step_size
        Gradient step.

    seed
        Seed of the shared initialization when ``init`` is not given.

    init
        Shared initialization archive.

    Raises :class:`~realmerge.exceptions.DivergenceError` when the loss exceeds ten times its
    initial value.
    """
    if len(data) == 0 or np.unique(data.y).size < 2:
        raise ConfigError("Training data needs both Real and Fake samples")
    init = init if init is not None else init_model(shape or ModelShape(), seed)
    params = {name: np.array(value) for name, value in params_of(init).items()}
    x = np.asarray(data.x, dtype=np.float64)
    y = np.asarray(data.y, dtype=np.float64)
    losses = []
    for _ in range(epochs):
        loss, grads = param_gradients(params, x, y)
        losses.append(loss)
        if loss > DIVERGENCE_FACTOR * losses[0] or not np.isfinite(loss):
            message = f"Training of {family_id or 'specialist'} diverged: loss {loss:.4g}"
            log.error(message)
            raise DivergenceError(message, losses)
        for name, grad in grads.items():
            params[name] = params[name] - step_size * grad
    losses.append(param_gradients(params, x, y)[0])
    archive_id = f"specialist-{family_id}" if family_id else "specialist"
    checkpoint = init.replace(params).with_meta(id=archive_id)
    log.debug(f"Trained {family_id}: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return ToySpecialist(checkpoint, losses, family_id)


def model_auc(archive, data, task_id=""):
    return auc(ScoreSet.from_labels(scores(archive, data.x), data.y, task_id))


### PROTOCOL ###


@dataclass
class ProtocolData:
    base: object
    seen: list
    unseen: list
    reserve: ToyGeneratorFamily
    train: dict
    val: dict
    test: dict


@dataclass
class ProtocolResult:
    reports: list
    table: str
    similarity: dict
    specialists: list
    all_in_one: EvalReport = None
    scaling: dict = field(default_factory=dict)
    tuned: dict = field(default_factory=dict)
    ablation: list = field(default_factory=list)
    incremental: list = field(default_factory=list)


def _family_splits(family, cfg):
    total = cfg.n_train + cfg.n_val + cfg.n_test
    data = gen_toy_data(family, total, cfg.seed)
    return split_dataset(data, (cfg.n_train, cfg.n_val, cfg.n_test), [cfg.seed, family.seed])


def prepare(cfg):
    """
    Families, shared initialization and disjoint train/validation/test splits.
    """
    seen, unseen, reserve = make_families(cfg)
    train, val, test = {}, {}, {}
    for family in seen + unseen + [reserve]:
        train[family.family_id], val[family.family_id], test[family.family_id] = _family_splits(
            family, cfg
        )
    return ProtocolData(init_model(cfg.shape, cfg.seed), seen, unseen, reserve, train, val, test)


def _map(func, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def train_specialists(cfg, data, families, threads=1):
    def _train(family):
        specialist = train_specialist(
            data.train[family.family_id],
            cfg.epochs,
            cfg.step_size,
            cfg.seed,
            init=data.base,
            family_id=family.family_id,
        )
        specialist.converged = specialist.losses[-1] <= cfg.loss_threshold
        if not specialist.converged:
            log.warning(
                f"{family.family_id}: final loss {specialist.losses[-1]:.4f} is above "
                f"{cfg.loss_threshold}"
            )
        return specialist

    return _map(_train, families, threads)


def _specialist_aucs(specialists, data):
    seen = {}
    unseen = {}
    for spec in specialists:
        seen[spec.family_id] = model_auc(spec.checkpoint, data.test[spec.family_id], spec.family_id)
        unseen[spec.family_id] = {
            fam.family_id: model_auc(spec.checkpoint, data.test[fam.family_id])
            for fam in data.unseen
        }
    return seen, unseen


def evaluate(model, label, config, families, data, spec_seen, spec_unseen, split="test"):
    """
    :class:`~realmerge.metrics.EvalReport` of ``model`` on ``families`` (seen) and the unseen
    families of ``data``.
    """
    splits = getattr(data, split)
    auc_seen = {f.family_id: model_auc(model, splits[f.family_id], f.family_id) for f in families}
    auc_unseen = {f.family_id: model_auc(model, data.test[f.family_id]) for f in data.unseen}
    return EvalReport.build(label, config, auc_seen, spec_seen, auc_unseen, spec_unseen)


def similarity_table(wa_model, specialists, samples):
    """
    Cosine similarity between the weight-averaged model and every specialist on the Real, own
    Fake and other Fake samples of ``samples``. Classes with no samples are left out.
    """
    result = {}
    for specialist in specialists:
        family = specialist.family_id
        tags = [tag for tag in SIMILARITY_TAGS if len(samples.select(tag, family))]
        result[family] = {
            tag: feature_similarity(wa_model, specialist.checkpoint, samples, tag, family)
            for tag in tags
        }
    return result


def _similarity_set(specialists, data):
    return Dataset.concat(data.test[s.family_id] for s in specialists)


def run_similarity(cfg, threads=1):
    """
    Train the specialists of ``cfg`` and return only the similarity table against their weight
    average.
    """
    data = prepare(cfg)
    specialists = train_specialists(cfg, data, data.seen, threads)
    wa_model, _ = merge_archives(
        data.base, [s.checkpoint for s in specialists], MergeConfig(method=MergeMethod.WA), threads
    )
    return similarity_table(wa_model, specialists, _similarity_set(specialists, data))


def _merge_and_eval(
    merge_cfg, specialists, data, families, spec_seen, spec_unseen, threads, split="test"
):  # pylint: disable=too-many-arguments
    checkpoints = [s.checkpoint for s in specialists]
    merged, decomp = merge_archives(data.base, checkpoints, merge_cfg, threads)
    report = evaluate(
        merged, merge_cfg.label, merge_cfg.to_dict(), families, data, spec_seen, spec_unseen, split
    )
    if decomp is not None:
        report.config["decomposition"] = decomp.summary()
    return merged, report


def tune_configs(cfg, specialists, data, spec_seen, spec_unseen, threads=1):
    """
    Pick, per method, the grid config with the best mean seen validation AUC.

    The first configured config of each method supplies the hyperparameters the grid does not
    cover (``k``, ``eta_variant``, ``wa_anchor``, ``eps``). Returns ``(tuned, rows)`` where
    ``rows`` holds one ablation row per evaluated candidate.
    """
    configured = {}
    for merge_cfg in cfg.merge_configs:
        configured.setdefault(merge_cfg.method, merge_cfg)
    tuned, rows = {}, []
    for method, merge_cfg in configured.items():
        grid = TUNING_GRIDS[method]
        fixed = {
            name: value
            for name, value in merge_cfg.to_dict().items()
            if name != "method" and name not in grid
        }
        best, best_score = None, -np.inf
        for candidate in grid_configs(method, **fixed):
            _, report = _merge_and_eval(
                candidate, specialists, data, data.seen, spec_seen, spec_unseen, threads, "val"
            )
            score = float(np.mean(list(report.auc_per_task.values())))
            log.debug(f"Tuning {candidate.label}: validation AUC {score:.4f}")
            row = {"method": method.value, "label": candidate.label, "val_auc": score}
            row.update({name: getattr(candidate, name) for name in grid})
            rows.append(row)
            if score > best_score:
                best, best_score = candidate, score
        tuned[method.value] = best
        for row in rows:
            if row["label"] == best.label:
                row["selected"] = True
        log.info(f"Tuned {method.value}: {best.label} (validation AUC {best_score:.4f})")
    return tuned, rows


ABLATION_COLUMNS = ("method", "label", "alpha", "rank_frac", "sparsity_p", "val_auc", "selected")


def render_ablation(rows):
    """
    Aligned text table of the tuning grid: one row per candidate, ``*`` marks the selection.
    """
    table = [list(ABLATION_COLUMNS)]
    for row in rows:
        cells = []
        for name in ABLATION_COLUMNS:
            value = row.get(name)
            if name == "selected":
                cells.append("*" if value else "")
            elif isinstance(value, float):
                cells.append(f"{value:.4f}" if name == "val_auc" else f"{value:g}")
            else:
                cells.append("-" if value is None else str(value))
        table.append(cells)
    widths = [max(len(line[col]) for line in table) for col in range(len(ABLATION_COLUMNS))]
    lines = [
        "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip() for line in table
    ]
    return "\n".join(lines) + "\n"


def scaling_sweep(cfg, specialists, data, threads=1):
    """
    Seen and unseen mean AUC of every merge config when merging the first ``n`` specialists.
    """
    sweep = {}
    ordered = sorted(specialists, key=lambda s: s.family_id)
    for merge_cfg in cfg.merge_configs:
        rows = {}
        for size in cfg.scaling_sizes:
            subset = ordered[:size]
            if size < 2 and merge_cfg.method in (MergeMethod.CART, MergeMethod.R2M):
                continue
            families = [f for f in data.seen if f.family_id in {s.family_id for s in subset}]
            _, report = _merge_and_eval(merge_cfg, subset, data, families, None, None, threads)
            rows[size] = {
                "seen": float(np.mean(list(report.auc_per_task.values()))),
                "unseen": report.unseen_mean_auc,
            }
        sweep[merge_cfg.label] = rows
    return sweep


def _write(out_dir, name, archive):
    path = out_dir / name
    path.parent.mkdir(parents=True, exist_ok=True)
    save_archive(archive, path)


def _write_report(out_dir, name, report):
    path = out_dir / "reports" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n", encoding="utf-8")


def run_protocol(cfg, out_dir=None, threads=1):
    """
    Train, merge with every configured method and evaluate.

    cfg
        :class:`ProtocolConfig`.

    out_dir
        Optional output directory (see the module docstring for its layout).

    threads
        Worker threads for training and truncation. Results do not depend on it.

    CLI Example:

    .. code-block:: bash

        realmerge protocol --seed 0 --out runs/seed0
    """
    data = prepare(cfg)
    specialists = train_specialists(cfg, data, data.seen, threads)
    spec_seen, spec_unseen = _specialist_aucs(specialists, data)

    merge_cfgs = list(cfg.merge_configs)
    tuned, ablation = {}, []
    if cfg.tune:
        tuned, ablation = tune_configs(cfg, specialists, data, spec_seen, spec_unseen, threads)
        merge_cfgs = list(tuned.values())

    merged_models, reports = {}, []
    for merge_cfg in merge_cfgs:
        merged, report = _merge_and_eval(
            merge_cfg, specialists, data, data.seen, spec_seen, spec_unseen, threads
        )
        merged_models[merge_cfg.label] = merged
        reports.append(report)

    all_in_one = None
    if cfg.all_in_one:
        joint = train_specialist(
            Dataset.concat(data.train[f.family_id] for f in data.seen),
            cfg.epochs,
            cfg.step_size,
            cfg.seed,
            init=data.base,
            family_id="all-in-one",
        )
        all_in_one = evaluate(
            joint.checkpoint,
            "all-in-one",
            {"method": "all-in-one"},
            data.seen,
            data,
            spec_seen,
            spec_unseen,
        )

    wa_model, _ = merge_archives(
        data.base, [s.checkpoint for s in specialists], MergeConfig(method=MergeMethod.WA), threads
    )
    similarity = similarity_table(wa_model, specialists, _similarity_set(specialists, data))
    scaling = scaling_sweep(cfg, specialists, data, threads) if cfg.scaling_sizes else {}

    table_reports = reports + ([all_in_one] if all_in_one else [])
    result = ProtocolResult(
        reports=reports,
        table=render_table(table_reports),
        similarity=similarity,
        specialists=specialists,
        all_in_one=all_in_one,
        scaling=scaling,
        tuned={method: merge_cfg.to_dict() for method, merge_cfg in tuned.items()},
        ablation=ablation,
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        _write(out_dir, "base.ckpt", data.base)
        for specialist in specialists:
            _write(out_dir, f"specialists/{specialist.family_id}.ckpt", specialist.checkpoint)
        for label, merged in merged_models.items():
            _write(out_dir, f"merged/{label}.ckpt", merged)
        for report in table_reports:
            _write_report(out_dir, report.method_id, report)
        (out_dir / "comparison.txt").write_text(result.table, encoding="utf-8")
        if ablation:
            (out_dir / "ablation.txt").write_text(render_ablation(ablation), encoding="utf-8")
        extras = {"similarity": similarity, "scaling": scaling, "tuned": result.tuned}
        (out_dir / "similarity.json").write_text(
            json.dumps(extras, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    if cfg.incremental:
        result.incremental = run_incremental(
            cfg, out_dir, threads, data=data, specialists=specialists
        )
    return result


def run_incremental(cfg, out_dir=None, threads=1, data=None, specialists=None):
    """
    Add the reserve family post hoc: train one new specialist from the shared initialization and
    re-merge it with the existing ones. Existing checkpoints are only read.

    With ``out_dir`` and no ``specialists``, the existing specialists are loaded from
    ``out_dir/specialists``.
    """
    data = data or prepare(cfg)
    if specialists is None:
        if out_dir is None:
            raise ConfigError("run_incremental needs specialists or an output directory")
        folder = Path(out_dir) / "specialists"
        specialists = [
            ToySpecialist(load_archive(folder / f"{fam.family_id}.ckpt"), [], fam.family_id)
            for fam in data.seen
        ]
    new = train_specialists(cfg, data, [data.reserve], threads)[0]
    everyone = list(specialists) + [new]
    families = data.seen + [data.reserve]
    spec_seen, spec_unseen = _specialist_aucs(everyone, data)
    reports = []
    merged_models = {}
    for merge_cfg in cfg.merge_configs:
        merged, report = _merge_and_eval(
            merge_cfg, everyone, data, families, spec_seen, spec_unseen, threads
        )
        report.method_id = f"incremental-{merge_cfg.label}"
        merged_models[report.method_id] = merged
        reports.append(report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write(out_dir, f"specialists/{new.family_id}.ckpt", new.checkpoint)
        for label, merged in merged_models.items():
            _write(out_dir, f"merged/{label}.ckpt", merged)
        for report in reports:
            _write_report(out_dir, report.method_id, report)
        (out_dir / "comparison-incremental.txt").write_text(render_table(reports), encoding="utf-8")
    return reports
