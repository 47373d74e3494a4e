"""
realmerge - training-free checkpoint merging
Copyright (C) 2026 realmerge maintainers

Evaluation metrics
==================
Image-level AUC, seen-task Drop, unseen Gain and the pre-logit feature similarity table.

:codeauthor:    realmerge maintainers
:maturity:      new
:depends:       numpy, scipy
:platform:      all

AUC is the Mann-Whitney rank statistic with midranks, so a tied (fake, real) pair counts ``1/2``.
Fake is the positive class.
"""
import json
import logging
from collections import namedtuple
from dataclasses import dataclass
from dataclasses import field

import numpy as np
from scipy.stats import rankdata

from realmerge.exceptions import DegenerateError
from realmerge.model import features

# Globals
log = logging.getLogger(__name__)

SimilarityResult = namedtuple("SimilarityResult", ["mean", "used", "excluded"])


@dataclass(frozen=True)
class ScoreSet:
    """
    Detector scores on one task, split by ground truth.
    """

    fake_scores: np.ndarray
    real_scores: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        fake = np.asarray(self.fake_scores, dtype=np.float64).reshape(-1)
        real = np.asarray(self.real_scores, dtype=np.float64).reshape(-1)
        if fake.size == 0 or real.size == 0:
            raise DegenerateError(f"ScoreSet '{self.task_id}' needs both fake and real scores")
        if not (np.all(np.isfinite(fake)) and np.all(np.isfinite(real))):
            raise DegenerateError(f"ScoreSet '{self.task_id}' contains non-finite scores")
        object.__setattr__(self, "fake_scores", fake)
        object.__setattr__(self, "real_scores", real)

    @classmethod
    def from_labels(cls, scores, labels, task_id=""):
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        return cls(scores[labels == 1], scores[labels == 0], task_id)


def auc(s):
    """
    Fraction of (fake, real) pairs ranked correctly, ties counted as one half.

    s
        :class:`ScoreSet`.
    """
    n_fake = s.fake_scores.size
    n_real = s.real_scores.size
    ranks = rankdata(np.concatenate([s.fake_scores, s.real_scores]), method="average")
    u_stat = np.sum(ranks[:n_fake]) - n_fake * (n_fake + 1) / 2.0
    return float(u_stat / (n_fake * n_real))


def drop(auc_specialist, auc_merged):
    return float(auc_specialist - auc_merged)


def drop_max(drops):
    drops = list(drops)
    if not drops:
        raise DegenerateError("drop_max of an empty list")
    return float(max(drops))


def gain_unseen(auc_merged, auc_specialists):
    """
    Merged AUC minus the best specialist AUC. Negative when a specialist does better.
    """
    auc_specialists = list(auc_specialists)
    if not auc_specialists:
        raise DegenerateError("gain_unseen needs at least one specialist AUC")
    return float(auc_merged - max(auc_specialists))


def similarity_detail(model_a, model_b, inputs, class_tag, family_id=None):
    """
    Mean cosine similarity of pre-logit features plus the number of used and excluded inputs.

    Inputs where either feature vector is exactly zero are excluded.
    """
    subset = inputs.select(class_tag, family_id)
    if len(subset) == 0:
        raise DegenerateError(f"No inputs for class '{class_tag}' (family {family_id})")
    phi_a = features(model_a, subset.x)
    phi_b = features(model_b, subset.x)
    norm_a = np.linalg.norm(phi_a, axis=1)
    norm_b = np.linalg.norm(phi_b, axis=1)
    keep = (norm_a > 0.0) & (norm_b > 0.0)
    excluded = int(np.sum(~keep))
    if excluded:
        log.warning(f"Excluded {excluded} inputs with zero-norm features from the similarity table")
    if not np.any(keep):
        raise DegenerateError("Every selected input has a zero feature vector")
    cos = np.sum(phi_a[keep] * phi_b[keep], axis=1) / (norm_a[keep] * norm_b[keep])
    cos = np.clip(cos, -1.0, 1.0)
    return SimilarityResult(float(np.mean(cos)), int(np.sum(keep)), excluded)


def feature_similarity(model_a, model_b, inputs, class_tag, family_id=None):
    """
    Mean cosine similarity between the pre-logit features of two models.

    model_a, model_b
        Toy detector archives with the same input dimension.

    inputs
        :class:`realmerge.model.Dataset`.

    class_tag
        ``real``, ``own_fake`` or ``other_fake``.

    family_id
        Reference family for ``own_fake``/``other_fake``.
    """
    return similarity_detail(model_a, model_b, inputs, class_tag, family_id).mean


def _mean(values):
    values = list(values)
    return float(np.mean(values)) if values else None


@dataclass
class EvalReport:
    """
    Scores of one merged model against its specialists.

    ``gain_unseen`` compares mean unseen AUCs: the merged model's mean over unseen families
    minus the best specialist's mean. ``gain_per_unseen`` does the same per family.
    """

    method_id: str
    config: dict = field(default_factory=dict)
    auc_per_task: dict = field(default_factory=dict)
    drop_per_task: dict = field(default_factory=dict)
    auc_unseen: dict = field(default_factory=dict)
    gain_per_unseen: dict = field(default_factory=dict)
    drop_max: float = None
    mean_drop: float = None
    unseen_mean_auc: float = None
    gain_unseen: float = None

    @classmethod
    def build(
        cls,
        method_id,
        config,
        auc_seen,
        specialist_auc_seen=None,
        auc_unseen=None,
        specialist_auc_unseen=None,
    ):
        """
        method_id
            Label of the evaluated model.

        config
            Config snapshot (a dict) stored verbatim.

        auc_seen
            Seen task id -> AUC of the evaluated model.

        specialist_auc_seen
            Seen task id -> AUC of that task's own specialist. Tasks missing here get no Drop.

        auc_unseen
            Unseen family id -> AUC of the evaluated model.

        specialist_auc_unseen
            Specialist id -> (unseen family id -> AUC).
        """
        specialist_auc_seen = specialist_auc_seen or {}
        auc_unseen = dict(auc_unseen or {})
        specialist_auc_unseen = specialist_auc_unseen or {}
        report = cls(method_id, dict(config), dict(sorted(auc_seen.items())))
        report.drop_per_task = {
            task: drop(specialist_auc_seen[task], value)
            for task, value in report.auc_per_task.items()
            if task in specialist_auc_seen
        }
        if report.drop_per_task:
            report.drop_max = drop_max(report.drop_per_task.values())
            report.mean_drop = _mean(report.drop_per_task.values())
        report.auc_unseen = dict(sorted(auc_unseen.items()))
        report.unseen_mean_auc = _mean(report.auc_unseen.values())
        if report.auc_unseen and specialist_auc_unseen:
            report.gain_per_unseen = {
                fam: gain_unseen(value, [spec[fam] for spec in specialist_auc_unseen.values()])
                for fam, value in report.auc_unseen.items()
            }
            specialist_means = [
                _mean(spec[fam] for fam in report.auc_unseen)
                for spec in specialist_auc_unseen.values()
            ]
            report.gain_unseen = gain_unseen(report.unseen_mean_auc, specialist_means)
        return report

    def to_dict(self):
        return {
            "method_id": self.method_id,
            "config": self.config,
            "auc_per_task": self.auc_per_task,
            "drop_per_task": self.drop_per_task,
            "drop_max": self.drop_max,
            "mean_drop": self.mean_drop,
            "auc_unseen": self.auc_unseen,
            "gain_per_unseen": self.gain_per_unseen,
            "unseen_mean_auc": self.unseen_mean_auc,
            "gain_unseen": self.gain_unseen,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _cell(value):
    return "-" if value is None else f"{value:.4f}"


def render_table(reports):
    """
    Aligned text table: one row per report, seen AUCs, Drop, unseen mean AUC and Gain.
    """
    reports = list(reports)
    tasks = sorted({task for report in reports for task in report.auc_per_task})
    header = ["method"] + tasks + ["mean_drop", "drop_max", "unseen_auc", "gain_unseen"]
    rows = [header]
    for report in reports:
        rows.append(
            [report.method_id]
            + [_cell(report.auc_per_task.get(task)) for task in tasks]
            + [
                _cell(report.mean_drop),
                _cell(report.drop_max),
                _cell(report.unseen_mean_auc),
                _cell(report.gain_unseen),
            ]
        )
    widths = [max(len(row[col]) for row in rows) for col in range(len(header))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])] + [
            cell.rjust(width) for cell, width in zip(row[1:], widths[1:])
        ]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"
