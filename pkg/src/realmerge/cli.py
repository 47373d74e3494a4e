"""
realmerge - training-free checkpoint merging
Copyright (C) 2026 realmerge maintainers

Command line interface
======================
``realmerge <command> [options]`` with the commands ``merge``, ``eval``, ``probe-sim``,
``verify-theory``, ``protocol`` and ``inspect``.

:codeauthor:    realmerge maintainers
:maturity:      new
:depends:       numpy
:platform:      all

Every command prints its resolved configuration as one JSON line before doing any work.
Configuration precedence is flags, then the ``--config`` JSON file, then built-in defaults.
``REALMERGE_THREADS`` is the fallback for ``--threads``.

Exit codes:

* ``0`` success
* ``2`` configuration or usage error
* ``3`` data error (archives, degenerate inputs, divergence)
* ``4`` a theory verdict failed
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from dataclasses import fields
from pathlib import Path

import numpy as np

from realmerge import __version__
from realmerge.archive import load_archive
from realmerge.archive import save_archive
from realmerge.exceptions import ArchiveError
from realmerge.exceptions import ConfigError
from realmerge.exceptions import RealMergeError
from realmerge.merge import EtaVariant
from realmerge.merge import MergeConfig
from realmerge.merge import MergeMethod
from realmerge.merge import merge_archives
from realmerge.metrics import EvalReport
from realmerge.metrics import ScoreSet
from realmerge.metrics import auc
from realmerge.metrics import render_table
from realmerge.model import Dataset
from realmerge.model import scores
from realmerge.theory import TheoryConfig
from realmerge.theory import verify_theory
from realmerge.toy import SIMILARITY_TAGS
from realmerge.toy import ProtocolConfig
from realmerge.toy import run_protocol
from realmerge.toy import run_similarity
from realmerge.toy import similarity_table
from realmerge.toy import ToySpecialist

# Globals
log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERDICT = 4
THREADS_ENV = "REALMERGE_THREADS"

MERGE_FLAGS = {
    "method": "method",
    "alpha": "alpha",
    "rank_frac": "rank_frac",
    "k": "k",
    "sparsity": "sparsity_p",
    "eps": "eps",
    "eta_variant": "eta_variant",
    "wa_anchor": "wa_anchor",
}


def _emit(payload):
    print(json.dumps(payload, sort_keys=True, default=str))


def _threads(args):
    if args.threads is not None:
        threads = args.threads
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            threads = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    return threads


def _json_config(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc


def _checked(cls, data):
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    return data


def resolve_merge_config(args):
    """
    Built-in defaults, overridden by ``--config``, overridden by explicit flags.
    """
    data = MergeConfig().to_dict()
    if args.config:
        data.update(_checked(MergeConfig, _json_config(args.config)))
    for flag, key in MERGE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value.replace("-", "_") if flag == "eta_variant" else value
    return MergeConfig.from_dict(data)


### COMMANDS ###


def cmd_merge(args):
    """
    Merge specialist archives into one checkpoint.

    CLI Example:

    .. code-block:: bash

        realmerge merge base.ckpt fs.ckpt fr.ckpt --method r2m --alpha 0.5 --rank-frac 0.7 --k 1 --out merged.ckpt
    """
    cfg = resolve_merge_config(args)
    threads = _threads(args)
    _emit({"command": "merge", "config": cfg.to_dict(), "threads": threads, "out": args.out})
    base = load_archive(args.base)
    specialists = [load_archive(path) for path in args.specialists]
    merged, decomp = merge_archives(base, specialists, cfg, threads)
    save_archive(merged, args.out)
    if decomp is not None:
        _emit({"decomposition": decomp.summary()})
    return EXIT_OK


def _load_dataset(path):
    try:
        with np.load(path, allow_pickle=False) as npz:
            x = np.asarray(npz["x"], dtype=np.float64)
            y = np.asarray(npz["y"]).astype(int)
            family = np.asarray(npz["family"]).astype(str) if "family" in npz.files else None
    except (OSError, KeyError, ValueError) as exc:
        raise ArchiveError(f"Cannot read dataset {path}: {exc}", "dataset") from exc
    if family is None:
        family = np.full(y.size, Path(path).stem)
    return Dataset(x, y, family, np.arange(y.size))


def _score_sets(args):
    if args.fake is not None or args.real is not None:
        if not args.fake or not args.real:
            raise ConfigError("--fake and --real must be given together")
        return [ScoreSet(args.fake, args.real, args.task)]
    data = _json_config(args.scores)
    if "fake" in data and "real" in data:
        return [ScoreSet(data["fake"], data["real"], args.task)]
    return [ScoreSet(item["fake"], item["real"], task) for task, item in sorted(data.items())]


def cmd_eval(args):
    """
    AUC from raw scores (``--fake``/``--real`` or ``--scores``) or from a model on a dataset
    (``--model`` and ``--data``; ``--specialist`` adds the Drop).
    """
    _emit({"command": "eval", "model": args.model, "data": args.data, "scores": args.scores})
    spec_seen = {}
    if args.model:
        if not args.data:
            raise ConfigError("--model needs --data")
        data = _load_dataset(args.data)
        model = load_archive(args.model)
        auc_seen = {args.task: auc(ScoreSet.from_labels(scores(model, data.x), data.y, args.task))}
        if args.specialist:
            specialist = load_archive(args.specialist)
            spec_seen[args.task] = auc(
                ScoreSet.from_labels(scores(specialist, data.x), data.y, args.task)
            )
        method_id = model.meta.get("id", Path(args.model).stem)
        config = {"model": args.model}
    elif args.fake is not None or args.real is not None or args.scores:
        auc_seen = {s.task_id: auc(s) for s in _score_sets(args)}
        method_id = "scores"
        config = {}
    else:
        raise ConfigError("eval needs --fake/--real, --scores or --model with --data")
    report = EvalReport.build(method_id, config, auc_seen, spec_seen)
    print(render_table([report]), end="")
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def _format_similarity(similarity):
    lines = ["family  " + "  ".join(tag.rjust(10) for tag in SIMILARITY_TAGS)]
    for family, row in sorted(similarity.items()):
        cells = [(f"{row[tag]:.4f}" if tag in row else "-").rjust(10) for tag in SIMILARITY_TAGS]
        lines.append(f"{family}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_probe_sim(args):
    """
    Real / own Fake / other Fake feature similarity between the weight average and each
    specialist. Without ``--base`` the cue-only toy protocol of ``--seed`` is trained first.
    """
    threads = _threads(args)
    _emit(
        {
            "command": "probe-sim",
            "base": args.base,
            "specialists": args.specialist,
            "seed": args.seed,
        }
    )
    if args.base is None:
        cfg = ProtocolConfig.cue_only(seed=args.seed if args.seed is not None else 0)
        similarity = run_similarity(cfg, threads)
    else:
        if not args.specialist or not args.data:
            raise ConfigError("probe-sim with --base needs --specialist FAMILY=PATH and --data")
        specialists = []
        for item in args.specialist:
            family, sep, path = item.partition("=")
            if not sep:
                raise ConfigError(f"--specialist expects FAMILY=PATH, got {item!r}")
            specialists.append(ToySpecialist(load_archive(path), [], family))
        base = load_archive(args.base)
        wa_model, _ = merge_archives(
            base, [s.checkpoint for s in specialists], MergeConfig(method=MergeMethod.WA), threads
        )
        samples = _load_dataset(args.data)
        similarity = similarity_table(wa_model, specialists, samples)
    print(_format_similarity(similarity), end="")
    return EXIT_OK


def cmd_verify_theory(args):
    """
    Run the theory suite; exit ``4`` when any verdict fails.
    """
    data = asdict(TheoryConfig())
    if args.config:
        data.update(_checked(TheoryConfig, _json_config(args.config)))
    if args.seed is not None:
        data["seed"] = args.seed
    if args.sigma_z is not None:
        data["sigma_z"] = args.sigma_z
        data["r2_sigma_z"] = args.sigma_z
    if args.trials is not None:
        data["r2_trials"] = args.trials
    if args.alpha is not None:
        data["alpha"] = args.alpha
    cfg = TheoryConfig(**data)
    threads = _threads(args)
    _emit({"command": "verify-theory", "config": asdict(cfg), "threads": threads})
    report = verify_theory(cfg, threads)
    _emit(report.to_dict())
    for name, verdict in sorted(report.verdicts.items()):
        print(f"{name:<8}{verdict}")
    if report.failed:
        log.error(f"Failed verdicts: {report.failed}")
        return EXIT_VERDICT
    return EXIT_OK


def cmd_protocol(args):
    """
    Run the toy protocol end to end and print the comparison table.
    """
    data = ProtocolConfig().to_dict()
    if args.config:
        data.update(_checked(ProtocolConfig, _json_config(args.config)))
    if args.seed is not None:
        data["seed"] = args.seed
    if args.incremental:
        data["incremental"] = True
    if args.tune:
        data["tune"] = True
    cfg = ProtocolConfig.from_dict(data)
    threads = _threads(args)
    _emit({"command": "protocol", "config": cfg.to_dict(), "threads": threads, "out": args.out})
    result = run_protocol(cfg, args.out, threads)
    print(result.table, end="")
    if result.incremental:
        print(render_table(result.incremental), end="")
    return EXIT_OK


def cmd_inspect(args):
    """
    Print the tensor index of an archive with per-tensor norms.
    """
    _emit({"command": "inspect", "path": args.archive})
    archive = load_archive(args.archive)
    _emit({"meta": archive.meta})
    for name, entry in archive.entries.items():
        shape = "x".join(str(dim) for dim in entry.shape)
        norm = float(np.sqrt(np.sum(entry.data * entry.data)))
        print(f"{name}\t{entry.role.value}\t{shape}\t{norm:.6g}")
    return EXIT_OK


### PARSER ###


def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="Seed for synthetic runs")
    common.add_argument("--threads", type=int, help=f"Worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--deterministic", action="store_true", help="Suppress timing output")
    common.add_argument(
        "--log-level",
        default="warning",
        choices=["debug", "info", "warning", "error"],
        help="Log level for stderr",
    )
    return common


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(
        prog="realmerge", description="Training-free checkpoint merging"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    merge = sub.add_parser("merge", parents=[common], help="Merge specialist checkpoints")
    merge.add_argument("base", help="Base checkpoint")
    merge.add_argument("specialists", nargs="+", help="Specialist checkpoints")
    merge.add_argument("--method", choices=[m.value for m in MergeMethod])
    merge.add_argument("--alpha", type=float)
    merge.add_argument("--rank-frac", type=float)
    merge.add_argument("--k", type=int)
    merge.add_argument("--sparsity", type=float)
    merge.add_argument("--eps", type=float)
    merge.add_argument("--eta-variant", choices=[v.value.replace("_", "-") for v in EtaVariant])
    merge.add_argument("--wa-anchor", action="store_const", const=True, default=None)
    merge.add_argument("--out", required=True, help="Output checkpoint")
    merge.set_defaults(func=cmd_merge)

    evaluate = sub.add_parser("eval", parents=[common], help="Compute AUC and Drop")
    evaluate.add_argument("--fake", type=float, nargs="+")
    evaluate.add_argument("--real", type=float, nargs="+")
    evaluate.add_argument("--scores", help="JSON with fake/real lists, optionally per task")
    evaluate.add_argument("--model", help="Checkpoint to score")
    evaluate.add_argument("--data", help="npz file with arrays x, y and optionally family")
    evaluate.add_argument("--specialist", help="Specialist checkpoint for the Drop")
    evaluate.add_argument("--task", default="task", help="Task id for the report")
    evaluate.add_argument("--out", help="Write the EvalReport JSON here")
    evaluate.set_defaults(func=cmd_eval)

    sim = sub.add_parser("probe-sim", parents=[common], help="Feature similarity table")
    sim.add_argument("--base", help="Base checkpoint")
    sim.add_argument("--specialist", action="append", help="FAMILY=PATH, repeatable")
    sim.add_argument("--data", help="npz sample set with arrays x, y, family")
    sim.set_defaults(func=cmd_probe_sim)

    theory = sub.add_parser("verify-theory", parents=[common], help="Run the theory checks")
    theory.add_argument("--sigma-z", type=float)
    theory.add_argument("--trials", type=int)
    theory.add_argument("--alpha", type=float)
    theory.set_defaults(func=cmd_verify_theory)

    protocol = sub.add_parser("protocol", parents=[common], help="Run the toy protocol")
    protocol.add_argument("--out", help="Output directory")
    protocol.add_argument("--incremental", action="store_true")
    protocol.add_argument("--tune", action="store_true")
    protocol.set_defaults(func=cmd_protocol)

    inspect = sub.add_parser("inspect", parents=[common], help="Show an archive index")
    inspect.add_argument("archive")
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(
        level=args.log_level.upper(),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    started = time.perf_counter()
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RealMergeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not args.deterministic:
        print(f"# elapsed {time.perf_counter() - started:.2f}s", file=sys.stderr)
    return code
