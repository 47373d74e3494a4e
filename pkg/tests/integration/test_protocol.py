import dataclasses
import json
import pathlib

import numpy as np
import pytest
from realmerge.archive import load_archive
from realmerge.cli import EXIT_OK
from realmerge.cli import main
from realmerge.merge import MergeConfig
from realmerge.toy import ABLATION_COLUMNS
from realmerge.toy import ProtocolConfig
from realmerge.toy import run_incremental
from realmerge.toy import run_protocol
from realmerge.toy import run_similarity

GOLDEN_TABLE = pathlib.Path(__file__).resolve().parents[1] / "golden" / "comparison-seed0.txt"


@pytest.fixture(scope="module")
def protocol_run(small_protocol, tmp_path_factory):
    out = tmp_path_factory.mktemp("protocol")
    return run_protocol(small_protocol, out), out


def test_protocol_writes_outputs(protocol_run, small_protocol):
    result, out = protocol_run
    assert (out / "base.ckpt").is_file()
    families = sorted(p.stem for p in (out / "specialists").iterdir())
    assert families == ["seen-0", "seen-1", "seen-2"]
    labels = [cfg.label for cfg in small_protocol.merge_configs]
    for label in labels:
        merged = load_archive(out / "merged" / f"{label}.ckpt")
        assert merged.meta["specialists"] == "specialist-seen-0,specialist-seen-1,specialist-seen-2"
        report = json.loads((out / "reports" / f"{label}.json").read_text(encoding="utf-8"))
        assert set(report["auc_per_task"]) == set(families)
        assert set(report["auc_unseen"]) == {"unseen-0"}
    table = (out / "comparison.txt").read_text(encoding="utf-8")
    assert table == result.table
    assert [line.split()[0] for line in table.splitlines()[1:]] == labels
    similarity = json.loads((out / "similarity.json").read_text(encoding="utf-8"))
    assert set(similarity["similarity"]) == set(families)


def test_protocol_reports(protocol_run):
    result, _ = protocol_run
    for report in result.reports:
        assert all(0.0 <= value <= 1.0 for value in report.auc_per_task.values())
        assert report.drop_max == max(report.drop_per_task.values())
        assert report.gain_unseen is not None
    r2m = [report for report in result.reports if report.method_id.startswith("r2m")][0]
    assert r2m.config["decomposition"]["core_rank"] == 1
    for row in result.similarity.values():
        assert set(row) == {"real", "own_fake", "other_fake"}
        assert all(abs(value) <= 1.0 + 1e-12 for value in row.values())


def test_protocol_deterministic(protocol_run, small_protocol, tmp_path):
    _, first = protocol_run
    run_protocol(small_protocol, tmp_path)
    for path in sorted(first.rglob("*")):
        if path.is_file():
            again = tmp_path / path.relative_to(first)
            assert again.read_bytes() == path.read_bytes(), path.name


def test_protocol_thread_invariance(protocol_run, small_protocol):
    result, _ = protocol_run
    threaded = run_protocol(small_protocol, threads=3)
    for single, multi in zip(result.reports, threaded.reports):
        assert single.method_id == multi.method_id
        for task, value in single.auc_per_task.items():
            assert multi.auc_per_task[task] == pytest.approx(value, abs=1e-6)


def test_single_family_wa_has_no_drop(small_protocol):
    cfg = dataclasses.replace(small_protocol, n_seen=1, merge_configs=[{"method": "wa"}])
    result = run_protocol(cfg)
    assert abs(result.reports[0].drop_max) <= 1e-12


def test_all_in_one_row(small_protocol):
    cfg = dataclasses.replace(small_protocol, all_in_one=True, merge_configs=[{"method": "wa"}])
    result = run_protocol(cfg)
    assert result.all_in_one.method_id == "all-in-one"
    assert result.table.splitlines()[-1].startswith("all-in-one")


def test_scaling_sweep(small_protocol):
    cfg = dataclasses.replace(small_protocol, scaling_sizes=[1, 3])
    result = run_protocol(cfg)
    assert set(result.scaling["wa"]) == {1, 3}
    assert set(result.scaling["r2m-a0.5-r0.7-k1"]) == {3}


def test_incremental_leaves_existing_files(small_protocol, tmp_path):
    run_protocol(small_protocol, tmp_path)
    before = {
        path: (path.read_bytes(), path.stat().st_mtime_ns)
        for path in tmp_path.rglob("*")
        if path.is_file()
    }
    reports = run_incremental(small_protocol, tmp_path)
    for path, (data, mtime) in before.items():
        assert path.read_bytes() == data
        assert path.stat().st_mtime_ns == mtime
    assert (tmp_path / "specialists" / "new-0.ckpt").is_file()
    assert (tmp_path / "comparison-incremental.txt").is_file()
    labels = [cfg.label for cfg in small_protocol.merge_configs]
    assert [report.method_id for report in reports] == [f"incremental-{label}" for label in labels]
    assert all("new-0" in report.auc_per_task for report in reports)


def test_cli_protocol(small_protocol, tmp_path, capsys):
    config = tmp_path / "protocol.json"
    data = small_protocol.to_dict()
    data["merge_configs"] = [{"method": "wa"}]
    config.write_text(json.dumps(data), encoding="utf-8")
    out = tmp_path / "run"
    argv = ["protocol", "--config", str(config), "--seed", "1", "--out", str(out)]
    assert main(argv + ["--deterministic"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert json.loads(lines[0])["config"]["seed"] == 1
    assert lines[2].startswith("wa ")
    assert (out / "merged" / "wa.ckpt").is_file()


def test_tuning_writes_ablation(small_protocol, tmp_path):
    cfg = dataclasses.replace(small_protocol, tune=True)
    result = run_protocol(cfg, tmp_path)
    grid_sizes = {"wa": 1, "ta": 2, "r2m": 12}
    assert len(result.ablation) == sum(grid_sizes.values())
    for method, size in grid_sizes.items():
        rows = [row for row in result.ablation if row["method"] == method]
        assert len(rows) == size
        assert sum(1 for row in rows if row.get("selected")) == 1
        selected = [row["label"] for row in rows if row.get("selected")][0]
        assert MergeConfig.from_dict(result.tuned[method]).label == selected
    r2m_rows = [row for row in result.ablation if row["method"] == "r2m"]
    assert {(row["alpha"], row["rank_frac"]) for row in r2m_rows} == {
        (alpha, rank_frac) for alpha in (0.4, 0.5, 0.6) for rank_frac in (0.1, 0.3, 0.5, 0.7)
    }
    lines = (tmp_path / "ablation.txt").read_text(encoding="utf-8").splitlines()
    assert tuple(lines[0].split()) == ABLATION_COLUMNS
    assert len(lines) == 1 + len(result.ablation)
    assert [line.split()[1] for line in lines[1:]] == [row["label"] for row in result.ablation]


def test_untuned_run_has_no_ablation(protocol_run):
    result, out = protocol_run
    assert result.ablation == []
    assert not (out / "ablation.txt").exists()


@pytest.mark.slow
def test_similarity_pattern_over_seeds():
    seeds_ok = 0
    for seed in range(25):
        rows = run_similarity(ProtocolConfig.cue_only(seed=seed), threads=4).values()
        if all(row["real"] > row["own_fake"] for row in rows):
            seeds_ok += 1
    assert seeds_ok >= 20


@pytest.fixture(scope="module")
def default_run():
    return run_protocol(ProtocolConfig(seed=0), threads=4)


def test_default_protocol_ordering(default_run):
    by_method = {report.config["method"]: report for report in default_run.reports}
    assert by_method["r2m"].method_id == "r2m-a0.5-r0.7-k1-cn"
    assert by_method["r2m"].gain_unseen >= by_method["ta"].gain_unseen
    assert by_method["r2m"].drop_max <= by_method["wa"].drop_max + 0.02
    assert np.isfinite(by_method["ties"].drop_max)


def test_default_protocol_matches_golden(default_run):
    if not GOLDEN_TABLE.is_file():
        pytest.skip(f"{GOLDEN_TABLE.name} missing: run 'nox -e update-golden' and commit it")
    assert default_run.table == GOLDEN_TABLE.read_text(encoding="utf-8")
