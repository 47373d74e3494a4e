import json

import numpy as np
import pytest
from realmerge.archive import load_archive
from realmerge.archive import save_archive
from realmerge.cli import EXIT_CONFIG
from realmerge.cli import EXIT_DATA
from realmerge.cli import EXIT_OK
from realmerge.cli import main

from tests.conftest import make_archive
from tests.conftest import vector_archive


@pytest.fixture
def vector_files(tmp_path):
    """
    A zero base and two 5-dim specialists on disk.
    """
    paths = {
        "base": vector_archive(np.zeros(5), "base"),
        "a": vector_archive([3.0, 1.0, 0.0, -2.0, 0.5], "spec-a"),
        "b": vector_archive([2.0, 0.25, 0.0, -1.0, 4.0], "spec-b"),
    }
    out = {}
    for key, archive in paths.items():
        out[key] = tmp_path / f"{key}.ckpt"
        save_archive(archive, out[key])
    return out


def _first_json(capsys):
    return json.loads(capsys.readouterr().out.splitlines()[0])


def test_merge_wa_identical(tmp_path, capsys):
    values = [1.5, -0.25, 2.0]
    base = tmp_path / "base.ckpt"
    save_archive(vector_archive(np.zeros(3), "base"), base)
    specs = []
    for index in range(2):
        specs.append(tmp_path / f"s{index}.ckpt")
        save_archive(vector_archive(values, f"s{index}"), specs[-1])
    out = tmp_path / "merged.ckpt"
    argv = ["merge", str(base), *map(str, specs), "--method", "wa", "--out", str(out)]
    assert main(argv + ["--deterministic"]) == EXIT_OK
    merged = load_archive(out)
    assert merged["w"].data.tolist() == values
    assert merged.meta["method"] == "wa"
    assert _first_json(capsys)["config"]["method"] == "wa"


def test_merge_ties(vector_files, tmp_path):
    out = tmp_path / "ties.ckpt"
    argv = [
        "merge",
        str(vector_files["base"]),
        str(vector_files["a"]),
        str(vector_files["b"]),
        "--method",
        "ties",
        "--sparsity",
        "0.4",
        "--out",
        str(out),
    ]
    assert main(argv) == EXIT_OK
    # kept (3, -2) and (2, 4); elected signs (+, -, +); disjoint mean
    assert load_archive(out)["w"].data.tolist() == [2.5, 0.0, 0.0, -2.0, 4.0]


def test_merge_config_precedence(vector_files, tmp_path, capsys):
    config = tmp_path / "merge.json"
    config.write_text(json.dumps({"method": "ta", "alpha": 0.9}), encoding="utf-8")
    argv = [
        "merge",
        str(vector_files["base"]),
        str(vector_files["a"]),
        "--config",
        str(config),
        "--alpha",
        "0.6",
        "--out",
        str(tmp_path / "ta.ckpt"),
    ]
    assert main(argv) == EXIT_OK
    resolved = _first_json(capsys)["config"]
    assert resolved["method"] == "ta"
    assert resolved["alpha"] == 0.6
    assert load_archive(tmp_path / "ta.ckpt").meta["id"] == "merged-ta-a0.6"


def test_merge_r2m_reports_decomposition(tmp_path, capsys):
    rng = np.random.default_rng(0)
    base = make_archive({"layer": ("mlp", np.zeros((3, 4)))}, "base")
    save_archive(base, tmp_path / "base.ckpt")
    specs = []
    for index in range(3):
        spec = make_archive({"layer": ("mlp", rng.normal(size=(3, 4)))}, f"s{index}")
        specs.append(str(tmp_path / f"s{index}.ckpt"))
        save_archive(spec, specs[-1])
    argv = ["merge", str(tmp_path / "base.ckpt"), *specs, "--method", "r2m", "--out"]
    assert main(argv + [str(tmp_path / "r2m.ckpt")]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    summary = json.loads(lines[1])["decomposition"]
    assert summary["core_rank"] == 1
    assert summary["retained_ranks"] == {"layer": 2}


@pytest.mark.parametrize(
    "extra",
    [["--method", "bogus"], ["--rank-frac", "1.5"], ["--alpha", "-1"], ["--unknown-flag"]],
)
def test_merge_config_errors(vector_files, tmp_path, extra):
    argv = ["merge", str(vector_files["base"]), str(vector_files["a"]), "--out"]
    assert main(argv + [str(tmp_path / "x.ckpt")] + extra) == EXIT_CONFIG


def test_threads_env(vector_files, tmp_path, monkeypatch):
    monkeypatch.setenv("REALMERGE_THREADS", "abc")
    argv = ["merge", str(vector_files["base"]), str(vector_files["a"]), "--out"]
    assert main(argv + [str(tmp_path / "x.ckpt")]) == EXIT_CONFIG


def test_missing_archive(tmp_path, capsys):
    argv = ["merge", str(tmp_path / "nope.ckpt"), str(tmp_path / "nope2.ckpt"), "--out"]
    assert main(argv + [str(tmp_path / "x.ckpt")]) == EXIT_DATA
    assert "missing-file" in capsys.readouterr().err


def test_eval_scores(capsys, tmp_path):
    out = tmp_path / "report.json"
    argv = ["eval", "--fake", "0.9", "0.4", "0.7", "--real", "0.3", "0.8", "0.1", "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert "0.7778" in capsys.readouterr().out
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["auc_per_task"]["task"] == pytest.approx(7.0 / 9.0, abs=1e-9)


def test_eval_scores_file(tmp_path, capsys):
    scores = tmp_path / "scores.json"
    payload = {"a": {"fake": [3.0, 4.0], "real": [1.0, 2.0]}, "b": {"fake": [1.0], "real": [1.0]}}
    scores.write_text(json.dumps(payload), encoding="utf-8")
    assert main(["eval", "--scores", str(scores)]) == EXIT_OK
    table = capsys.readouterr().out
    assert "1.0000" in table
    assert "0.5000" in table


def test_eval_needs_input():
    assert main(["eval"]) == EXIT_CONFIG
    assert main(["eval", "--fake", "1.0"]) == EXIT_CONFIG


def test_eval_model(tiny_base, tmp_path):
    rng = np.random.default_rng(2)
    data = tmp_path / "data.npz"
    np.savez(data, x=rng.normal(size=(20, 6)), y=np.array([0, 1] * 10))
    model = tmp_path / "model.ckpt"
    save_archive(tiny_base, model)
    out = tmp_path / "report.json"
    argv = ["eval", "--model", str(model), "--data", str(data), "--specialist", str(model)]
    assert main(argv + ["--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["method_id"] == "base"
    assert report["drop_per_task"]["task"] == 0.0


def test_similarity_cmd_from_files(tiny_base, tiny_specialists, tmp_path, capsys):
    base = tmp_path / "base.ckpt"
    save_archive(tiny_base, base)
    argv = ["probe-sim", "--base", str(base)]
    families = []
    for specialist in tiny_specialists:
        path = tmp_path / f"{specialist.archive_id}.ckpt"
        save_archive(specialist, path)
        argv += ["--specialist", f"{specialist.archive_id}={path}"]
        families += [specialist.archive_id] * 4
    rng = np.random.default_rng(6)
    data = tmp_path / "samples.npz"
    np.savez(data, x=rng.normal(size=(12, 6)), y=np.array([0, 1] * 6), family=np.array(families))
    assert main(argv + ["--data", str(data)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].split() == ["family", "real", "own_fake", "other_fake"]
    assert [line.split()[0] for line in lines[2:]] == ["spec-0", "spec-1", "spec-2"]


def test_similarity_cmd_bad_specialist(tiny_base, tmp_path):
    base = tmp_path / "base.ckpt"
    save_archive(tiny_base, base)
    argv = ["probe-sim", "--base", str(base), "--specialist", "nofamily", "--data", "x.npz"]
    assert main(argv) == EXIT_CONFIG


def test_verify_theory(capsys):
    assert main(["verify-theory", "--sigma-z", "0", "--trials", "5", "--deterministic"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert json.loads(lines[0])["config"]["r2_trials"] == 5
    verdicts = dict(line.split() for line in lines[2:])
    assert verdicts["r2"] == "pass"
    assert verdicts["r1"] == "pass"
    assert verdicts["heads"] == "pass"


def test_inspect_empty(tmp_path, capsys):
    path = tmp_path / "empty.ckpt"
    save_archive(make_archive({}, "empty"), path)
    assert main(["inspect", str(path)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert json.loads(lines[1]) == {"meta": {"id": "empty"}}
    assert len(lines) == 2


def test_inspect_lists_tensors(tiny_base, tmp_path, capsys):
    path = tmp_path / "base.ckpt"
    save_archive(tiny_base, path)
    assert main(["inspect", str(path)]) == EXIT_OK
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()[2:]]
    assert [row[0] for row in rows] == sorted(tiny_base.entries)
    assert rows[0][1:3] == ["other", "5"]


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "realmerge" in capsys.readouterr().out
