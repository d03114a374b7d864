import csv
import json

import pytest

from bundleforge.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, main

TINY = """\
epochs=2
teacher_epochs=2
d=8
feedback.epochs=1
feedback.d=8
synth.n_items=120
synth.n_users=200
synth.n_bundles=200
synth.n_themes=10
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "out"
    base = ["--config", str(cfg), "--out", str(out), "--seed", "3"]
    for cmd in (["synth"], ["feedback"], ["train-teacher"], ["train"], ["train", "--distill", "none"]):
        assert main(cmd[:1] + base + cmd[1:]) == 0, cmd
    return out, base


def test_pipeline_artifacts(run):
    out, _ = run
    for name in ("synth.json", "data/bundles.tsv", "feedback.bndf", "teacher.bndc", "teacher.bndc.json",
                 "teacher_log.tsv", "student_logits.bndc", "student_none.bndc", "student_logits_log.tsv"):
        assert (out / name).exists(), name


def test_eval_all_scenarios_and_repeatable(run, capsys):
    out, base = run
    assert main(["eval"] + base) == 0
    first = (out / "eval_student_logits.json").read_bytes()
    assert main(["eval"] + base) == 0
    assert (out / "eval_student_logits.json").read_bytes() == first
    reports = json.loads(first)["reports"]
    assert [r["scenario"] for r in reports] == ["overall", "pop2lt", "lt2pop", "pop2pop", "lt2lt"]
    assert "recall@20" in capsys.readouterr().out


def test_eval_teacher_single_scenario(run):
    out, base = run
    assert main(["eval"] + base + ["--model", "teacher", "--scenario", "overall", "--k", "5"]) == 0
    reports = json.loads((out / "eval_teacher.json").read_text())["reports"]
    assert len(reports) == 1 and "recall@5" in reports[0]["metrics"]


def test_sweep_and_report(run):
    out, base = run
    assert main(["sweep"] + base) == 0
    rows = list(csv.reader(open(out / "sweep.csv")))
    assert rows[0][0] == "ratio" and [r[0] for r in rows[1:]] == ["0.5", "0.4", "0.3", "0.2", "0.1"]
    assert main(["report"] + base + ["--cases", "2", "--k-report", "3"]) == 0
    cases = list(csv.reader(open(out / "cases_student_logits.csv")))
    assert cases[0] == ["bundle", "rank", "item", "logit", "score", "popularity", "is_target"]
    assert len(cases) <= 1 + 2 * 3
    assert (out / "histogram_student_logits.csv").exists()


def test_ablate_one_variant(run):
    out, base = run
    assert main(["ablate"] + base + ["--variant", "wo_bi", "--scenario", "overall"]) == 0
    assert sorted(json.loads((out / "ablate.json").read_text())["variants"]) == ["full", "wo_bi"]


def test_missing_prerequisite(tmp_path, capsys):
    assert main(["train-teacher", "--out", str(tmp_path)]) == EXIT_MISSING
    err = capsys.readouterr().err
    assert err.startswith("error[missing]") and "bundleforge synth" in err


def test_train_without_data(run, tmp_path, capsys):
    _, base = run
    assert main(["train", "--out", str(tmp_path), "--config", base[1]]) == EXIT_MISSING
    assert "bundleforge synth" in capsys.readouterr().err


def test_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("temperature=0\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "error[config]" in capsys.readouterr().err
    assert main(["synth", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_corrupt_checkpoint(run, tmp_path, capsys):
    out, _ = run
    blob = bytearray((out / "teacher.bndc").read_bytes())
    blob[30] ^= 0xFF
    (tmp_path / "teacher.bndc").write_bytes(bytes(blob))
    (tmp_path / "teacher.bndc.json").write_bytes((out / "teacher.bndc.json").read_bytes())
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + f"data_dir={out / 'data'}\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path), "--model", "teacher"]) == EXIT_CHECKPOINT
    assert "CRC" in capsys.readouterr().err


def test_bad_data(run, tmp_path, capsys):
    out, _ = run
    d = tmp_path / "data"
    d.mkdir()
    for f in (out / "data").iterdir():
        (d / f.name).write_bytes(f.read_bytes())
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data_dir={d}\n")
    with open(d / "bundles.tsv", "a") as fh:
        fh.write("b_extra\tno_such_item\n")
    assert main(["feedback", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_DATA
    assert "bundles.tsv" in capsys.readouterr().err
    (d / "idmap.tsv").unlink()
    assert main(["feedback", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_DATA
    assert "idmap.tsv" in capsys.readouterr().err
