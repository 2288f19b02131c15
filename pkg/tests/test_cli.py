import csv
import hashlib
import io
import subprocess
import sys

import pytest

from bitformer import checkpoint
from bitformer.cli import EXIT_CODES, load_config, main

TINY = """\
[model]
num_layers = 1
num_heads = 2
d_model = 16
d_ff = 32

[data]
task = keyword-presence
n = 120
max_len = 10
min_words = 3
max_words = 7

[distill]
lr = 0.002
batch_size = 16
epochs = 1
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def table(out):
    return list(csv.DictReader(io.StringIO("\n".join(l for l in out.splitlines() if not l.startswith("#")))))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def teacher(tmp_path, ini, capsys):
    out = tmp_path / "fp"
    assert run(capsys, "train-fp", "--config", ini, "--out", out)[0] == 0
    return out / "teacher.ckpt"


def test_train_fp_outputs_and_reproducibility(tmp_path, ini, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, out, _ = run(capsys, "train-fp", "--config", ini, "--out", a, "--seed", 4)
    assert code == 0 and "best dev accuracy" in out
    assert (a / "teacher.ckpt").is_file() and (a / "vocab.txt").is_file()
    run(capsys, "train-fp", "--config", ini, "--out", b, "--seed", 4)
    assert (a / "metrics.tsv").read_text() == (b / "metrics.tsv").read_text()
    assert digest(a / "teacher.ckpt") == digest(b / "teacher.ckpt")


def test_missing_data_path_is_startup_error(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text(TINY.replace("[distill]", "train = nowhere.tsv\ndev = nowhere.tsv\n\n[distill]"))
    out = tmp_path / "o"
    code, _, err = run(capsys, "train-fp", "--config", p, "--out", out)
    assert code == EXIT_CODES["input"] and "input error" in err and "nowhere.tsv" in err
    assert len(err.strip().splitlines()) == 1
    assert not out.exists()


def test_config_errors(tmp_path, capsys):
    p = tmp_path / "c.ini"
    p.write_text("[distill]\nlearning_rate = 1\n")
    assert run(capsys, "flops", "--config", p)[0] == EXIT_CODES["config"]
    p.write_text("[run]\nspec = 1-1-1\nschedule = 1-1-2,1-1-1\n")
    code, _, err = run(capsys, "flops", "--config", p)
    assert code == EXIT_CODES["config"] and "config error" in err
    assert run(capsys, "flops", "--config", tmp_path / "missing.ini")[0] == EXIT_CODES["input"]


def test_tsv_data(tmp_path, capsys):
    rows = "sentence\tlabel\n" + "".join(f"w{i} kw{i % 2}\t{i % 2}\n" for i in range(40))
    (tmp_path / "t.tsv").write_text(rows)
    p = tmp_path / "t.ini"
    p.write_text(TINY.replace("[distill]", f"train = {tmp_path / 't.tsv'}\ndev = {tmp_path / 't.tsv'}\n\n[distill]"))
    assert run(capsys, "train-fp", "--config", p, "--out", tmp_path / "o")[0] == 0
    assert load_config(p).data.train.endswith("t.tsv")


def test_distill_default_schedule_and_eval(tmp_path, teacher, capsys):
    before = digest(teacher)
    out = tmp_path / "d"
    code, stdout, _ = run(capsys, "distill", "--teacher", teacher, "--out", out)
    assert code == 0
    rows = table(stdout)
    assert [r["spec"] for r in rows] == ["1-1-2", "1-1-1"]
    assert [r["teacher"] for r in rows] == ["32-32-32", "1-1-2"]
    assert digest(teacher) == before
    final = out / "stage2_1-1-1.ckpt"
    assert final.is_file() and (out / "stage1_1-1-2.ckpt").is_file()

    code, stdout, _ = run(capsys, "eval", final, "--deploy")
    r = table(stdout)[0]
    assert code == 0 and float(r["max_logit_deviation"]) < 1e-5
    assert 0 <= float(r["accuracy"]) <= 1 and r["spec"] == "1-1-1"

    code, stdout, _ = run(capsys, "inspect-alpha", final, "--out", tmp_path / "a")
    rows = table(stdout)
    model = checkpoint.load(final)
    assert code == 0 and len(rows) == len(model.sites)
    alphas = [float(r["alpha"]) for r in rows]
    assert min(alphas) > 0 and max(alphas) / min(alphas) > 1
    assert len({r["kind"] for r in rows}) == 2
    assert (tmp_path / "a" / "alpha.png").stat().st_size > 0
    assert (tmp_path / "a" / "alpha.csv").read_text().startswith("layer,site,kind,alpha,beta")


def test_distill_metrics_reproducible(tmp_path, teacher, capsys):
    for d in ("r1", "r2"):
        assert run(capsys, "distill", "--teacher", teacher, "--schedule", "1-1-1", "--seed", 3,
                   "--out", tmp_path / d)[0] == 0
    assert (tmp_path / "r1" / "metrics.tsv").read_text() == (tmp_path / "r2" / "metrics.tsv").read_text()


def test_distill_custom_and_progressive(tmp_path, teacher, capsys):
    code, stdout, _ = run(capsys, "distill", "--teacher", teacher, "--schedule", "1-1-8,1-1-1",
                          "--progressive", "--out", tmp_path / "p")
    rows = table(stdout)
    assert code == 0 and [r["spec"] for r in rows] == ["1-1-8", "1-1-1"]
    assert [r["teacher"] for r in rows] == ["32-32-32", "32-32-32"]
    assert checkpoint.read_meta(tmp_path / "p" / "stage2_1-1-1.ckpt")["extra"]["mode"] == "progressive"


def test_distill_bad_schedule_before_training(tmp_path, teacher, capsys):
    out = tmp_path / "x"
    code, _, err = run(capsys, "distill", "--teacher", teacher, "--schedule", "1-1-1,1-1-2", "--out", out)
    assert code == EXIT_CODES["schedule"] and "schedule error" in err
    assert not out.exists()


def test_eval_corrupted_magic(tmp_path, teacher, capsys):
    bad = tmp_path / "bad.ckpt"
    raw = bytearray(teacher.read_bytes())
    raw[:6] = b"XXXXXX"
    bad.write_bytes(bytes(raw))
    code, _, err = run(capsys, "eval", bad)
    assert code == EXIT_CODES["format"] and "format error" in err


def test_inspect_alpha_full_precision(tmp_path, teacher, capsys):
    code, stdout, _ = run(capsys, "inspect-alpha", teacher, "--out", tmp_path / "i")
    assert code == 0 and table(stdout) == [] and "no quantization sites" in stdout


def test_flops_table(capsys):
    code, stdout, _ = run(capsys, "flops", "--preset", "bert-base")
    got = {r["spec"]: (float(r["size_mb"]), float(r["flops_g"])) for r in table(stdout)}
    assert code == 0
    assert abs(got["32-32-32"][0] - 418) / 418 <= 0.10 and abs(got["32-32-32"][1] - 22.5) / 22.5 <= 0.15
    assert abs(got["1-1-1"][0] - 13.4) / 13.4 <= 0.10 and abs(got["1-1-1"][1] - 0.4) / 0.4 <= 0.15
    assert abs(got["1-1-2"][1] - 0.8) / 0.8 <= 0.15


def test_bench(capsys):
    code, stdout, _ = run(capsys, "bench", "--m", 8, "--k", 70, "--n", 5, "--reps", 1)
    assert code == 0 and "checksums match: True" in stdout


def test_sweeps(tmp_path, ini, teacher, capsys):
    code, stdout, _ = run(capsys, "sweep", "--config", ini, "--out", tmp_path / "h")
    assert code == 0 and len(table(stdout)) == 6
    assert (tmp_path / "h" / "sweep.png").stat().st_size > 0 and (tmp_path / "h" / "best.ckpt").is_file()
    code, stdout, _ = run(capsys, "sweep", "--mode", "paths", "--teacher", teacher,
                          "--paths", "1-1-1;1-1-2,1-1-1", "--out", tmp_path / "s")
    rows = table(stdout)
    assert code == 0 and {r["path"] for r in rows} == {"32-32-32->1-1-1", "32-32-32->1-1-2->1-1-1"}
    assert (tmp_path / "s" / "paths.png").stat().st_size > 0


def test_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "bitformer", "flops", "--preset", "bert-base",
                          "--spec", "1-1-4"], capture_output=True, text=True, check=True)
    assert res.stdout.startswith("spec,size_mb,flops_g,params")
