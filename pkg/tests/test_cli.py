import subprocess
import sys

import pytest

from liplocal.cli import main

CONFIG = """arch = F(16)-F(16)-F(2)
data = synth:gaussian_blobs:300:1
model_out = {d}/model.llnn
metrics_out = {d}/metrics.txt
cache_out = {d}/cache.bin
eps_target = 0.5
epochs = 5
lr_decay_epoch = 3
eps_sched_epochs = 3
initial_lr = 0.01
end_lr = 0.001
lambda_sparse = 0.01
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "run.cfg").write_text(CONFIG.format(d=d))
    assert main(["train", "--config", str(d / "run.cfg")], environ={}) == 0
    return d


def test_toy_exits_zero(capsys):
    assert main(["toy"], environ={}) == 0
    assert "all values match" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "liplocal", "toy"], capture_output=True, text=True)
    assert out.returncode == 0


def test_train_writes_model_metrics_and_cache(trained):
    assert (trained / "model.llnn").stat().st_size > 0
    assert (trained / "cache.bin").stat().st_size > 0
    lines = (trained / "metrics.txt").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 6


def test_same_seed_same_metrics(trained, tmp_path):
    (tmp_path / "run.cfg").write_text(CONFIG.format(d=tmp_path))
    assert main(["train", "--config", str(tmp_path / "run.cfg")], environ={}) == 0
    assert (tmp_path / "metrics.txt").read_text() == (trained / "metrics.txt").read_text()
    assert (tmp_path / "model.llnn").read_bytes() == (trained / "model.llnn").read_bytes()


def test_missing_config_is_usage_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")], environ={}) == 2
    with pytest.raises(SystemExit) as e:
        main(["train"], environ={})
    assert e.value.code == 2


def test_bad_config_exits_one(tmp_path):
    (tmp_path / "bad.cfg").write_text("arch = F(2)\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")], environ={}) == 1


def test_certify_eval_attack(trained, capsys):
    common = ["--model", str(trained / "model.llnn"), "--data", "synth:gaussian_blobs:200:7", "--eps", "0.5"]
    rec = trained / "records.txt"
    assert main(["certify", *common, "--mode", "bcp", "--records", str(rec)], environ={}) == 0
    out = capsys.readouterr().out
    assert "certified_acc" in out and "frac_tier3" in out
    assert len(rec.read_text().splitlines()) == 201
    assert main(["eval", *common], environ={}) == 0
    assert "frac_certified_local   0.0000" in capsys.readouterr().out
    assert main(["attack", *common, "--steps", "10"], environ={}) == 0
    assert "pgd_acc" in capsys.readouterr().out


def test_negative_eps_is_usage_error(trained):
    with pytest.raises(SystemExit) as e:
        main(["certify", "--model", str(trained / "model.llnn"), "--data", "synth:gaussian_blobs:10",
              "--eps", "-1"], environ={})
    assert e.value.code == 2


def test_corrupt_model_exits_one(trained, tmp_path):
    (tmp_path / "bad.llnn").write_bytes((trained / "model.llnn").read_bytes()[:-7])
    assert main(["eval", "--model", str(tmp_path / "bad.llnn"), "--data", "synth:gaussian_blobs:10",
                 "--eps", "0.1"], environ={}) == 1


def test_data_shape_mismatch_is_usage_error(trained, tmp_path):
    from liplocal.io_formats import write_idx
    import numpy as np

    write_idx(tmp_path / "x.idx", np.zeros((2, 4, 4)))
    write_idx(tmp_path / "y.idx", [0, 1], labels=True)
    assert main(["eval", "--model", str(trained / "model.llnn"), "--data", str(tmp_path / "x.idx"),
                 "--labels", str(tmp_path / "y.idx"), "--eps", "0.1"], environ={}) == 2


def test_environment_overrides(trained, capsys):
    env = {"LIPLOCAL_EPS": "0.0", "LIPLOCAL_MODEL": str(trained / "model.llnn"),
           "LIPLOCAL_DATA": "synth:gaussian_blobs:50:3"}
    assert main(["certify", "--tiers", "global"], environ=env) == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.startswith("clean_acc"))
    cert = next(l for l in out.splitlines() if l.startswith("certified_acc"))
    assert line.split()[1] == cert.split()[1]
    with pytest.raises(SystemExit):
        main(["certify", "--tiers", "global"], environ={**env, "LIPLOCAL_EPS": "-3"})
