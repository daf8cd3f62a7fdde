import subprocess
import sys

import pytest

from gslora import cli, io
from gslora.metrics import read_csv

CONFIG = """
[experiment]
seed = {seed}
output_dir = "{out}"

[data]
num_classes = 4
train_per_class = 20
test_per_class = 10
seq_len = 3
input_dim = 4
noise_sigma = 0.3
sign_flip = false

[model]
num_blocks = 1
model_dim = 16
num_heads = 2
ffn_hidden_dim = 12
dropout = 0.0

[pretrain]
epochs = 6
lr = 1e-2
batch_size = 16

[objective]
bnd = 5.5
alpha_k = 1.0
warmup_epochs = 1

[lora]
rank = 2

[probe]
epochs = 2

[[tasks]]
forget = [0]
epochs = 3
data_ratio = 0.3

[[tasks]]
forget = [2]
epochs = 3
data_ratio = 0.3
"""


@pytest.fixture
def run_dir(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(CONFIG.format(seed=0, out=tmp_path / "run"))
    assert cli.main(["pretrain", "--config", str(path)]) == 0
    return path, tmp_path / "run"


def test_full_pipeline(run_dir, capsys, tmp_path):
    cfg, out = run_dir
    assert (out / "pretrained.gslf").exists() and (out / "manifest.pretrain.json").exists()
    assert cli.main(["forget", "--config", str(cfg)]) == 0
    records = read_csv(out / "metrics.csv")
    assert [r.task for r in records] == [1, 2] and records[0].acc_o is None
    assert "history.0.W1" in io.load_checkpoint(out / "lora.gslf")

    capsys.readouterr()
    assert cli.main(["eval", "--config", str(cfg), "--lora", str(out / "lora.gslf"), "--forgotten", "0,2"]) == 0
    assert '"acc_f"' in capsys.readouterr().out

    assert cli.main(["recover", "--config", str(cfg)]) == 0
    lines = (out / "recovery.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,gslora_acc_f") and len(lines) == 1 + 3

    capsys.readouterr()
    assert cli.main(["report", str(out / "metrics.csv"), "--csv", str(tmp_path / "plot.csv")]) == 0
    table = capsys.readouterr().out
    for col in ("Acc_r", "Acc_f", "Acc_o", "H-Mean", "ZeroGroup"):
        assert col in table
    assert read_csv(tmp_path / "plot.csv") == records


def test_forget_twice_with_seed_flag_is_identical(run_dir, tmp_path):
    cfg, out = run_dir
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["forget", "--config", str(cfg), "--seed", "7", "--out", str(d),
                         "--checkpoint", str(out / "pretrained.gslf")]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_unknown_flag_exits_1_with_usage(capsys):
    assert cli.main(["forget", "--config", "c.toml", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err and "--bogus" in err


def test_validation_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[objective]\nbnd = 1\n[model]\nwidth = 3\n")
    assert cli.main(["pretrain", "--config", str(bad)]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert cli.main(["pretrain", "--config", str(tmp_path / "missing.toml")]) == 1


def test_corrupt_checkpoint_exits_1(run_dir, capsys):
    cfg, out = run_dir
    blob = (out / "pretrained.gslf").read_bytes()
    (out / "pretrained.gslf").write_bytes(blob[: len(blob) // 2])
    assert cli.main(["forget", "--config", str(cfg)]) == 1
    assert "byte offset" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_2(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text(CONFIG.format(seed=0, out=tmp_path / "run").replace("lr = 1e-2\nbatch", "lr = 1e300\nbatch"))
    assert cli.main(["pretrain", "--config", str(path)]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "gslora.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("pretrain", "forget", "eval", "recover", "report"):
        assert cmd in res.stdout
