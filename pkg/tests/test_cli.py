import hashlib
import subprocess
import sys

import numpy as np
import pytest

from ctxdrl import pipeline
from ctxdrl.cli import main
from ctxdrl.config import from_mapping, parse_text
from ctxdrl.policy import enumerate_grid, init_params, load_checkpoint

FAST = """
train.epochs = 2
train.batch_size = 4
train.episode_length = 20
"""


def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(x for x in directory.rglob("*") if x.is_file()):
        h.update(str(p.relative_to(directory)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def fast_cfg(tmp_path):
    path = tmp_path / "fast.cfg"
    path.write_text(FAST)
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_prepare_writes_panel_and_split(tmp_path, fast_cfg, capsys):
    code, out, _ = _run(capsys, "prepare", "--config", fast_cfg, "--out", tmp_path / "o")
    assert code == 0
    kv = _kv(out)
    assert kv["assets"] == "4" and kv["test_rows"] == "587"
    split = (tmp_path / "o" / "split.csv").read_text()
    assert split.startswith("# input_hash: ") and "test,2018-01-01,2020-03-31,587" in split


def test_train_evaluate_roundtrip_is_byte_identical(tmp_path, fast_cfg, capsys):
    out = tmp_path / "o"
    assert _run(capsys, "train", "--config", fast_cfg, "--out", out)[0] == 0
    ck = out / "checkpoint.bin"
    for name in ("e1", "e2"):
        code, stdout, _ = _run(capsys, "evaluate", "--config", fast_cfg, "--out", tmp_path / name, "--checkpoint", ck)
        assert code == 0 and _kv(stdout)["n_days"] == "587"
    assert _digest(tmp_path / "e1") == _digest(tmp_path / "e2")
    names = sorted(p.name for p in (tmp_path / "e1" / "reports").glob("*.json"))
    assert names == ["drl.json", "dynamic_markovitz.json", "naive_winner.json", "only_asset_1.json",
                     "only_asset_2.json", "only_asset_3.json", "static_markovitz.json"]
    assert (tmp_path / "e1" / "summary_value.png").stat().st_size > 0


def test_every_output_embeds_config_and_hash(tmp_path, fast_cfg, capsys):
    out = tmp_path / "o"
    _run(capsys, "train", "--config", fast_cfg, "--out", out)
    _run(capsys, "evaluate", "--config", fast_cfg, "--out", out, "--checkpoint", out / "checkpoint.bin")
    for p in [out / "train_log.csv", out / "summary.csv", out / "reports" / "drl.csv"]:
        head = p.read_text().splitlines()[:3]
        assert any(l.startswith("# input_hash: ") for l in head) and any(l.startswith("# config: ") for l in head)
    assert '"input_hash"' in (out / "reports" / "drl.json").read_text()


def test_zero_epochs_checkpoint_is_initialisation(tmp_path, capsys):
    cfg_path = tmp_path / "zero.cfg"
    cfg_path.write_text("train.epochs = 0\nseed = 5\n")
    out = tmp_path / "o"
    assert _run(capsys, "train", "--config", cfg_path, "--out", out)[0] == 0
    cfg = from_mapping(parse_text(cfg_path.read_text()))
    data = pipeline.prepare_data(cfg)
    spec = pipeline.spec_of(cfg, data.train)
    params, seed, step = load_checkpoint(out / "checkpoint.bin", spec)
    assert params.values.tobytes() == init_params(spec, 5).values.tobytes()
    assert (seed, step) == (5, 0)
    assert _run(capsys, "evaluate", "--config", cfg_path, "--out", out, "--checkpoint", out / "checkpoint.bin")[0] == 0


def test_seed_flag_overrides_config(tmp_path, fast_cfg, capsys):
    _run(capsys, "train", "--config", fast_cfg, "--out", tmp_path / "a", "--seed", "3", "--no-figures")
    _run(capsys, "train", "--config", fast_cfg, "--out", tmp_path / "b", "--seed", "4", "--no-figures")
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() != (tmp_path / "b" / "checkpoint.bin").read_bytes()
    assert not (tmp_path / "a" / "train_log.png").exists()


def test_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.epoch = 3\n")
    code, out, err = _run(capsys, "prepare", "--config", bad, "--out", tmp_path / "o")
    assert code == 2 and out == ""
    assert err.count("\n") == 1 and err.startswith("error exit=2 type=ConfigError message=")


def test_data_error_exit_3(tmp_path, capsys):
    (tmp_path / "prices.csv").write_text("date,a,b,vix\n2020-01-01,100,50,12\n2020-01-02,abc,51,13\n")
    (tmp_path / "schema.txt").write_text("a = asset_price\nb = asset_price\nvix = context\n")
    cfg = tmp_path / "csv.cfg"
    cfg.write_text("data.source = csv\ndata.csv = [prices.csv]\ndata.schema = schema.txt\n")
    code, _, err = _run(capsys, "prepare", "--config", cfg, "--out", tmp_path / "o")
    assert code == 3 and err.startswith("error exit=3 type=DataError")


def test_missing_checkpoint_exit_3(tmp_path, fast_cfg, capsys):
    code, _, err = _run(capsys, "evaluate", "--config", fast_cfg, "--out", tmp_path / "o",
                        "--checkpoint", tmp_path / "nope.bin")
    assert code == 3 and err.startswith("error exit=3")


def test_numeric_error_exit_4_keeps_last_good_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "flat.cfg"
    cfg.write_text(FAST + """
train.reward = sharpe
train.commission_bps = 0
synth.regime0.mean = [0, 0, 0]
synth.regime0.vol = [0, 0, 0]
synth.regime0.corr = 0
synth.regime0.duration = 1e9
""")
    code, _, err = _run(capsys, "train", "--config", cfg, "--out", tmp_path / "o")
    assert code == 4 and err.startswith("error exit=4 type=TrainingAborted")
    assert (tmp_path / "o" / "checkpoint.bin").exists()
    assert "# aborted: " in (tmp_path / "o" / "train_log.csv").read_text()


def test_grid_subset_identical_across_worker_counts(tmp_path, fast_cfg):
    cfg = from_mapping(parse_text(FAST))
    points = enumerate_grid()[:4]
    pipeline.run_grid(cfg, tmp_path / "w1", 1, False, points)
    pipeline.run_grid(cfg, tmp_path / "w3", 3, False, points)
    assert _digest(tmp_path / "w1") == _digest(tmp_path / "w3")
    rows = [l for l in (tmp_path / "w1" / "ranking.csv").read_text().splitlines() if not l.startswith("#")]
    returns = [float(r.split(",")[8]) for r in rows[1:]]
    assert len(returns) == 4 and returns == sorted(returns, reverse=True)


def test_compare_writes_deltas(tmp_path, capsys):
    cfg = from_mapping(parse_text(FAST))
    points = [g for g in enumerate_grid() if g.reward == "net_profit" and not g.adversarial and g.arch == "conv"]
    pipeline.run_grid(cfg, tmp_path / "g", 1, False, points)
    cfg_path = tmp_path / "fast.cfg"
    cfg_path.write_text(FAST)
    code, out, _ = _run(capsys, "compare", "--config", cfg_path, "--out", tmp_path / "g", "--no-figures")
    kv = _kv(out)
    assert code == 0 and kv["models"] == "4" and kv["pairs"] == "2"
    text = (tmp_path / "g" / "context_deltas.csv").read_text()
    assert "# mean_annual_return_delta: " in text


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ctxdrl", "prepare", "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "rows=2673" in res.stdout
    res = subprocess.run([sys.executable, "-m", "ctxdrl", "evaluate"], capture_output=True, text=True)
    assert res.returncode == 2 and "--checkpoint" in res.stderr
