import numpy as np
import pytest

from mhfpn import ablation
from mhfpn.ablation import AblationResult, parse_raw_csv, raw_csv, summary_csv
from mhfpn.cli import main
from mhfpn.config import load_config
from mhfpn.metrics import REPORT_COLUMNS, csv_to_froc, csv_to_rows
from mhfpn.model import read_checkpoint

TINY = """
data.n_images = 12
data.split = holdout
data.n_train = 8
data.n_val = 2
data.n_test = 2
train.epochs = {epochs}
neck.out_channels = 8
"""


@pytest.fixture
def cfg_path(tmp_path):
    def make(epochs=1, extra=""):
        p = tmp_path / f"tiny_{epochs}.cfg"
        p.write_text(TINY.format(epochs=epochs) + extra)
        return str(p)
    return make


def test_train_smoke_writes_artifacts(tmp_path, cfg_path):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg_path(), "--out", str(out)]) == 0
    assert (out / "model.ckpt").exists()
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,val_tpr" and len(log) == 2
    resolved = load_config(out / "config.txt")
    assert resolved.train.epochs == 1 and resolved.data.n_train == 8


def test_train_is_deterministic(tmp_path, cfg_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        main(["train", "--config", cfg_path(2), "--seed", "3", "--out", str(o)])
    for name in ("model.ckpt", "train_log.csv", "config.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    main(["train", "--config", cfg_path(2), "--seed", "4", "--out", str(tmp_path / "c")])
    assert (tmp_path / "c" / "model.ckpt").read_bytes() != (outs[0] / "model.ckpt").read_bytes()


def test_eval_oracle_and_empty(tmp_path, cfg_path):
    cfg = cfg_path(extra="data.n_images = 40\ndata.n_train = 20\ndata.n_val = 10\ndata.n_test = 10\n")
    main(["eval", "--config", cfg, "--predictor", "oracle", "--out", str(tmp_path / "o")])
    row = csv_to_rows((tmp_path / "o" / "metrics.csv").read_text())["MHFPN"]
    assert row["AP@50"] == 1.0 and row["TPR@50"] == 1.0 and row["FPPI"] == 0.0
    main(["eval", "--config", cfg, "--predictor", "empty", "--name", "none", "--out", str(tmp_path / "e")])
    text = (tmp_path / "e" / "metrics.csv").read_text()
    assert text.splitlines()[0] == "model," + ",".join(REPORT_COLUMNS)
    row = csv_to_rows(text)["none"]
    assert row["AP@50"] == 0.0 and row["TPR@50"] == 0.0 and row["FPPI"] == 0.0
    curve = csv_to_froc((tmp_path / "e" / "froc.csv").read_text())
    assert all(p == (0.0, 0.0) for p in curve.points)


def test_eval_checkpoint(tmp_path, cfg_path):
    main(["train", "--config", cfg_path(), "--out", str(tmp_path / "t")])
    ck = str(tmp_path / "t" / "model.ckpt")
    assert main(["eval", "--config", cfg_path(), "--checkpoint", ck, "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "froc.csv").read_text().startswith("threshold,fppi,tpr\n")
    # a checkpoint from a different neck names the offending parameter
    with pytest.raises((KeyError, ValueError), match="neck"):
        main(["eval", "--config", cfg_path(extra="neck.variant = FPN\n"), "--checkpoint", ck,
              "--out", str(tmp_path / "x")])


def test_checkpoint_shape_mismatch_names_parameter(tmp_path, cfg_path):
    main(["train", "--config", cfg_path(), "--out", str(tmp_path / "t")])
    ck = str(tmp_path / "t" / "model.ckpt")
    with pytest.raises(ValueError, match=r"neck\..*shape"):
        main(["eval", "--config", cfg_path(extra="neck.out_channels = 4\n"), "--checkpoint", ck,
              "--out", str(tmp_path / "x")])
    state = read_checkpoint(ck)
    assert all(v.dtype == np.float64 for v in state.values())


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--points", "1"]) == 0
    out = capsys.readouterr().out
    for v in ("FPN", "PANET", "HRFPN", "MHFPN"):
        assert f"neck {v}" in out
    assert main(["gradcheck", "--points", "1", "--inject-fault", "upsample"]) != 0


def test_gen_data(tmp_path):
    assert main(["gen-data", "--n", "4", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.pgm"))) == 4
    assert (tmp_path / "annotations.json").exists()


def test_ablate_tiny_layout_and_determinism(tmp_path, cfg_path):
    args = ["ablate", "--config", cfg_path(), "--replicates", "2", "--variants", "FPN,MHFPN"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    for name in ("ablation.csv", "ablation_max.csv", "ablation_raw.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["FPN", "MHFPN"]
    raw = parse_raw_csv((tmp_path / "a" / "ablation_raw.csv").read_text())
    assert {v: len(r) for v, r in raw.raw.items()} == {"FPN": 2, "MHFPN": 2}
    assert raw.mean("MHFPN", "Params") > raw.mean("FPN", "Params")


def test_summary_recomputed_from_raw():
    rows = lambda vals: [dict({c: 0.0 for c in REPORT_COLUMNS}, **{"AP@50": v, "AP@50S": None}) for v in vals]
    res = AblationResult({"FPN": rows([0.5, 0.7, 0.6, 0.4, 0.8]), "MHFPN": rows([0.6] * 5)})
    line = summary_csv(res).splitlines()[1].split(",")
    assert line[0] == "FPN"
    assert line[1] == f"{0.6:.4f} ({np.std([0.5, 0.7, 0.6, 0.4, 0.8], ddof=1):.4f})"
    assert line[3] == "-"
    back = parse_raw_csv(raw_csv(res))
    assert back.raw == res.raw
    assert ablation.ordering_holds(res, columns=("AP@50",)) == {"AP@50": True}
    assert ablation.ordering_holds(res, columns=("AP@50S",)) == {"AP@50S": False}


def test_replicate_configs_differ_only_in_neck():
    cfg = load_config(None)
    a = ablation.replicate_config(cfg, "FPN", 2)
    b = ablation.replicate_config(cfg, "MHFPN", 2)
    assert a.neck.variant == "FPN" and b.neck.variant == "MHFPN"
    for section in ("backbone", "head", "data", "train", "eval"):
        assert getattr(a, section) == getattr(b, section)
    assert a.train.replicate == 2 and a.train.seed == cfg.train.seed + 2
