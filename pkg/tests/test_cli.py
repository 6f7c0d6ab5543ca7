import json
import subprocess
import sys

import pytest

from noisyseg.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, main
from noisyseg.core import dump_json, load_json

from .helpers import reference_manifest, tiny_plan


def _spec(tmp_path):
    path = tmp_path / "spec.json"
    dump_json(path, tiny_plan()["dataset"])
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--spec", str(_spec(root)), "--out", str(root / "data")]) == EXIT_OK
    return root / "data"


def test_synth_is_deterministic(data_dir, tmp_path, capsys):
    capsys.readouterr()
    main(["synth", "--spec", str(_spec(tmp_path)), "--out", str(tmp_path / "a")])
    main(["synth", "--spec", str(_spec(tmp_path)), "--out", str(tmp_path / "b")])
    a, b = capsys.readouterr().out.split()
    assert a == b and len(a) == 64


def test_softlabel_command(data_dir, tmp_path, capsys):
    import shutil

    copy = tmp_path / "d"
    shutil.copytree(data_dir, copy)
    params = tmp_path / "p.json"
    dump_json(params, {"k": 2.0, "lam": 0.25})
    assert main(["softlabel", "--data", str(copy), "--params", str(params)]) == EXIT_OK
    assert load_json(copy / "train" / "manifest.json")["specs"]["softlabel"] == {"k": 2.0, "lam": 0.25}
    dump_json(params, {"lam": 3})
    assert main(["softlabel", "--data", str(copy), "--params", str(params)]) == EXIT_CONFIG


def test_train_then_eval(data_dir, tmp_path, capsys):
    ck = tmp_path / "ck"
    assert main(["train", "--data", str(data_dir), "--loss", "soft baseline", "--out", str(ck),
                 "--epochs", "2"]) == EXIT_OK
    meta = load_json(ck / "index.json")["meta"]
    assert meta["row"]["name"] == "Soft Baseline" and meta["train"]["epochs"] == 2
    report = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(ck), "--data", str(data_dir), "--report", str(report)]) == EXIT_OK
    payload = load_json(report)
    assert set(payload["aggregate"]) == {"ap50", "ap75", "iou", "recall", "precision", "dice"}
    assert payload["config"]["name"] == "Soft Baseline"


def test_train_with_row_file(data_dir, tmp_path):
    row = tmp_path / "row.json"
    dump_json(row, {"name": "custom", "loss": {"w_bce": 0, "w_sce": 1, "w_rce": 0.5}, "label": "soft"})
    assert main(["train", "--data", str(data_dir), "--loss", str(row), "--out", str(tmp_path / "ck"),
                 "--epochs", "1"]) == EXIT_OK


def test_exit_codes(data_dir, tmp_path, capsys):
    assert main(["train", "--data", str(data_dir), "--loss", "nope", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["ablate", "--plan", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    dump_json(bad, {"seeds": []})
    assert main(["ablate", "--plan", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["eval", "--ckpt", str(tmp_path / "missing"), "--data", str(data_dir),
                 "--report", str(tmp_path / "r.json")]) == EXIT_DATA
    assert main(["train", "--data", str(tmp_path / "nodata"), "--loss", "baseline",
                 "--out", str(tmp_path / "x")]) == EXIT_DATA
    assert main(["train", "--data", str(data_dir), "--loss", "baseline", "--out", str(tmp_path / "x"),
                 "--lr", "1e30", "--epochs", "3"]) == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_compare_command(tmp_path, capsys):
    path = tmp_path / "m.json"
    dump_json(path, reference_manifest())
    capsys.readouterr()
    assert main(["compare", "--manifest", str(path)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["flags"]["target_top2_dice"] is True
    m = reference_manifest()
    m["rows"] = m["rows"][1:]
    dump_json(path, m)
    assert main(["compare", "--manifest", str(path)]) == EXIT_DATA


def test_ablate_prints_csv(tmp_path, capsys):
    plan = tmp_path / "plan.json"
    dump_json(plan, tiny_plan(epochs=1))
    capsys.readouterr()
    assert main(["ablate", "--plan", str(plan), "--out", str(tmp_path / "o")]) == EXIT_OK
    out = capsys.readouterr().out
    assert out == (tmp_path / "o" / "results.csv").read_text()
    assert out.splitlines()[0].startswith("Method,BCE,SCE,RCE,label,AP50")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "noisyseg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gradcheck" in proc.stdout
