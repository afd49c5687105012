import csv
import json
import shutil
import subprocess
import sys

import pytest

from coordemb.cli import main
from coordemb.training import load_checkpoint


@pytest.fixture(scope="module")
def coord_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("coord")
    assert main(["gen-data", "--task", "coord", "--h", "16", "--w", "16", "--split", "quadrant",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def shapes_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes")
    assert main(["gen-data", "--task", "shapes", "--n", "10", "--edge-bias", "0.8", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def shapes_ckpt(shapes_data, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    ckpt = run / "model.ckpt"
    assert main(["train", "--task", "shapes", "--variant", "coordemb", "--data", str(shapes_data),
                 "--steps", "3", "--batch", "2", "--ckpt", str(ckpt)]) == 0
    return ckpt


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_counts_and_determinism(coord_data, tmp_path):
    meta = json.loads((coord_data / "meta.json").read_text())
    assert (meta["train"], meta["test"]) == (192, 64)
    assert main(["gen-data", "--task", "coord", "--h", "16", "--w", "16", "--split", "quadrant",
                 "--out", str(tmp_path / "again")]) == 0
    assert tree_bytes(coord_data) == tree_bytes(tmp_path / "again")


def test_missing_out_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--task", "coord"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train", "--task", "coord", "--variant", "nope", "--data", "x", "--steps", "1", "--ckpt", "c"],
    ["train", "--task", "coord", "--variant", "vanilla", "--data", "x", "--steps", "-1", "--ckpt", "c"],
    ["eval", "--ckpt", "c", "--data", "x", "--affine", "1,2,3"],
    ["gen-data", "--task", "shapes", "--out", "o", "--edge-bias", "1.5"],
    ["compare", "--task", "coord", "--data", "x", "--steps", "1", "--out", "o", "--seeds", "a,b"],
])
def test_invalid_arguments_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_io_failures_exit_1(tmp_path, coord_data):
    assert main(["train", "--task", "coord", "--variant", "vanilla", "--data", str(tmp_path / "missing"),
                 "--steps", "1", "--ckpt", str(tmp_path / "c.ckpt")]) == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"CEM1\x01\x00\x00\x00\x05")
    assert main(["eval", "--ckpt", str(bad), "--data", str(coord_data)]) == 1


def test_train_zero_steps_equals_init(coord_data, tmp_path):
    from coordemb.experiments import coord_classification_spec
    from coordemb.layers import build_model
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--task", "coord", "--variant", "coordemb", "--data", str(coord_data),
                 "--steps", "0", "--seed", "5", "--ckpt", str(ckpt)]) == 0
    cp = load_checkpoint(ckpt)
    init = build_model(coord_classification_spec("coordemb", 16, 16), 5)
    assert cp.step == 0
    for (na, pa), (nb, pb) in zip(cp.model.named_parameters(), init.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


@pytest.mark.parametrize("variant", ["vanilla", "coordemb", "coordconv"])
def test_train_is_repeatable_for_every_variant(coord_data, tmp_path, variant):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["train", "--task", "coord", "--variant", variant, "--data", str(coord_data),
                     "--steps", "20", "--batch", "8", "--eval-every", "10", "--seed", "1",
                     "--ckpt", str(d / "model.ckpt")]) == 0
        outs.append(tree_bytes(d))
    assert outs[0] == outs[1]
    lines = outs[0]["metrics.csv"].decode().splitlines()
    assert lines[0] == "step,loss,metric_name,metric_value"
    assert {ln.split(",")[0] for ln in lines[1:]} == {"0", "10", "20"}


def test_coord_regression_runs(coord_data, tmp_path):
    assert main(["train", "--task", "coord-reg", "--variant", "coordconv", "--data", str(coord_data),
                 "--steps", "5", "--batch", "8", "--ckpt", str(tmp_path / "m.ckpt")]) == 0


def test_task_dataset_mismatch_exits_1(coord_data, tmp_path):
    assert main(["train", "--task", "shapes", "--variant", "vanilla", "--data", str(coord_data),
                 "--steps", "1", "--ckpt", str(tmp_path / "m.ckpt")]) == 1


def test_eval_without_affine(shapes_ckpt, shapes_data, tmp_path):
    report_path = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(shapes_ckpt), "--data", str(shapes_data),
                 "--report", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["affine"] == {}
    assert {"variant", "task", "config_hash", "step", "version", "metrics", "wall_clock_seconds",
            "per_class_AP"} <= set(report)
    assert report["variant"] == "coordemb" and report["step"] == 3
    assert "mAP" in report["metrics"]
    assert (shapes_ckpt.parent / "detections.jsonl").exists()


def test_eval_identity_and_named_affine(shapes_ckpt, shapes_data, tmp_path):
    report_path = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(shapes_ckpt), "--data", str(shapes_data), "--report", str(report_path),
                 "--affine", "1,0,0,0,0", "--affine", "1,0.2,15,0,0"]) == 0
    report = json.loads(report_path.read_text())
    assert report["affine"]["1,0,0,0,0"]["mAP_affine"] == report["metrics"]["mAP"]
    assert report["affine"]["1,0,0,0,0"]["delta_mAP"] == 0.0
    entry = report["affine"]["1,0.2,15,0,0"]
    assert {"mAP_affine", "delta_mAP", "per_tier_mAP", "images"} <= set(entry)


def test_eval_on_coord_task(coord_data, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--task", "coord", "--variant", "vanilla", "--data", str(coord_data),
          "--steps", "0", "--ckpt", str(ckpt)])
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(coord_data)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["metrics"]) == {"train_accuracy", "test_accuracy"}


def test_gradcheck_gate(capsys):
    assert main(["gradcheck", "--module", "layers"]) == 0
    out = capsys.readouterr().out
    assert "coord_embed_forward" in out and "coord_conv_forward" in out
    assert main(["gradcheck", "--module", "layers", "--inject-fault", "coord_embed_forward"]) == 1
    assert "FAIL  coord_embed_forward" in capsys.readouterr().out
    assert main(["gradcheck", "--inject-fault", "no_such_op"]) == 2


def test_compare_zero_steps_schema(coord_data, tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--task", "coord", "--data", str(coord_data), "--seeds", "0",
                 "--steps", "0", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "comparison.csv").open()))
    keys = [(r["variant"], r["seed"]) for r in rows]
    for v in ("vanilla", "coordemb", "coordconv"):
        assert (v, "0") in keys
        for stat in ("mean", "min", "max"):
            assert (v, stat) in keys
    assert len(rows) == 3 + 9
    acc = {r["variant"]: float(r["test_accuracy"]) for r in rows if r["seed"] == "0"}
    # untrained: everything near chance on the 64 held-out pixels
    assert all(a <= 0.1 for a in acc.values())
    report = json.loads((out / "comparison.json").read_text())
    assert {"runs", "aggregates", "comparison", "columns", "version", "wall_clock_seconds"} <= set(report)
    assert set(report["comparison"]["coordemb_minus_vanilla"]) == {"mean", "min", "max", "per_seed"}


def test_console_script_exit_codes(tmp_path):
    exe = shutil.which("coordemb")
    cmd = [exe] if exe else [sys.executable, "-m", "coordemb.cli"]
    assert subprocess.run(cmd + ["gen-data", "--task", "coord"], capture_output=True).returncode == 2
    res = subprocess.run(cmd + ["gen-data", "--task", "coord", "--h", "4", "--w", "4", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "12 train + 4 test" in res.stdout
