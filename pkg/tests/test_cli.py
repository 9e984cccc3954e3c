"""End-to-end checks of the command-line surface.

Everything runs in-process through main() so exit codes and stdout are
observable without spawning subprocesses.
"""

import json

import pytest

from wsodkit.cli import main


@pytest.fixture(autouse=True)
def clean_seed_env(monkeypatch):
    monkeypatch.delenv("WSOD_SEED", raising=False)


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def gen_small(capsys, tmp_path, stem="d", **kw):
    data = tmp_path / f"{stem}.jsonl"
    vocab = tmp_path / f"{stem}_vocab.json"
    args = [
        "gen-data",
        "--out", str(data),
        "--vocab-out", str(vocab),
        "--images", "12",
        "--classes", "3",
        "--proposals", "8",
        "--feat-dim", "8",
        "--image-size", "64",
        "--seed", "0",
    ]
    for key, value in kw.items():
        args += [f"--{key}", str(value)]
    code, out, _ = run(capsys, *args)
    assert code == 0
    return data, vocab


def test_full_pipeline(tmp_path, capsys):
    data, vocab = gen_small(capsys, tmp_path)

    relabeled = tmp_path / "relabeled.jsonl"
    code, out, _ = run(
        capsys, "extract-labels",
        "--data", str(data), "--vocab", str(vocab), "--out", str(relabeled),
    )
    assert code == 0 and "labeled 12 images" in out

    ckpt = tmp_path / "model.ckpt"
    report = tmp_path / "report.json"
    code, out, _ = run(
        capsys, "train",
        "--data", str(relabeled), "--vocab", str(vocab),
        "--set", "epochs=2",
        "--checkpoint-out", str(ckpt),
        "--report-out", str(report),
    )
    assert code == 0
    assert "epoch   1/2" in out and "trained 2 epochs" in out
    assert ckpt.exists()
    assert len(json.loads(report.read_text(encoding="utf-8"))["epochs"]) == 2

    dets = tmp_path / "dets.jsonl"
    code, out, _ = run(
        capsys, "infer",
        "--checkpoint", str(ckpt), "--data", str(data), "--vocab", str(vocab),
        "--out", str(dets), "--min-score", "0.0",
    )
    assert code == 0 and "detections ->" in out
    assert dets.read_text(encoding="utf-8").strip()

    priors = tmp_path / "priors.json"
    code, out, _ = run(
        capsys, "estimate-priors",
        "--data", str(data), "--vocab", str(vocab),
        "--predictions", str(dets), "--out", str(priors),
        "--score-threshold", "0.0",
    )
    assert code == 0 and "priors ->" in out
    assert "by_class" in json.loads(priors.read_text(encoding="utf-8"))

    eval_json = tmp_path / "eval.json"
    code, out, _ = run(
        capsys, "evaluate",
        "--detections", str(dets), "--data", str(data), "--vocab", str(vocab),
        "--report-out", str(eval_json),
    )
    assert code == 0
    assert "AP, IoU" in out and "detections" in out
    assert "map50" in json.loads(eval_json.read_text(encoding="utf-8"))

    table = tmp_path / "ablation.json"
    code, out, _ = run(
        capsys, "ablation",
        "--data", str(relabeled), "--vocab", str(vocab),
        "--priors", str(priors),
        "--set", "epochs=1",
        "--out", str(table), "--quiet",
    )
    assert code == 0
    for name in ("baseline", "wsod-amplifier"):
        assert name in out
    assert len(json.loads(table.read_text(encoding="utf-8"))["rows"]) == 6


def test_gen_data_deterministic(tmp_path, capsys):
    d1, v1 = gen_small(capsys, tmp_path, "a")
    d2, v2 = gen_small(capsys, tmp_path, "b")
    assert d1.read_bytes() == d2.read_bytes()
    assert v1.read_bytes() == v2.read_bytes()


def test_gen_data_env_seed(tmp_path, capsys, monkeypatch):
    d1, _ = gen_small(capsys, tmp_path, "a")
    monkeypatch.setenv("WSOD_SEED", "9")
    d2, _ = gen_small(capsys, tmp_path, "b")
    assert d1.read_bytes() != d2.read_bytes()


def test_unknown_config_key_exit_2(tmp_path, capsys):
    data, vocab = gen_small(capsys, tmp_path)
    code, _, err = run(
        capsys, "train",
        "--data", str(data), "--vocab", str(vocab),
        "--set", "does_not_exist=1",
    )
    assert code == 2 and "error:" in err


def test_missing_dataset_exit_3(tmp_path, capsys):
    _, vocab = gen_small(capsys, tmp_path)
    code, _, err = run(
        capsys, "train",
        "--data", str(tmp_path / "absent.jsonl"), "--vocab", str(vocab),
    )
    assert code == 3 and "error:" in err


def test_checkpoint_mismatch_exit_3(tmp_path, capsys):
    data, vocab = gen_small(capsys, tmp_path)
    ckpt = tmp_path / "model.ckpt"
    code, _, _ = run(
        capsys, "train",
        "--data", str(data), "--vocab", str(vocab),
        "--set", "epochs=0", "--checkpoint-out", str(ckpt), "--quiet",
    )
    assert code == 0
    wide, wide_vocab = gen_small(capsys, tmp_path, "wide", **{"feat-dim": 9})
    code, _, err = run(
        capsys, "infer",
        "--checkpoint", str(ckpt), "--data", str(wide), "--vocab", str(wide_vocab),
        "--out", str(tmp_path / "x.jsonl"),
    )
    assert code == 3 and "feature dim" in err


def test_ablation_without_priors_exit_2(tmp_path, capsys):
    data, vocab = gen_small(capsys, tmp_path)
    code, _, err = run(
        capsys, "ablation",
        "--data", str(data), "--vocab", str(vocab),
        "--set", "epochs=1", "--quiet",
    )
    assert code == 2 and "priors" in err


def test_unknown_subcommand_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
