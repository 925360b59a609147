import json
import os

import pytest

from invdistill.cli import main

TOY = {"n_tokens": 2, "length": 2, "probs": [0.4, 0.1, 0.2, 0.3]}


def pipeline(root):
    os.makedirs(root, exist_ok=True)
    cwd = os.getcwd()
    os.chdir(root)
    try:
        with open("p.json", "w") as fh:
            json.dump(TOY, fh)
        codes = [
            main(["train-teacher", "--toy-spec", "p.json", "--steps", "40", "--out", "t.json",
                  "--metrics", "t.csv"]),
            main(["distill", "--toy-spec", "p.json", "--teacher", "t.json", "--steps", "6", "--batch", "8",
                  "--eval-every", "3", "--nll-draws", "2", "--state", "st.json", "--checkpoint-every", "3",
                  "--out", "s.json", "--metrics", "d.csv"]),
            main(["sample", "--checkpoint", "s.json", "--count", "3", "--out", "x.txt"]),
            main(["eval", "--samples", "x.txt", "--checkpoint", "t.json", "--toy-spec", "p.json",
                  "--nll-draws", "2", "--out", "r.csv"]),
            main(["oracle-check", "--trials", "2", "--out", "o.csv"]),
        ]
    finally:
        os.chdir(cwd)
    files = {}
    for name in sorted(os.listdir(root)):
        with open(os.path.join(root, name), "rb") as fh:
            files[name] = fh.read()
    return codes, files


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return pipeline(str(base / "a")), pipeline(str(base / "b"))


def test_commands_succeed_and_write_outputs(runs):
    (codes, files), _ = runs
    assert codes == [0, 0, 0, 0, 0]
    for name in ("t.json", "t.csv", "t.png", "st.json", "s.json", "d.csv", "d.png", "x.txt", "r.csv", "r.png",
                 "o.csv", "o.png"):
        assert name in files, name


def test_reruns_are_byte_identical(runs):
    (_, a), (_, b) = runs
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name


def test_sample_count_and_metric_columns(runs):
    (_, files), _ = runs
    lines = [ln for ln in files["x.txt"].decode().splitlines() if ln and not ln.startswith("#")]
    assert len(lines) == 3
    header = files["d.csv"].decode().splitlines()[0].split(",")
    assert {"step", "loss_fake", "loss_student", "entropy", "exact_kl"} <= set(header)
    rows = files["d.csv"].decode().splitlines()[1:]
    assert len(rows) == 6
    report = dict(ln.split(",", 1) for ln in files["r.csv"].decode().splitlines()[1:])
    assert {"entropy", "nll", "exact_kl"} <= report.keys()


def test_zero_steps_checkpoint_is_initialization(tmp_path):
    from invdistill.io import load_checkpoint

    (tmp_path / "p.json").write_text(json.dumps(TOY))
    for name in ("a", "b"):
        assert main(["train-teacher", "--toy-spec", str(tmp_path / "p.json"), "--steps", "0",
                     "--out", str(tmp_path / f"{name}.json")]) == 0
    a, b = load_checkpoint(str(tmp_path / "a.json")), load_checkpoint(str(tmp_path / "b.json"))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert a.names() == b.names()


def test_resume_matches_uninterrupted(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps(TOY))
    p = str(tmp_path / "p.json")
    assert main(["train-teacher", "--toy-spec", p, "--steps", "10", "--out", str(tmp_path / "t.json")]) == 0
    common = ["distill", "--toy-spec", p, "--teacher", str(tmp_path / "t.json"), "--batch", "4"]
    assert main(common + ["--steps", "6", "--out", str(tmp_path / "full.json"),
                          "--metrics", str(tmp_path / "full.csv")]) == 0
    assert main(common + ["--steps", "3", "--state", str(tmp_path / "st.json"), "--out", str(tmp_path / "x.json"),
                          "--metrics", str(tmp_path / "part.csv")]) == 0
    assert main(common + ["--steps", "6", "--state", str(tmp_path / "st.json"), "--resume",
                          "--out", str(tmp_path / "part.json"), "--metrics", str(tmp_path / "part.csv")]) == 0
    assert (tmp_path / "full.json").read_bytes() == (tmp_path / "part.json").read_bytes()
    assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "part.csv").read_bytes()


def test_exit_codes(tmp_path, capsys):
    (tmp_path / "p.json").write_text(json.dumps(TOY))
    p = str(tmp_path / "p.json")
    # config error: loss incompatible with the process
    assert main(["train-teacher", "--toy-spec", p, "--process", "uniform", "--loss", "mdlm", "--steps", "1",
                 "--out", str(tmp_path / "u.json")]) == 1
    assert not (tmp_path / "u.json").exists()
    # data errors
    assert main(["train-teacher", "--toy-spec", str(tmp_path / "missing.json"), "--steps", "1",
                 "--out", str(tmp_path / "m.json")]) == 2
    bad = dict(TOY, probs=[0.4, 0.1, 0.2, 0.2])
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["train-teacher", "--toy-spec", str(tmp_path / "bad.json"), "--steps", "1",
                 "--out", str(tmp_path / "m.json")]) == 2
    assert main(["sample", "--checkpoint", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "m.txt")]) == 2
    # numeric error: a checkpoint with non-finite weights
    assert main(["train-teacher", "--toy-spec", p, "--steps", "0", "--out", str(tmp_path / "t.json")]) == 0
    env = json.loads((tmp_path / "t.json").read_text())
    import base64

    import numpy as np

    key = sorted(env["arrays"])[0]
    shape = env["arrays"][key]["shape"]
    env["arrays"][key]["data"] = base64.b64encode(np.full(shape, np.nan).astype("<f8").tobytes()).decode()
    (tmp_path / "nan.json").write_text(json.dumps(env))
    assert main(["sample", "--checkpoint", str(tmp_path / "nan.json"), "--out", str(tmp_path / "x.txt")]) == 3
    err = capsys.readouterr().err
    assert "error" in err


def test_corpus_mode_sampling_decodes_text(tmp_path):
    (tmp_path / "c.txt").write_text("abba\nbaab\nabab\n")
    assert main(["train-teacher", "--corpus", str(tmp_path / "c.txt"), "--length", "5", "--steps", "5",
                 "--out", str(tmp_path / "t.json")]) == 0
    assert main(["sample", "--checkpoint", str(tmp_path / "t.json"), "--count", "2", "--sampler-steps", "4",
                 "--out", str(tmp_path / "x.txt")]) == 0
    text = (tmp_path / "x.txt").read_text().splitlines()
    assert sum(ln.startswith("#") for ln in text) == 2
    assert len([ln for ln in text if ln and not ln.startswith("#")]) == 2


@pytest.mark.slow
def test_toy_teacher_reaches_oracle_posterior(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps({"n_tokens": 2, "length": 1, "probs": [0.75, 0.25]}))
    assert main(["train-teacher", "--toy-spec", str(tmp_path / "p.json"), "--steps", "2000",
                 "--out", str(tmp_path / "t.json"), "--metrics", str(tmp_path / "m.csv")]) == 0
    last = (tmp_path / "m.csv").read_text().splitlines()[-1].split(",")
    header = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert float(last[header.index("oracle_tv")]) < 0.02


def test_eval_without_reachable_scorer_still_succeeds(tmp_path, monkeypatch):
    (tmp_path / "p.json").write_text(json.dumps(TOY))
    p = str(tmp_path / "p.json")
    assert main(["train-teacher", "--toy-spec", p, "--steps", "2", "--out", str(tmp_path / "t.json")]) == 0
    assert main(["sample", "--checkpoint", str(tmp_path / "t.json"), "--count", "2",
                 "--out", str(tmp_path / "x.txt")]) == 0
    monkeypatch.setenv("INVDISTILL_SCORE_URL", "http://127.0.0.1:9")
    assert main(["eval", "--samples", str(tmp_path / "x.txt"), "--out", str(tmp_path / "r.csv")]) == 0
    assert "gen_ppl" not in (tmp_path / "r.csv").read_text()
