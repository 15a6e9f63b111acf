import json

import numpy as np
import pytest

from foleyflow.cli import main
from foleyflow.config import preset
from foleyflow.network import count_params
from foleyflow.tensorio import read_tensor, write_tensor


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "6", "--seed", "1", "--duration", "2", "--out",
                 str(d / "m.jsonl"), "--report", str(d / "g.json")]) == 0
    assert main(["train", "--manifest", str(d / "m.jsonl"), "--out", str(d / "c.ckpt"),
                 "--steps", "3", "--warmup", "1", "--batch-size", "2", "--lr", "1e-3",
                 "--log", str(d / "log.jsonl"), "--report", str(d / "t.json")]) == 0
    return d


def test_gen_data_idempotent(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(capsys, "gen-data", "--n", 100, "--seed", 7, "--out", a)[0] == 0
    assert run(capsys, "gen-data", "--n", 100, "--seed", 7, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 100


def test_report_contents(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--n", 3, "--seed", 2, "--out", tmp_path / "m.jsonl")
    assert code == 0
    report = json.loads(out.strip().splitlines()[-1])
    assert {"command", "version", "seed", "config", "config_hash", "results"} <= set(report)
    assert report["seed"] == 2 and report["config"]["n"] == 3


def test_train_outputs(trained):
    log = [json.loads(x) for x in (trained / "log.jsonl").read_text().splitlines()]
    assert len(log) == 3
    report = json.loads((trained / "t.json").read_text())
    assert report["results"]["step"] == 3
    assert report["config"]["train"]["total_steps"] == 3


def test_sample_defaults_and_determinism(trained, capsys):
    a, b = trained / "a.bin", trained / "b.bin"
    code, out, _ = run(capsys, "sample", "--checkpoint", trained / "c.ckpt", "--out", a,
                       "--duration", 2, "--seed", 5, "--mel-out", trained / "mel.bin")
    assert code == 0
    report = json.loads(out.strip().splitlines()[-1])
    assert report["config"]["sample"]["n_steps"] == 25
    assert report["config"]["sample"]["cfg_strength"] == 4.5
    run(capsys, "sample", "--checkpoint", trained / "c.ckpt", "--out", b, "--duration", 2,
        "--seed", 5)
    assert a.read_bytes() == b.read_bytes()
    z, header = read_tensor(a)
    assert z.shape == (round(2 * 31.25), 8) and header["fps"] == 31.25
    mel, mh = read_tensor(trained / "mel.bin")
    assert mel.shape == (2 * z.shape[0], 80) and mh["kind"] == "mel"


def test_sample_other_duration_and_modalities(trained, capsys):
    out = trained / "ten.bin"
    code, _, _ = run(capsys, "sample", "--checkpoint", trained / "c.ckpt", "--out", out,
                     "--duration", 10, "--steps", 2, "--no-video", "--no-text")
    assert code == 0
    assert read_tensor(out)[0].shape == (round(10 * 31.25), 8)


def test_sample_duration_bounds(trained):
    with pytest.raises(SystemExit) as e:
        main(["sample", "--checkpoint", str(trained / "c.ckpt"), "--out", str(trained / "x.bin"),
              "--duration", "61"])
    assert e.value.code == 2
    assert not (trained / "x.bin").exists()


def test_inspect(trained, capsys):
    code, out, _ = run(capsys, "inspect", trained / "c.ckpt")
    assert code == 0
    report = json.loads(out.strip().splitlines()[-1])
    assert report["results"]["n_params"] == count_params(preset("tiny"))
    assert report["results"]["count_params"] == report["results"]["n_params"]
    assert "model/head.weight\t(8, 64)" in out


def test_eval_fd_same_file(tmp_path, capsys, rng):
    write_tensor(tmp_path / "e.bin", rng.standard_normal((50, 4)))
    code, out, _ = run(capsys, "eval-fd", tmp_path / "e.bin", tmp_path / "e.bin")
    assert code == 0 and out.splitlines()[0] == "0.0"


def test_eval_is_kl(tmp_path, capsys, rng):
    write_tensor(tmp_path / "l.bin", rng.standard_normal((20, 4)))
    code, out, _ = run(capsys, "eval-is", tmp_path / "l.bin")
    assert code == 0 and 1.0 <= float(out.splitlines()[0]) <= 4.0
    code, out, _ = run(capsys, "eval-kl", tmp_path / "l.bin", tmp_path / "l.bin")
    assert code == 0 and float(out.splitlines()[0]) == 0.0
    assert json.loads(out.splitlines()[-1])["config"]["direction"] == "gt||gen"


def test_eval_onset_and_lag(tmp_path, capsys):
    from foleyflow.synthdata import render_latent, scene_from_seed
    cfg = preset("tiny")
    sc = scene_from_seed(4)
    z = render_latent(sc, cfg)
    write_tensor(tmp_path / "z.bin", z, fps=cfg.latent_fps)
    code, out, _ = run(capsys, "eval-onset", tmp_path / "z.bin", "--scene", 4)
    assert code == 0
    res = json.loads(out.splitlines()[-1])["results"]
    assert res["f1"] == 1.0
    events = ",".join(str(t) for t in sc.event_times)
    code, out, _ = run(capsys, "eval-onset", tmp_path / "z.bin", "--events", events)
    assert json.loads(out.splitlines()[-1])["results"]["f1"] == 1.0
    shifted = np.roll(z, 5, axis=0)
    write_tensor(tmp_path / "s.bin", shifted, fps=cfg.latent_fps)
    code, out, _ = run(capsys, "eval-lag", tmp_path / "s.bin", tmp_path / "z.bin")
    assert code == 0 and abs(float(out.splitlines()[0]) - 5 / 31.25) < 1e-9


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval-fd", "a"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", "x", "--bogus"])
    assert e.value.code == 2
    assert run(capsys, "eval-fd", tmp_path / "nope.bin", tmp_path / "nope.bin")[0] == 5
    (tmp_path / "junk.bin").write_bytes(b"hello\n")
    assert run(capsys, "eval-is", tmp_path / "junk.bin")[0] == 5
    write_tensor(tmp_path / "a.bin", np.zeros((5, 3)))
    write_tensor(tmp_path / "b.bin", np.zeros((5, 4)))
    assert run(capsys, "eval-fd", tmp_path / "a.bin", tmp_path / "b.bin")[0] == 3
    nan = np.zeros((5, 3))
    nan[0, 0] = np.nan
    (tmp_path / "cfg.txt").write_text("hidden_dim = wide\n")
    write_tensor(tmp_path / "m.jsonl", nan)
    assert run(capsys, "train", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "c",
               "--config", tmp_path / "cfg.txt")[0] == 3


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["sample", "--help"])
    out = capsys.readouterr().out
    assert "--cfg" in out and "default: 4.5" in out and "--threads" in out


def test_train_interrupt_and_resume(trained, capsys):
    from foleyflow.trainer import load_checkpoint
    common = ["--manifest", trained / "m.jsonl", "--steps", 4, "--warmup", 1, "--batch-size", 2]
    assert run(capsys, "train", *common, "--out", trained / "full.ckpt")[0] == 0
    assert run(capsys, "train", *common, "--out", trained / "part.ckpt", "--max-steps", 2)[0] == 0
    assert load_checkpoint(trained / "part.ckpt")["step"] == 2
    assert run(capsys, "train", "--manifest", trained / "m.jsonl", "--out", trained / "res.ckpt",
               "--resume", trained / "part.ckpt")[0] == 0
    full = load_checkpoint(trained / "full.ckpt")["tensors"]
    res = load_checkpoint(trained / "res.ckpt")["tensors"]
    assert full.keys() == res.keys()
    assert all(np.array_equal(full[k], res[k]) for k in full)
