import json

import numpy as np
import pytest

from modese import cli
from modese.dsp import Waveform
from modese.mode import load_model, read_model_meta
from modese.wavio import read_wav, write_wav

TINY = """\
model: {m: 3, hidden: [16], context: 1}
train: {epochs: 1, joint_epochs: 1, batch_size: 64}
pretrain: {hidden: [32], embedding_dim: 4, epochs: 2, restarts: 2, max_iters: 20}
data: {test_snr_db: [0]}
"""


def run(base, *argv):
    return cli.main([argv[0], "--base-dir", str(base), "--config", str(base / "tiny.yaml"), *argv[1:]])


def make_base(path):
    path.mkdir(parents=True, exist_ok=True)
    (path / "tiny.yaml").write_text(TINY)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = make_base(tmp_path_factory.mktemp("run"))
    codes = {}
    codes["synth"] = run(base, "synth", "--num-utts", "6", "--duration", "1.0")
    codes["prepare"] = run(base, "prepare")
    codes["pretrain"] = run(base, "pretrain")
    codes["train"] = run(base, "train")
    codes["evaluate"] = run(base, "evaluate", "--ones")
    return base, codes


def test_pipeline_exit_codes(pipeline):
    _, codes = pipeline
    assert codes == {k: 0 for k in codes}


def test_artifacts(pipeline):
    base, _ = pipeline
    feats = base / "corpora/synth/features"
    models = base / "models/default"
    reports = base / "reports/default"
    for p in [feats / "train.ds", feats / "val.ds", feats / "test.ds", models / "pretrained.mode",
              models / "pretrain.art", models / "model.mode", models / "model_training.png",
              reports / "metrics.csv", reports / "gate_probs.csv", reports / "report.txt",
              reports / "expert_activity.png", reports / "si_sdr_vs_snr.png"]:
        assert p.exists(), p
    assert read_model_meta(models / "model.mode")["extra"]["stage"] == "joint-pretrained"
    assert load_model(models / "model.mode").m == 3
    header = (reports / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("utt,clean_id,noise_type,snr_db,method")


def test_manifest(pipeline):
    base, _ = pipeline
    man = json.loads((base / "models/default/run_train.json").read_text())
    assert set(man) >= {"command", "config_hash", "seed", "versions", "outputs", "results"}
    assert man["seed"] == 0 and "numpy" in man["versions"]
    assert man["results"]["init"] == "pretrained"
    assert man["results"]["lr"] == pytest.approx(1e-4)  # joint stage runs at lr/10 after pretraining
    assert len(man["outputs"]["model.mode"]) == 64


def test_bit_identical_rerun(pipeline, tmp_path):
    base, _ = pipeline
    other = make_base(tmp_path / "again")
    assert run(other, "synth", "--num-utts", "6", "--duration", "1.0") == 0
    assert run(other, "prepare") == 0
    assert run(other, "pretrain") == 0
    for rel in ["corpora/synth/features/train.ds", "corpora/synth/features/test.ds",
                "models/default/pretrained.mode", "models/default/pretrain.art"]:
        assert (other / rel).read_bytes() == (base / rel).read_bytes(), rel


def test_evaluate_without_model(pipeline, tmp_path, capsys):
    base, _ = pipeline
    missing = tmp_path / "absent.mode"
    code = run(base, "evaluate", "--model", str(missing), "--out", str(tmp_path / "rep"))
    assert code == cli.EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_enhance_all_pass_is_identity(pipeline, tmp_path):
    base, _ = pipeline
    src = sorted((base / "corpora/synth/clean").glob("*.wav"))[0]
    out = tmp_path / "out.wav"
    assert run(base, "enhance", str(src), str(out), "--mask", "ones") == 0
    a, b = read_wav(src).samples, read_wav(out).samples
    assert a.shape == b.shape and np.max(np.abs(a - b)) <= 1e-6


def test_enhance_with_model(pipeline, tmp_path):
    base, _ = pipeline
    noisy = Waveform(0.1 * np.random.default_rng(0).standard_normal(8000), 16000)
    write_wav(tmp_path / "n.wav", noisy)
    for strategy in ("full", "top1"):
        out = tmp_path / f"{strategy}.wav"
        assert run(base, "enhance", str(tmp_path / "n.wav"), str(out), "--model", "models/default/model.mode",
                   "--strategy", strategy) == 0
        assert len(read_wav(out)) == len(noisy)


def test_enhance_needs_model(pipeline, tmp_path):
    base, _ = pipeline
    src = sorted((base / "corpora/synth/clean").glob("*.wav"))[0]
    assert run(base, "enhance", str(src), str(tmp_path / "o.wav")) == cli.EXIT_USAGE


def test_config_mismatch_refused(pipeline, capsys):
    base, _ = pipeline
    assert run(base, "train", "--set", "model.context=2") == cli.EXIT_DATA
    assert "rerun 'modese prepare'" in capsys.readouterr().err


def test_model_feature_mismatch_refused(pipeline, tmp_path, capsys):
    base, _ = pipeline
    other = make_base(tmp_path / "b")
    # features prepared with context 2 against a model built for context 1
    assert run(other, "synth", "--num-utts", "4", "--duration", "1.0") == 0
    assert run(other, "prepare", "--set", "model.context=2") == 0
    code = run(other, "evaluate", "--model", str(base / "models/default/model.mode"), "--set", "model.context=2",
               "--out", str(tmp_path / "r"))
    assert code == cli.EXIT_DATA
    assert "do not match" in capsys.readouterr().err


def test_corrupt_model(pipeline, tmp_path, capsys):
    base, _ = pipeline
    bad = tmp_path / "bad.mode"
    bad.write_bytes((base / "models/default/model.mode").read_bytes()[:-10])
    assert run(base, "evaluate", "--model", str(bad), "--out", str(tmp_path / "r")) == cli.EXIT_DATA
    assert "corrupt" in capsys.readouterr().err


def test_train_requires_pretrain(tmp_path, capsys, pipeline):
    base, _ = pipeline
    code = run(base, "train", "--model-dir", str(tmp_path / "fresh"))
    assert code == cli.EXIT_DATA
    assert "--random-init" in capsys.readouterr().err


def test_random_init_training(pipeline, tmp_path):
    base, _ = pipeline
    out = tmp_path / "rand"
    assert run(base, "train", "--random-init", "--model-dir", str(out)) == 0
    man = json.loads((out / "run_train_random.json").read_text())
    assert man["results"]["init"] == "random" and man["results"]["lr"] == pytest.approx(1e-3)


def test_lock_held(pipeline, tmp_path, capsys):
    from filelock import FileLock

    base, _ = pipeline
    out = tmp_path / "locked"
    out.mkdir()
    with FileLock(str(out / ".modese.lock")):
        code = run(base, "pretrain", "--model-dir", str(out))
    assert code == cli.EXIT_DATA
    assert "locked" in capsys.readouterr().err


def test_env_base_dir(pipeline, monkeypatch, tmp_path):
    base, _ = pipeline
    monkeypatch.setenv(cli.ENV_HOME, str(base))
    out = tmp_path / "o.wav"
    src = "corpora/synth/clean/synth_0000.wav"
    assert cli.main(["enhance", src, str(out), "--mask", "ones"]) == 0
    assert out.exists()


def test_usage_errors():
    assert cli.main(["no-such-command"]) == cli.EXIT_USAGE
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["synth", "--num-utts", "many"]) == cli.EXIT_USAGE


def test_help_exits_zero(capsys):
    assert cli.main(["train", "--help"]) == 0
    assert "--random-init" in capsys.readouterr().out


def test_bad_config_value(tmp_path, capsys):
    assert cli.main(["synth", "--base-dir", str(tmp_path), "--set", "model.m=0"]) == cli.EXIT_DATA
    assert "model.m" in capsys.readouterr().err


def test_internal_error(monkeypatch, tmp_path):
    def boom(args, cfg):
        raise RuntimeError("unexpected")

    parser = cli.build_parser()
    monkeypatch.setattr(cli, "build_parser", lambda: parser)
    parser._subparsers._group_actions[0].choices["synth"].set_defaults(func=boom)
    assert cli.main(["synth", "--base-dir", str(tmp_path)]) == cli.EXIT_INTERNAL
