import json
import shutil

import pytest

from conftest import run_cli
from latent_purify import archive, attacks, cli
from latent_purify.cli import ExperimentConfig
from latent_purify.purifier import ConfigError


@pytest.fixture
def trained(workspace, tmp_path):
    """A private copy of the session's data and models."""
    out = tmp_path / "run"
    for sub in ("data", "models"):
        shutil.copytree(workspace / sub, out / sub)
    return out


def write_config(path, **fields):
    path.write_text(json.dumps(fields))
    return str(path)


def test_gen_data_is_reproducible(tmp_path):
    cfg = write_config(tmp_path / "c.json", split_sizes=[40, 8, 8], eval_samples=8, bo_samples=8, codeswap_samples=8)
    for d in ("a", "b"):
        assert run_cli("gen-data", "--config", cfg, "--output-dir", str(tmp_path / d)) == 0
    for name in ("train", "val", "test"):
        a = (tmp_path / "a" / "data" / f"{name}.lpds").read_bytes()
        b = (tmp_path / "b" / "data" / f"{name}.lpds").read_bytes()
        assert archive.stored_crc(a) == archive.stored_crc(b)
        assert a == b


def test_report_without_artifacts(tmp_path, capsys):
    assert run_cli("report", "--output-dir", str(tmp_path)) == 2
    assert "no artifacts found" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path):
    assert run_cli("train-vae", "--output-dir", str(tmp_path)) == 2
    assert run_cli("gen-data", "--config", str(tmp_path / "absent.json")) == 2


def test_invalid_config_exit_3(tmp_path, capsys):
    assert run_cli("gen-data", "--config", write_config(tmp_path / "a.json", colour="red")) == 3
    assert "colour" in capsys.readouterr().err
    assert run_cli("gen-data", "--config", write_config(tmp_path / "b.json", alpha_max=1.5)) == 3
    (tmp_path / "c.json").write_text("{not json")
    assert run_cli("gen-data", "--config", str(tmp_path / "c.json")) == 3


def test_schedule_length_is_checked_before_attacking(trained, tmp_path):
    (tmp_path / "s.json").write_text("[0.1, 0.2]")
    cfg = write_config(tmp_path / "c.json", schedule=str(tmp_path / "s.json"), eval_samples=4)
    assert run_cli("attack", "--attack", "fgsm", "--defense", "purify", "--config", cfg, "--output-dir", str(trained)) == 3


def test_corrupted_checkpoint_exit_4(trained):
    path = trained / "models" / "classifier.mlvc"
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    assert run_cli("attack", "--attack", "fgsm", "--output-dir", str(trained)) == 4


def test_attack_artifacts_carry_provenance(trained, tmp_path):
    cfg_path = write_config(tmp_path / "c.json", eval_samples=8)
    assert run_cli("attack", "--attack", "fgsm", "--config", cfg_path, "--output-dir", str(trained)) == 0
    manifest, records = attacks.load_records(trained / "attacks" / "fgsm_none_eot1.advr")
    cfg = cli.load_config(cfg_path, str(trained))
    assert manifest["meta"] == {"config_hash": cfg.config_hash, "version": cli.VERSION}
    assert set(manifest["models"]) == {"mlvgm", "classifier"}
    assert len(records) == 8
    csv = (trained / "attacks" / "fgsm_none_eot1.csv").read_text()
    assert csv == attacks.records_to_csv(records)


def test_report_refuses_mixed_configs(trained, tmp_path):
    a = write_config(tmp_path / "a.json", eval_samples=8)
    b = write_config(tmp_path / "b.json", eval_samples=8, fgsm_epsilon=0.05)
    assert run_cli("attack", "--attack", "fgsm", "--config", a, "--output-dir", str(trained)) == 0
    assert run_cli("attack", "--attack", "deepfool", "--eot", "1", "--config", b, "--output-dir", str(trained)) == 0
    assert run_cli("report", "--config", a, "--output-dir", str(trained)) == 3
    assert run_cli("report", "--config", a, "--output-dir", str(trained), "--force") == 0
    rows = (trained / "report" / "summary.csv").read_text().splitlines()
    assert rows[0] == "attack,defense,label,eps,sr" and len(rows) == 1 + 2 * 25
    assert (trained / "report" / "sr_fgsm.svg").exists() and (trained / "report" / "sr_deepfool.svg").exists()


def test_config_round_trip_and_hash():
    cfg = ExperimentConfig()
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.config_hash == cfg.config_hash
    moved = ExperimentConfig.from_dict({**cfg.to_dict(), "output_dir": "elsewhere"})
    assert moved.config_hash == cfg.config_hash
    assert ExperimentConfig.from_dict({"seed": 1}).config_hash != cfg.config_hash


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("LATENT_PURIFY_THREADS", raising=False)
    assert cli.resolve_threads(None) == 1
    monkeypatch.setenv("LATENT_PURIFY_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.setenv("LATENT_PURIFY_THREADS", "many")
    with pytest.raises(ConfigError):
        cli.resolve_threads(None)
    with pytest.raises(ConfigError):
        cli.resolve_threads(0)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli("--version")
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == cli.VERSION
