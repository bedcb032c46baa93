import json

import pytest
import yaml

from advpurify.cli import main
from advpurify.config import DEFAULTS, apply_master_seed, parse_config
from advpurify.errors import ConfigError
from advpurify.evaluation import read_report_csv


def test_defaults_from_empty_file(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    cfg = parse_config(path)
    assert cfg.values == DEFAULTS
    assert parse_config(None).values == DEFAULTS


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.yaml")


def test_file_values_applied(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("attack:\n  epsilon: 0.2\n  iterations: 5\n")
    cfg = parse_config(path)
    assert cfg["attack"]["epsilon"] == 0.2
    assert cfg["attack"]["iterations"] == 5
    assert cfg["dataset"]["name"] == "mnist-like"


def test_flag_overrides_beat_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("attack:\n  epsilon: 0.2\n")
    cfg = parse_config(path, {"attack.epsilon": "0.25"})
    assert cfg["attack"]["epsilon"] == 0.25


def test_unknown_key_named_in_error(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("attack:\n  epsilonn: 0.2\n")
    with pytest.raises(ConfigError, match="attack.epsilonn"):
        parse_config(path)
    with pytest.raises(ConfigError, match="atack"):
        parse_config(None, {"atack.epsilon": "0.2"})


def test_type_coercion_and_validation():
    cfg = parse_config(None, {"attack.random_init": "false", "diffusion.epochs": "3"})
    assert cfg["attack"]["random_init"] is False
    assert cfg["diffusion"]["epochs"] == 3
    with pytest.raises(ConfigError):
        parse_config(None, {"diffusion.epochs": "3.5"})
    with pytest.raises(ConfigError):
        parse_config(None, {"attack.epsilon": "0.9"})
    with pytest.raises(ConfigError):
        parse_config(None, {"diffusion.t_star": "700"})


def test_config_hash_stable():
    assert parse_config(None).hash() == parse_config(None).hash()
    assert parse_config(None).hash() != parse_config(None, {"attack.epsilon": "0.2"}).hash()


def test_master_seed_derivation():
    base = parse_config(None)
    one = apply_master_seed(base, 123)
    two = apply_master_seed(base, 123)
    other = apply_master_seed(base, 124)
    assert one.values == two.values
    assert one.values != other.values
    assert one["dataset"]["seed"] != one["attack"]["seed"]


def test_env_var_overrides_cache_root(tmp_path, monkeypatch, capsys):
    from advpurify.cli import _load_config, build_parser

    monkeypatch.setenv("ADVPURIFY_DATA_ROOT", str(tmp_path / "env-root"))
    args = build_parser().parse_args(["report", "--results", "x"])
    assert _load_config(args)["dataset"]["root"] == str(tmp_path / "env-root")
    # explicit --set wins over the environment
    args = build_parser().parse_args(
        ["--set", f"dataset.root={tmp_path / 'flag-root'}", "report", "--results", "x"]
    )
    assert _load_config(args)["dataset"]["root"] == str(tmp_path / "flag-root")


@pytest.fixture(scope="module")
def shared_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cli-cache")


@pytest.fixture(scope="module")
def tiny_config(shared_cache, tmp_path_factory):
    """A config small enough for CLI integration tests."""
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump({
        "dataset": {"root": str(shared_cache)},
        "classifier_a": {"epochs": 1},
        "classifier_b": {"epochs": 1},
        "attack": {"iterations": 3},
        "diffusion": {"timesteps": 50, "epochs": 1, "t_star": 5},
        "eval": {"subset_size": 32, "triptych_grid": 2},
    }))
    return path


def test_cli_train_classifier(tiny_config, tmp_path, capsys):
    out = tmp_path / "a.ckpt"
    code = main(["--config", str(tiny_config), "train-classifier", "--role", "a",
                 "--out", str(out)])
    assert code == 0
    assert out.exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert "a.ckpt" in manifest["artifacts"]
    assert "test_accuracy" in capsys.readouterr().out


def test_cli_attack_and_purify(tiny_config, tmp_path, capsys):
    a_ckpt = tmp_path / "a.ckpt"
    den_ckpt = tmp_path / "den.ckpt"
    assert main(["--config", str(tiny_config), "train-classifier", "--role", "a",
                 "--out", str(a_ckpt)]) == 0
    assert main(["--config", str(tiny_config), "train-diffusion",
                 "--out", str(den_ckpt)]) == 0

    adv_path = tmp_path / "adv.bin"
    assert main(["--config", str(tiny_config), "attack", "--target", str(a_ckpt),
                 "--mode", "white", "--out", str(adv_path)]) == 0
    assert adv_path.exists()

    # dedicated attack flags override the config
    adv2_path = tmp_path / "adv2.bin"
    assert main(["--config", str(tiny_config), "attack", "--target", str(a_ckpt),
                 "--mode", "white", "--kind", "fgsm", "--epsilon", "0.12",
                 "--out", str(adv2_path)]) == 0
    from advpurify.attacks import load_adversarial_batch

    adv2 = load_adversarial_batch(adv2_path)
    assert adv2.config.kind == "fgsm"
    assert adv2.config.epsilon == 0.12

    pur_path = tmp_path / "pur.bin"
    assert main(["--config", str(tiny_config), "purify", "--denoiser", str(den_ckpt),
                 "--input", str(adv_path), "--out", str(pur_path)]) == 0
    assert pur_path.exists()
    sidecar = json.loads((tmp_path / "pur.bin.provenance.json").read_text())
    assert sidecar["t_star"] == 5
    assert "denoiser_checkpoint_sha256" in sidecar

    png = tmp_path / "samples.png"
    assert main(["--config", str(tiny_config), "sample", "--denoiser", str(den_ckpt),
                 "--num", "4", "--out", str(png)]) == 0
    assert png.exists()
    capsys.readouterr()


def test_cli_missing_checkpoint_exit_code(tiny_config, tmp_path, capsys):
    code = main(["--config", str(tiny_config), "evaluate",
                 "--target", str(tmp_path / "missing.ckpt"),
                 "--surrogate", str(tmp_path / "missing2.ckpt"),
                 "--denoiser", str(tmp_path / "missing3.ckpt")])
    assert code == 6
    err = capsys.readouterr().err
    assert err.startswith("ERROR[6] missing-checkpoint:")
    assert "\n" not in err.strip()


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("attack:\n  epsilomm: 1\n")
    code = main(["--config", str(bad), "train-classifier", "--role", "a",
                 "--out", str(tmp_path / "x.ckpt")])
    assert code == 3
    assert capsys.readouterr().err.startswith("ERROR[3] config:")


def test_cli_reproduce_and_report(tiny_config, tmp_path, capsys):
    out_dir = tmp_path / "results"
    code = main(["--config", str(tiny_config), "reproduce", "--out", str(out_dir)])
    assert code == 0

    rows = read_report_csv(out_dir / "report.csv")
    assert len(rows) == 8
    for name in ("classifier_a.ckpt", "classifier_b.ckpt", "denoiser.ckpt",
                 "manifest.json", "report.txt"):
        assert (out_dir / name).exists(), name
    for kind in ("pgd", "fgsm"):
        for mode in ("white", "black"):
            assert (out_dir / f"{kind}-{mode}-triptych.png").exists()

    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["config_hash"]
    assert "report.csv" in manifest["artifacts"]
    capsys.readouterr()

    assert main(["report", "--results", str(out_dir / "report.csv")]) == 0
    table = capsys.readouterr().out
    assert "attack" in table and "pgd" in table and "fgsm" in table
