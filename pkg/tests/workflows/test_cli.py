import json
from pathlib import Path
from typing import List, Tuple

import pytest

from avse_policy_tuner.cli import build_parser, cli, load_config
from avse_policy_tuner.experiment import ExperimentConfig, read_manifest


@pytest.fixture
def config_file(tmp_path: Path, small_experiment: ExperimentConfig) -> Path:
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_experiment.to_dict()))
    return path


def run_cli(capsys, argv: List[str]) -> Tuple[int, str, str]:
    with pytest.raises(SystemExit) as e:
        cli(argv)
    captured = capsys.readouterr()
    return e.value.code, captured.out, captured.err


def error_line(err: str) -> dict:
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_print_config(capsys, config_file: Path, tmp_path: Path) -> None:
    code, out, _ = run_cli(
        capsys, ["gen-scenes", "-c", str(config_file), "-s", "5", "-o", str(tmp_path / "x")]
    )
    assert code == 0
    printed = json.loads(out)
    assert printed["master_seed"] == 5
    assert printed["out_dir"] == str(tmp_path / "x")
    assert printed["scene_count"] == 5
    # --print-config on its own prints the defaults
    code, out, _ = run_cli(capsys, ["pretrain", "--print-config"])
    assert json.loads(out) == ExperimentConfig().to_dict()


def test_overrides(config_file: Path) -> None:
    args = build_parser().parse_args(
        ["finetune", "-c", str(config_file), "--reward", "mos_proxy", "--prompt", "detailed"]
    )
    cfg = load_config(args)
    assert cfg.reward == "mos_proxy"
    assert cfg.prompt == "detailed"
    assert cfg.scene_count == 5


def test_gen_scenes_and_score(capsys, config_file: Path, small_experiment: ExperimentConfig) -> None:
    code, out, err = run_cli(capsys, ["gen-scenes", "-c", str(config_file)])
    assert code == 0, err
    assert "Run Report" in out

    record = read_manifest(small_experiment.manifest_path)[0]
    clean = small_experiment.out_dir / record.paths["clean"]
    noisy = small_experiment.out_dir / record.paths["noisy"]
    code, out, _ = run_cli(
        capsys, ["score", "--ref", str(clean), "--est", str(noisy), "--noisy", str(noisy)]
    )
    assert code == 0
    scores = json.loads(out)
    assert {"si_snr_db", "stoi", "seg_snr_db", "sentiment", "description"} <= set(scores)

    # --json prints the same scores as one object on one line
    code, out, err = run_cli(capsys, ["score", "--ref", str(clean), "--est", str(noisy), "--json"])
    assert code == 0, err
    assert len(out.splitlines()) == 1
    compact = json.loads(out)
    assert isinstance(compact, dict)
    assert compact["si_snr_db"] == pytest.approx(scores["si_snr_db"])
    assert compact["stoi"] == pytest.approx(scores["stoi"])


@pytest.mark.parametrize(
    ["argv", "kind", "exit_code"],
    [
        pytest.param([], "invalid-argument", 2, id="No command"),
        pytest.param(["train"], "invalid-argument", 2, id="Unknown command"),
        pytest.param(["finetune", "--reward", "dnsmos"], "invalid-argument", 2, id="Bad choice"),
        pytest.param(["pretrain", "-s", "abc"], "invalid-argument", 2, id="Bad seed"),
        pytest.param(["score", "--est", "x.wav"], "invalid-argument", 2, id="Score without --ref"),
        pytest.param(
            ["evaluate", "--checkpoint", "noisy=x.json"], "invalid-argument", 2, id="Bad override"
        ),
    ],
)
def test_argument_errors(capsys, argv: List[str], kind: str, exit_code: int) -> None:
    code, out, err = run_cli(capsys, argv)
    assert code == exit_code
    assert out == ""
    line = error_line(err)
    assert line["error"] == kind
    assert line["exit_code"] == exit_code
    assert line["message"]


def test_command_errors(capsys, tmp_path: Path) -> None:
    # Missing manifest
    code, _, err = run_cli(capsys, ["pretrain", "-o", str(tmp_path / "empty")])
    assert code == 3
    assert error_line(err)["error"] == "io"

    # Unknown config key
    bad = tmp_path / "bad.json"
    bad.write_text('{"scenes": 3}')
    code, _, err = run_cli(capsys, ["gen-scenes", "-c", str(bad)])
    assert code == 2
    assert error_line(err)["error"] == "config"

    # Not a WAV file
    garbage = tmp_path / "garbage.wav"
    garbage.write_bytes(b"not audio")
    code, _, err = run_cli(capsys, ["score", "--ref", str(garbage), "--est", str(garbage)])
    assert code == 3
    assert error_line(err)["error"] == "format"


def test_unexpected_errors_are_internal(capsys, monkeypatch, tmp_path: Path) -> None:
    def broken_score(*args, **kwargs):
        raise RuntimeError("scorer exploded")

    monkeypatch.setattr("avse_policy_tuner.cli.cmd_score", broken_score)
    wav = tmp_path / "unused.wav"
    code, out, err = run_cli(capsys, ["score", "--ref", str(wav), "--est", str(wav)])
    assert code == 1
    assert out == ""
    line = error_line(err)
    assert line["error"] == "internal"
    assert line["exit_code"] == 1
    assert "RuntimeError" in line["message"]
    assert "scorer exploded" in line["message"]
