import hashlib
import json
import shutil
from pathlib import Path

import pytest

from attriweight.cli import COMMANDS, main
from attriweight.config import section_keys

SMALL_INI = """\
[dataset]
per_class = 60
n_train = 100
n_weight = 30
n_eval = 20
corruption_seeds = 100,101
factors_a = 3
factors_b = 3
factor_per_cell_query = 4

[model]
hidden = 6
distractor_dim = 8
epochs = 5
factor_hidden = 8
factor_epochs = 5

[projection]
dim = 8

[weighting]
sweep_k = 1,5
sweep_lambda = 0,0.5
noise_scales = 0,1

[eval]
lds_subsets = 8
bootstrap_resamples = 100
random_draws = 50

[oracle]
n = 500
queries = 5
"""


@pytest.fixture(scope="module")
def small_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.ini"
    path.write_text(SMALL_INI)
    return path


def run_all(ini, outdir):
    return [main([cmd, "--config", str(ini), "--outdir", str(outdir)]) for cmd in COMMANDS]


def result_files(outdir):
    return {str(p.relative_to(outdir)): p.read_bytes() for p in sorted(Path(outdir).rglob("*")) if p.suffix in (".csv", ".json", ".tsv", ".ini")}


@pytest.fixture(scope="module")
def pipeline(small_ini, tmp_path_factory):
    outdir = tmp_path_factory.mktemp("run") / "a"
    codes = run_all(small_ini, outdir)
    return outdir, codes


def last_err(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


def test_every_command_succeeds(pipeline):
    _, codes = pipeline
    assert codes == [0] * len(COMMANDS)


def test_each_command_has_outputs_and_manifest(pipeline):
    outdir, _ = pipeline
    for cmd in COMMANDS:
        files = [p for p in (outdir / cmd).iterdir() if p.suffix in (".csv", ".json")]
        assert len(files) >= 2, cmd
        assert (outdir / cmd / "config.ini").exists()


def test_manifest_contents(pipeline, small_ini):
    outdir, _ = pipeline
    manifest = json.loads((outdir / "eval-lds" / "manifest.json").read_text())
    assert manifest["command"] == "eval-lds" and manifest["seed"] == 0
    assert set(manifest) == {"command", "version", "seed", "config_sha256", "inputs", "outputs"}
    assert "extract/train.gfst" in manifest["inputs"]
    for rel, digest in {**manifest["inputs"], **manifest["outputs"]}.items():
        assert hashlib.sha256((outdir / rel).read_bytes()).hexdigest() == digest


def test_rerun_is_byte_identical(pipeline, small_ini, tmp_path):
    outdir, _ = pipeline
    assert run_all(small_ini, tmp_path / "b") == [0] * len(COMMANDS)
    first, second = result_files(outdir), result_files(tmp_path / "b")
    assert first.keys() == second.keys()
    assert [k for k in first if first[k] != second[k]] == []


def test_seed_flag_changes_data(pipeline, small_ini, tmp_path):
    outdir, _ = pipeline
    assert main(["gen-data", "--config", str(small_ini), "--outdir", str(tmp_path), "--seed", "4"]) == 0
    assert json.loads((tmp_path / "gen-data" / "manifest.json").read_text())["seed"] == 4
    assert (tmp_path / "gen-data" / "dataset.csv").read_bytes() != (outdir / "gen-data" / "dataset.csv").read_bytes()


@pytest.mark.parametrize("cmd,tag", [
    ("train", "missing:dataset"),
    ("extract", "missing:dataset"),
    ("eval-lds", "missing:feature_store"),
    ("learn-weights", "missing:feature_store"),
])
def test_missing_prerequisites(cmd, tag, small_ini, tmp_path, capsys):
    assert main([cmd, "--config", str(small_ini), "--outdir", str(tmp_path)]) == 2
    assert last_err(capsys).startswith(tag)


def test_missing_weights(pipeline, small_ini, tmp_path, capsys):
    outdir, _ = pipeline
    for cmd in ("gen-data", "train", "extract"):
        shutil.copytree(outdir / cmd, tmp_path / cmd)
    assert main(["eval-lds", "--config", str(small_ini), "--outdir", str(tmp_path)]) == 2
    assert last_err(capsys).startswith("missing:weights")


def test_corrupt_checkpoint(pipeline, small_ini, tmp_path, capsys):
    outdir, _ = pipeline
    for cmd in ("gen-data", "train"):
        shutil.copytree(outdir / cmd, tmp_path / cmd)
    ckpt = tmp_path / "train" / "model.atwc"
    ckpt.write_bytes(ckpt.read_bytes()[:40])
    assert main(["extract", "--config", str(small_ini), "--outdir", str(tmp_path)]) == 2
    assert last_err(capsys).startswith("missing:corrupt_artifact")


def test_divergence_exit_code(pipeline, small_ini, tmp_path, capsys):
    outdir, _ = pipeline
    shutil.copytree(outdir / "gen-data", tmp_path / "gen-data")
    argv = ["train", "--config", str(small_ini), "--outdir", str(tmp_path), "--model.lr", "1e200", "--model.weight_decay", "1"]
    assert main(argv) == 3
    assert last_err(capsys).startswith("numerical:failure")


@pytest.mark.parametrize("extra", [
    ["--set", "model.nope=1"],
    ["--set", "model.hidden"],
    ["--model.hidden", "six"],
    ["--weighting.loss", "Hinge"],
    ["--config", "/nonexistent/run.ini"],
])
def test_config_errors(extra, tmp_path, capsys):
    assert main(["gen-data", "--outdir", str(tmp_path)] + extra) == 1
    assert last_err(capsys).startswith("config:")


def test_unknown_command(capsys):
    assert main(["frobnicate"]) == 1
    assert last_err(capsys).startswith("config:")


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval-lds", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for section, key, _, _ in section_keys():
        assert f"--{section}.{key}" in text
