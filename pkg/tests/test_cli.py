import csv

import numpy as np
import pytest

from pnphvae import serialization
from pnphvae.cli import main
from pnphvae.config import read_kv
from pnphvae.netpbm import read_image, write_image
from pnphvae.toy_hvae import ToyHvaeParams, generate_dataset


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    params = ToyHvaeParams.init([4, 8], 8, 16, 0)
    serialization.save(d / "toy.params", params.to_param_file())
    img = np.block([[p for p in generate_dataset(4, 8, 1).patches[i:i + 2]] for i in (0, 2)])
    write_image(d / "clean.pgm", img)
    return d


def _trace_without_time(path):
    with open(path) as fh:
        return [row[:-1] for row in csv.reader(fh)]


def test_unknown_task_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as info:
        main(["paint"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_override_reports_error(files, capsys):
    assert main(["deblur", "--bogus", "1", "--output", str(files / "x")]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_missing_model_reports_error(files, capsys):
    assert main(["deblur", "--input", str(files / "clean.pgm"), "--output", str(files / "x")]) == 1
    assert "needs a model" in capsys.readouterr().err


def test_noiseless_denoise_keeps_input(files):
    out = files / "den"
    assert main(["denoise", "--input", str(files / "clean.pgm"), "--model", str(files / "toy.params"),
                 "--sigma", "0", "--tau", "1", "--output", str(out)]) == 0
    m = read_kv(out / "metrics.txt")
    assert float(m["psnr"]) >= float(m["psnr_observed"]) - 0.01


def test_deblur_outputs_and_manifest_rerun(files):
    out = files / "run1"
    args = ["deblur", "--input", str(files / "clean.pgm"), "--model", str(files / "toy.params"),
            "--sigma", "2.55", "--seed", "4", "--max-iter=15", "--output", str(out)]
    assert main(args) == 0
    for name in ("restored.pgm", "observation.pgm", "trace.csv", "convergence.png", "metrics.txt", "manifest.txt"):
        assert (out / name).exists(), name
    assert read_image(out / "restored.pgm").shape == (16, 16, 1)
    rerun = files / "run2"
    assert main(["deblur", "--config", str(out / "manifest.txt"), "--output", str(rerun)]) == 0
    assert (out / "restored.pgm").read_bytes() == (rerun / "restored.pgm").read_bytes()
    assert _trace_without_time(out / "trace.csv") == _trace_without_time(rerun / "trace.csv")


@pytest.mark.parametrize("task,extra", [("inpaint", ["--max-iter", "10"]), ("sr", ["--sr-factor", "2"])])
def test_other_restorations_run(files, task, extra):
    out = files / task
    assert main([task, "--input", str(files / "clean.pgm"), "--model", str(files / "toy.params"),
                 "--output", str(out), *extra]) == 0
    assert "psnr" in read_kv(out / "metrics.txt")


def test_oracle_model_lipschitz(files):
    out = files / "lip"
    assert main(["lipschitz", "--model", "oracle:3:2,4:12", "--n-pairs", "50", "--n-images", "20",
                 "--tau", "0.6,0.8", "--output", str(out)]) == 0
    assert (out / "lipschitz.png").exists()
    m = read_kv(out / "metrics.txt")
    assert set(m) == {"frac_below_1_tau0.6", "max_tau0.6", "frac_below_1_tau0.8", "max_tau0.8"}


def test_train_toy_small(files):
    out = files / "train"
    assert main(["train-toy", "--n-patches", "32", "--epochs", "1", "--width", "8", "--dims", "2,3",
                 "--output", str(out)]) == 0
    pf = serialization.load(out / "model.params")
    assert pf.kind == "toy_hvae" and pf.meta["epochs"] == "1"
    assert (out / "loss.png").exists()


def test_oracle_check_task(files):
    out = files / "oracle"
    assert main(["oracle-check", "--output", str(out)]) == 0
    lines = (out / "oracle_check.txt").read_text().splitlines()
    assert lines and all(ln.startswith("PASS") for ln in lines)
