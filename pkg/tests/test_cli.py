import csv
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from hdcblur.cli import main, stretch_residual
from hdcblur.convolution import gaussian_kernel
from hdcblur.distortion import DistortionParams, render_chessboard
from hdcblur.forward import ForwardModel, apply, load_model, save_model
from hdcblur.image import Boundary, encode_pgm, load_image, psnr, save_image


@pytest.fixture
def identity_model(tmp_path):
    path = tmp_path / "identity.fmd"
    save_model(ForwardModel(noise_variance=0.001), path)
    return path


def _pairs_dir(tmp_path, model, count=6, size=24, calib=False):
    d = tmp_path / "pairs"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(count):
        x = 0.1 + 0.8 * rng.random((size, size))
        save_image(x, d / f"p{i}_sharp.pgm", bits=16)
        save_image(apply(model, load_image(d / f"p{i}_sharp.pgm")), d / f"p{i}_blurry.pgm", bits=16)
    if calib:
        save_image(np.zeros((size, size)), d / "calib_sharp.pgm", bits=16)
        save_image(np.zeros((size, size)), d / "calib_blurry.pgm", bits=16)
    return d


def test_estimate_recovers_kernel(tmp_path, capsys):
    truth = gaussian_kernel(3, 0.8)
    d = _pairs_dir(tmp_path, ForwardModel(kernel=truth, boundary=Boundary.PERIODIC), calib=True)
    out = tmp_path / "m.fmd"
    args = ["--seed", "3", "estimate", str(d), str(out), "--kernel-side", "3", "--q", "0",
            "--iterations", "400", "--lr", "0.01", "--final-lr-fraction", "0.01",
            "--boundary", "periodic", "--level", "2", "--require-background"]
    assert main(args) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("final_loss=")
    model = load_model(out)
    assert model.level == 2 and model.sharp_background is not None
    assert np.linalg.norm(model.kernel - truth) / np.linalg.norm(truth) < 0.05
    with open(tmp_path / "m.loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "loss"] and len(rows) == 401
    assert float(printed.split("=")[1]) == float(rows[-1][1])
    first = out.read_bytes()
    assert main(args) == 0 and out.read_bytes() == first


def test_estimate_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["estimate", str(tmp_path / "empty"), str(tmp_path / "m.fmd")]) == 1
    d = _pairs_dir(tmp_path, ForwardModel())
    assert main(["estimate", str(d), str(tmp_path / "m.fmd"), "--require-background",
                 "--kernel-side", "3", "--iterations", "1"]) == 2
    (d / "lonely_sharp.pgm").write_bytes(encode_pgm(np.zeros((24, 24))))
    assert main(["estimate", str(d), str(tmp_path / "m.fmd"), "--kernel-side", "3"]) == 2


def test_simulate(tmp_path, identity_model):
    src = tmp_path / "in.pgm"
    save_image(render_chessboard(40, 60), src)
    assert main(["simulate", str(identity_model), str(src), str(tmp_path / "out.pgm")]) == 0
    assert np.max(np.abs(load_image(tmp_path / "out.pgm") - load_image(src))) <= 0.5 / 65535 + 1e-12

    model = ForwardModel(kernel=gaussian_kernel(5, 1.0), distortion=DistortionParams((0.05, -0.01)))
    save_model(model, tmp_path / "k.fmd")
    assert main(["simulate", str(tmp_path / "k.fmd"), str(src), str(tmp_path / "b.pgm")]) == 0
    expected = encode_pgm(apply(load_model(tmp_path / "k.fmd"), load_image(src)), bits=16)
    assert (tmp_path / "b.pgm").read_bytes() == expected

    runs = []
    for name in ("n1.pgm", "n2.pgm"):
        assert main(["--seed", "5", "simulate", str(identity_model), str(src), str(tmp_path / name),
                     "--noise"]) == 0
        runs.append((tmp_path / name).read_bytes())
    assert runs[0] == runs[1] and runs[0] != (tmp_path / "out.pgm").read_bytes()


def test_simulate_dimension_mismatch(tmp_path):
    save_model(ForwardModel(blurred_background=np.zeros((8, 8))), tmp_path / "bg.fmd")
    save_image(np.zeros((5, 5)), tmp_path / "in.pgm")
    assert main(["simulate", str(tmp_path / "bg.fmd"), str(tmp_path / "in.pgm"), str(tmp_path / "o.pgm")]) == 2
    assert main(["simulate", str(tmp_path / "nope.fmd"), str(tmp_path / "in.pgm"), str(tmp_path / "o.pgm")]) == 2


def _manifest(root):
    with open(root / "manifest.csv") as fh:
        return list(csv.DictReader(fh))


def test_synth(tmp_path, identity_model):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    save_image(np.random.default_rng(1).random((30, 30)), corpus / "c.pgm")
    base = ["synth", str(identity_model), "--dims", "24x48", "--corpus", str(corpus),
            "--glyph-height", "7", "--level", "1"]
    assert main(["--seed", "9"] + base[:2] + [str(tmp_path / "a")] + base[2:]) == 0
    rows = _manifest(tmp_path / "a" / "level_1")
    assert len(rows) == 21 and sum(r["category"] == "SynthHDC" for r in rows) == 20
    assert main(["--seed", "9"] + base[:2] + [str(tmp_path / "b")] + base[2:]) == 0
    for p in sorted((tmp_path / "a" / "level_1").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "level_1" / p.name).read_bytes()
    assert main(base[:2] + [str(tmp_path / "c")] + base[2:] + ["--hdc", "0", "--sanity", "0"]) == 0
    assert _manifest(tmp_path / "c" / "level_1") == []
    assert main(["synth", str(identity_model), str(tmp_path / "d")]) == 1
    assert main(["synth", str(identity_model), str(tmp_path / "d"), "--dims", "8x8"]) == 1


def _registry(tmp_path, model, recon="tikhonov:0", level=0):
    save_model(model, tmp_path / f"level{level}.fmd")
    reg = tmp_path / "registry.txt"
    reg.write_text(f"level={level} model=level{level}.fmd recon={recon}\n")
    return reg


def test_deblur(tmp_path, capsys):
    reg = _registry(tmp_path, ForwardModel())
    src = tmp_path / "in.pgm"
    x = np.random.default_rng(2).random((32, 32))
    save_image(x, src, bits=16)
    assert main(["deblur", str(reg), str(src), "0", str(tmp_path / "out.pgm")]) == 0
    assert np.max(np.abs(load_image(tmp_path / "out.pgm") - load_image(src))) <= 1e-9

    k = gaussian_kernel(3, 0.6)
    reg = _registry(tmp_path, ForwardModel(kernel=k, boundary=Boundary.PERIODIC, level=4),
                    recon="tikhonov:1e-9", level=4)
    save_image(apply(ForwardModel(kernel=k, boundary=Boundary.PERIODIC), x), src, bits=16)
    assert main(["deblur", str(reg), str(src), "4", str(tmp_path / "out.pgm")]) == 0
    assert psnr(load_image(tmp_path / "out.pgm"), x) > 30

    capsys.readouterr()
    assert main(["deblur", str(reg), str(src), "7", str(tmp_path / "out.pgm")]) == 2
    assert "known levels: [4]" in capsys.readouterr().err


STUB = textwrap.dedent("""
    import pathlib, sys
    import numpy as np
    from hdcblur.image import load_image
    query = load_image(sys.argv[1])
    best = min(pathlib.Path(sys.argv[2]).glob("*_blurry.pgm"),
               key=lambda p: np.abs(load_image(p) - query).sum())
    print(best.with_name(best.name.replace("_blurry.pgm", ".txt")).read_text())
""")


@pytest.fixture
def scoring_set(tmp_path, identity_model):
    assert main(["synth", str(identity_model), str(tmp_path / "data"), "--dims", "24x64",
                 "--glyph-height", "7", "--hdc", "4", "--sanity", "0", "--level", "0"]) == 0
    stub = tmp_path / "stub.py"
    stub.write_text(STUB)
    return tmp_path / "data", _registry(tmp_path, ForwardModel()), stub


def test_score_with_stubs(scoring_set, tmp_path, capsys, monkeypatch):
    data, reg, stub = scoring_set
    level_dir = data / "level_0"
    cmd = f"{sys.executable} {stub} {{in}} {level_dir}"
    out_csv = tmp_path / "score.csv"
    assert main(["score", str(data), str(reg), "0", "--ocr-cmd", cmd, "--out", str(out_csv)]) == 0
    summary = capsys.readouterr().out.strip()
    assert summary == "mean=100.0000 cleared=1"
    with open(out_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all("\n" in r["gt"] for r in rows)

    empty = f"{sys.executable} -c pass"
    monkeypatch.setenv("HDCBLUR_OCR_CMD", empty)
    assert main(["score", str(level_dir), str(reg), "0", "--out", str(out_csv)]) == 0
    summary = capsys.readouterr().out.strip()
    with open(out_csv, newline="") as fh:
        scores = [float(r["score"]) for r in csv.DictReader(fh)]
    assert summary == f"mean={np.mean(scores):.4f} cleared=0" == "mean=0.0000 cleared=0"


def test_score_without_recognizer(scoring_set, monkeypatch):
    data, reg, _ = scoring_set
    monkeypatch.delenv("HDCBLUR_OCR_CMD", raising=False)
    assert main(["score", str(data), str(reg), "0"]) == 1


def test_diag(tmp_path, capsys):
    save_model(ForwardModel(), tmp_path / "zero.fmd")
    assert main(["diag", str(tmp_path / "zero.fmd"), str(tmp_path / "d0"), "--size", "70x110"]) == 0
    assert np.array_equal(load_image(tmp_path / "d0" / "chess_distorted.pgm"), render_chessboard(70, 110))
    assert not (tmp_path / "d0" / "residual.pgm").exists()

    model = ForwardModel(kernel=gaussian_kernel(3, 0.7), distortion=DistortionParams((0.3, 0.1)))
    save_model(model, tmp_path / "strong.fmd")
    x = render_chessboard(64, 64)
    save_image(x, tmp_path / "s.pgm", bits=16)
    save_image(apply(load_model(tmp_path / "strong.fmd"), load_image(tmp_path / "s.pgm")),
               tmp_path / "b.pgm", bits=16)
    assert main(["diag", str(tmp_path / "strong.fmd"), str(tmp_path / "d1"),
                 "--pair", str(tmp_path / "s.pgm"), str(tmp_path / "b.pgm")]) == 0
    assert "residual_rmse=" in capsys.readouterr().out
    undone = load_image(tmp_path / "d1" / "chess_undistorted.pgm")
    assert undone.shape == (256, 256) and not np.array_equal(undone, render_chessboard(256, 256))
    residual = load_image(tmp_path / "d1" / "residual.pgm")
    assert residual.shape == (64, 64) and np.max(np.abs(residual - 0.5)) <= 5e-3


def test_stretch_residual():
    assert np.all(stretch_residual(np.zeros((3, 3))) == 0.5)
    r = np.array([[-2.0, 0.0, 1.0]])
    assert stretch_residual(r).tolist() == [[0.0, 0.5, 0.75]]
    assert np.allclose(stretch_residual(np.array([[1e-5, -1e-5]])), 0.5, atol=2e-3)


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        main(["estimate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["--threads", "0", "diag", "m", "o"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hdcblur", "deblur", str(tmp_path / "missing.txt"),
                           "x.pgm", "0", "y.pgm"], capture_output=True, text=True)
    assert proc.returncode == 2 and "hdcblur:" in proc.stderr
