import inspect
import shutil

import numpy as np
import pytest

from far import cli, io, solver, subspace, synth


@pytest.fixture(scope="module")
def instance_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.run(["synth", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_parser_defaults_match_solver_config():
    args = cli.build_parser().parse_args(["fit", "--image", "a", "--init", "b", "--basis", "c", "--out", "d"])
    assert cli.solver_config(args) == solver.SolverConfig()
    sig = inspect.signature(solver.SolverConfig)
    for name, param in sig.parameters.items():
        assert getattr(args, name) == param.default


def test_frame_flag_is_width_by_height():
    args = cli.build_parser().parse_args(["synth", "--out", "x", "--frame", "185x193"])
    assert args.frame == (193, 185)


class TestSynthFitRoundTrip:
    def test_emitted_files(self, instance_dir):
        names = sorted(p.name for p in instance_dir.iterdir())
        assert names == ["basis.farb", "basis.farb.shape.json", "clean.pgm", "gt.json", "gt.pts", "image.pgm", "init.pts"]
        # closure: every file parses with its reader
        basis = subspace.load_basis(instance_dir / "basis.farb")
        model, tri = io.load_shape_model(instance_dir / "basis.farb.shape.json")
        assert basis.frame == model.frame
        io.read_image(instance_dir / "image.pgm")
        io.read_pts(instance_dir / "init.pts")
        gt = io.read_sidecar(instance_dir / "gt.json")
        assert gt["seed"] == 7

    def test_fit_below_half_pixel(self, instance_dir, tmp_path, capsys):
        out, diag = tmp_path / "fit.pts", tmp_path / "trace.csv"
        code = cli.run([
            "fit", "--image", str(instance_dir / "image.pgm"), "--init", str(instance_dir / "init.pts"),
            "--basis", str(instance_dir / "basis.farb"), "--out", str(out), "--diag", str(diag),
        ])
        assert code == 0
        gt = io.read_sidecar(instance_dir / "gt.json")
        pred = io.read_pts(out)
        assert np.mean(np.linalg.norm(pred - gt["gt_shape"], axis=1)) < 0.5
        header = diag.read_text().splitlines()[0]
        assert header == ",".join(solver.TRACE_COLUMNS)

        assert cli.run(["eval", "--pred", str(out), "--gt", str(instance_dir / "gt.json"), "--ced", str(tmp_path / "ced.csv")]) == 0
        assert "pt2pt=" in capsys.readouterr().out
        assert (tmp_path / "ced.csv").read_text().startswith("threshold,fraction\n")

    def test_frontalize_and_probe(self, instance_dir, tmp_path):
        out = tmp_path / "frontal.pgm"
        code = cli.run([
            "frontalize", "--image", str(instance_dir / "image.pgm"), "--init", str(instance_dir / "init.pts"),
            "--basis", str(instance_dir / "basis.farb"), "--out", str(out), "--max-outer", "5",
        ])
        assert code == 0
        frontal = io.read_image(out)
        basis = subspace.load_basis(instance_dir / "basis.farb")
        rows, cols = solver.crop_box(basis.mask, basis.frame)
        assert frontal.shape == (rows.stop - rows.start, cols.stop - cols.start)
        assert cli.run(["eval", "--texture", str(out), "--probe", str(tmp_path / "p.csv")]) == 0
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "level,nuclear_norm" and len(lines) == 14
        assert cli.run(["eval", "--rmse", str(out), str(out)]) == 0


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        code = cli.run(["synth", "--out", "x", "--bogus", "1"])
        assert code == 1
        assert "--bogus" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert cli.run([]) == 1

    def test_bad_frame(self, capsys):
        assert cli.run(["synth", "--out", "x", "--frame", "40by40"]) == 1
        assert "--frame" in capsys.readouterr().err

    def test_invalid_solver_value(self, capsys):
        code = cli.run(["fit", "--image", "a", "--init", "b", "--basis", "c", "--out", "d", "--rho", "0.5"])
        assert code == 1
        assert "rho" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        code = cli.run(["fit", "--image", "a.pgm", "--init", "b.pts", "--basis", str(tmp_path / "none.farb"), "--out", "x"])
        assert code == 1

    def test_corrupt_basis(self, instance_dir, tmp_path, capsys):
        bad = tmp_path / "bad.farb"
        bad.write_bytes((instance_dir / "basis.farb").read_bytes()[:-8])
        shutil.copy(instance_dir / "basis.farb.shape.json", tmp_path / "bad.farb.shape.json")
        code = cli.run(["fit", "--image", str(instance_dir / "image.pgm"), "--init", str(instance_dir / "init.pts"),
                        "--basis", str(bad), "--out", str(tmp_path / "o.pts")])
        assert code == 1
        assert "payload length mismatch" in capsys.readouterr().err

    def test_computation_failure(self, instance_dir, tmp_path, capsys):
        black = tmp_path / "black.pgm"
        io.write_image(np.zeros((52, 52)), black)
        code = cli.run(["fit", "--image", str(black), "--init", str(instance_dir / "init.pts"),
                        "--basis", str(instance_dir / "basis.farb"), "--out", str(tmp_path / "o.pts")])
        assert code == 2
        assert "computation failed" in capsys.readouterr().err

    def test_eval_needs_inputs(self):
        assert cli.run(["eval"]) == 1


def test_batch_reports_failures_and_continues(instance_dir, tmp_path, capsys):
    images, inits, out = tmp_path / "img", tmp_path / "init", tmp_path / "out"
    images.mkdir(), inits.mkdir()
    shutil.copy(instance_dir / "image.pgm", images / "good.pgm")
    shutil.copy(instance_dir / "init.pts", inits / "good.pts")
    (images / "broken.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    shutil.copy(instance_dir / "init.pts", inits / "broken.pts")
    code = cli.run(["fit", "--image", str(images), "--init", str(inits), "--basis", str(instance_dir / "basis.farb"),
                    "--out", str(out), "--diag", str(tmp_path / "diag"), "--max-outer", "3"])
    assert code == 2
    assert (out / "good.pts").exists() and not (out / "broken.pts").exists()
    assert (tmp_path / "diag" / "good.csv").exists()
    err = capsys.readouterr().err
    assert "broken" in err and "1 of 2 entries failed" in err


def test_build_basis_from_directories(tmp_path):
    sm = synth.make_model(seed=1, n_train=12, k=5, subspace_dim=8)
    images, marks = tmp_path / "img", tmp_path / "pts"
    images.mkdir(), marks.mkdir()
    for i, (img, shp) in enumerate(zip(sm.train_images, sm.train_shapes)):
        io.write_image(img, images / f"{i:03d}.pgm")
        io.save_pts(shp, marks / f"{i:03d}.pts")
    out = tmp_path / "b.farb"
    assert cli.run(["build-basis", "--images", str(images), "--landmarks", str(marks), "--frame", "40x40",
                    "--k", "5", "--out", str(out)]) == 0
    basis = subspace.load_basis(out)
    model, tri = io.load_shape_model(str(out) + cli.SHAPE_SUFFIX)
    assert basis.k == 6 and basis.frame == (40, 40) and model.frame == (40, 40)


def test_eval_directory_with_custom_indices(instance_dir, tmp_path, capsys):
    preds, gts = tmp_path / "pred", tmp_path / "gt"
    preds.mkdir(), gts.mkdir()
    shutil.copy(instance_dir / "gt.pts", preds / "a.pts")
    shutil.copy(instance_dir / "gt.pts", gts / "a.pts")
    code = cli.run(["eval", "--pred", str(preds), "--gt", str(gts), "--interior", "9-31", "--eye-corners", "15,21"])
    assert code == 0
    assert "pt2pt=0.000000" in capsys.readouterr().out


def test_index_list_parsing():
    assert cli._index_list("1,3-5, 8", "--x") == [1, 3, 4, 5, 8]
    with pytest.raises(cli.UsageError):
        cli._index_list("a-b", "--x")
