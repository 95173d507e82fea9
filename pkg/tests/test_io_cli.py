"""Artifact formats (explanation binary, heatmaps, configs, CSV/JSON
reports) and the command-line pipeline end to end."""

import json
import struct
import csv as csv_mod

import numpy as np
import pytest
from PIL import Image

from ptame import cli, fileio
from ptame.attention import ExplanationMaps
from ptame.data import ImageTensor, Normalization
from ptame.errors import ConfigurationError, FormatError, InputError
from ptame.evaluation import EvalReport
from ptame.sanity import MprtCurve
from ptame.training import LossWeights, TraceRow, Trial


def _maps(shape=(4, 6, 5), seed=0) -> ExplanationMaps:
    rng = np.random.default_rng(seed)
    return ExplanationMaps(rng.uniform(0, 1, shape).astype(np.float32))


# ---------------------------------------------------------------------------
# Explanation binary format
# ---------------------------------------------------------------------------


def test_explanation_bytes_layout():
    maps = _maps()
    blob = fileio.explanation_bytes(maps)
    assert len(blob) == 17 + 4 * 4 * 6 * 5
    assert blob[:4] == b"PEXP"
    assert blob[4] == 1
    c, w, h = struct.unpack("<3I", blob[5:17])
    assert (c, w, h) == (4, 5, 6)
    values = np.frombuffer(blob[17:], dtype="<f4").reshape(4, 6, 5)
    np.testing.assert_array_equal(values, maps.data)


def test_explanation_round_trip_bitwise(tmp_path):
    maps = _maps(shape=(10, 16, 16), seed=1)
    blob = fileio.explanation_bytes(maps)
    loaded = fileio.explanation_from_bytes(blob)
    np.testing.assert_array_equal(loaded.data, maps.data)
    assert fileio.explanation_bytes(loaded) == blob
    path = tmp_path / "maps.pexp"
    fileio.export_explanation(maps, path, metadata={"seed": 3, "config_digest": "ab12"})
    assert path.read_bytes() == blob
    np.testing.assert_array_equal(fileio.import_explanation(path).data, maps.data)
    sidecar = json.loads((tmp_path / "maps.pexp.meta.json").read_text())
    assert sidecar == {"seed": 3, "config_digest": "ab12"}


def test_explanation_format_errors():
    blob = fileio.explanation_bytes(_maps())
    with pytest.raises(FormatError):
        fileio.explanation_from_bytes(blob[:10])
    with pytest.raises(FormatError):
        fileio.explanation_from_bytes(b"XEXP" + blob[4:])
    with pytest.raises(FormatError):
        fileio.explanation_from_bytes(blob[:4] + bytes([9]) + blob[5:])
    with pytest.raises(FormatError):
        fileio.explanation_from_bytes(blob + b"\x00")
    with pytest.raises(FormatError):
        fileio.explanation_from_bytes(blob[:-4])
    bad_value = blob[:17] + np.full(4 * 6 * 5, 1.5, dtype="<f4").tobytes()
    with pytest.raises(FormatError):
        fileio.explanation_from_bytes(bad_value)


# ---------------------------------------------------------------------------
# Heatmaps and PNG metadata
# ---------------------------------------------------------------------------


def test_heatmap_colormap_endpoints():
    zeros = fileio.render_heatmap(np.zeros((4, 4)))
    ones = fileio.render_heatmap(np.ones((4, 4)))
    mid = fileio.render_heatmap(np.full((4, 4), 0.5))
    assert zeros.shape == (4, 4, 3) and zeros.dtype == np.uint8
    assert (zeros == (0, 0, 255)).all()
    assert (ones == (255, 0, 0)).all()
    assert (mid == (128, 0, 128)).all()


def test_heatmap_overlay_blend():
    e = np.full((8, 8), 1.0)
    gray = np.full((1, 8, 8), 0.5, dtype=np.float32)
    out = fileio.render_heatmap(e, gray)
    # 0.5*(255,0,0) + 0.5*0.5*255 = (191.25, 63.75, 63.75) -> rounded.
    assert out.shape == (8, 8, 3)
    assert (out == (191, 64, 64)).all()


def test_heatmap_image_tensor_uses_inverse_normalization():
    norm = Normalization((0.5,), (0.25,))
    img = ImageTensor(np.full((1, 8, 8), -1.0, dtype=np.float32), norm)  # pixel 0.25
    out = fileio.render_heatmap(np.zeros((8, 8)), img)
    # 0.5*(0,0,255) + 0.5*0.25*255 = (31.875, 31.875, 159.375) -> rounded.
    assert (out == (32, 32, 159)).all()


def test_heatmap_upscale_modes():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    img = np.zeros((3, 4, 4), dtype=np.float32)
    nearest = fileio.render_heatmap(e, img, mode="nearest")
    assert nearest.shape == (4, 4, 3)
    np.testing.assert_array_equal(nearest[0, 0], nearest[1, 1])
    assert (nearest[0, 0] != nearest[0, 3]).any()
    bilinear = fileio.render_heatmap(e, img, mode="bilinear")
    assert len(np.unique(bilinear[..., 0])) > 2  # interpolated levels


def test_heatmap_errors():
    with pytest.raises(InputError):
        fileio.render_heatmap(np.zeros((2, 2, 2)))
    with pytest.raises(InputError):
        fileio.render_heatmap(np.full((4, 4), 1.4))
    with pytest.raises(InputError):
        fileio.render_heatmap(np.zeros((4, 4)), mode="bicubic")
    with pytest.raises(InputError):
        fileio.render_heatmap(np.zeros((4, 4)), np.zeros((4, 4)))


def test_png_metadata_round_trip(tmp_path):
    raster = np.zeros((6, 6, 3), dtype=np.uint8)
    path = tmp_path / "img.png"
    fileio.write_png(path, raster, metadata={"seed": "4", "config_digest": "beef"})
    assert fileio.read_png_metadata(path) == {"seed": "4", "config_digest": "beef"}


def test_read_image_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pixels = rng.integers(0, 256, size=(10, 12, 3), dtype=np.uint8)
    path = tmp_path / "in.png"
    Image.fromarray(pixels).save(path)
    out = fileio.read_image(path)
    assert out.shape == (3, 10, 12) and out.dtype == np.float32
    np.testing.assert_array_equal(np.transpose((out * 255).round().astype(np.uint8),
                                               (1, 2, 0)), pixels)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def test_parse_config_valid():
    text = "a = 1\nb=2 # trailing comment\n# whole-line comment\n\nlr = 1e-3\n"
    assert fileio.parse_config(text) == {"a": "1", "b": "2", "lr": "1e-3"}


def test_parse_config_errors():
    for bad in ("novalue", "= 3", "key =", "a=1\na=2"):
        with pytest.raises(ConfigurationError):
            fileio.parse_config(bad)


def test_read_config(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("lambda1 = 0.75\nlambda2 = 0.2\n")
    assert fileio.read_config(path) == {"lambda1": "0.75", "lambda2": "0.2"}


def test_config_digest_properties():
    base = {"a": "1", "b": "2"}
    digest = fileio.config_digest(base)
    assert len(digest) == 16 and int(digest, 16) >= 0
    assert digest == fileio.config_digest({"b": "2", "a": "1"})
    assert digest != fileio.config_digest({"a": "1", "b": "3"})
    assert digest != fileio.config_digest({"a": "1"})


# ---------------------------------------------------------------------------
# CSV / JSON writers
# ---------------------------------------------------------------------------


def _trace():
    return [TraceRow(0, 2.302585092994046, 0.5, 0.01, 1.8290680743952367, 4e-05),
            TraceRow(1, 1.1, 0.25, 0.007, 0.88, 0.000123456789012345)]


def test_loss_trace_round_trip(tmp_path):
    path = tmp_path / "trace.csv"
    fileio.write_loss_trace(path, _trace(), metadata={"seed": 0, "config_digest": "aa"})
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_digest=aa"
    assert lines[1] == "# seed=0"
    assert lines[2] == "step,ce,area,variation,total,lr"
    assert fileio.read_loss_trace(path) == _trace()


def test_eval_report_writers(tmp_path):
    report = EvalReport(image_count=5, explainer_id="ptame", seed=2,
                        ad={100: 1.25, 50: 30.5, 15: 80.0},
                        ic={100: 0.0, 50: 40.0, 15: 20.0},
                        morf=((10.0, 0.8), (50.0, 0.4)), lerf=((10.0, 1.0), (50.0, 0.9)),
                        morf_auc=0.5, lerf_auc=0.93)
    jpath, cpath = tmp_path / "report.json", tmp_path / "report.csv"
    fileio.write_eval_report_json(jpath, report, metadata={"config_digest": "cd"})
    payload = json.loads(jpath.read_text())
    assert payload["explainer_id"] == "ptame"
    assert payload["seed"] == 2
    assert payload["ad"]["50"] == 30.5
    assert payload["morf"] == [[10.0, 0.8], [50.0, 0.4]]
    assert payload["metadata"] == {"config_digest": "cd"}

    fileio.write_eval_report_csv(cpath, report, metadata={"seed": 2})
    lines = [l for l in cpath.read_text().splitlines() if not l.startswith("#")]
    rows = list(csv_mod.reader(lines))
    assert rows[0] == ["explainer", "images", "seed", "AD(100)", "IC(100)", "AD(50)",
                       "IC(50)", "AD(15)", "IC(15)", "MoRF_AUC", "LeRF_AUC"]
    assert rows[1][0] == "ptame"
    assert float(rows[1][3]) == 1.25
    assert float(rows[1][-2]) == 0.5
    assert cpath.read_text().splitlines()[0] == "# seed=2"


def test_mprt_and_trials_writers(tmp_path):
    curve = MprtCurve((("none", 1.0), ("conv1", 0.25)), probe_size=8, seed=1)
    mpath = tmp_path / "mprt.csv"
    fileio.write_mprt_csv(mpath, curve)
    lines = mpath.read_text().splitlines()
    assert "# probe_size=8" in lines and "# seed=1" in lines
    data = [l for l in lines if not l.startswith("#")]
    assert data[0] == "layer,ssim"
    assert data[1] == "none,1.0"
    assert data[2] == "conv1,0.25"

    trials = [Trial(0, LossWeights(0.5, 0.25, 0.25, lambda_area=2.0), -0.125, False),
              Trial(1, LossWeights(0.1, 0.2, 0.7), 0.75, True)]
    tpath = tmp_path / "trials.csv"
    fileio.write_trials_csv(tpath, trials, metadata={"seed": 0})
    rows = list(csv_mod.reader([l for l in tpath.read_text().splitlines()
                                if not l.startswith("#")]))
    assert rows[0] == ["trial", "lambda1", "lambda2", "lambda3", "lambda_area",
                       "guided", "score"]
    assert rows[1] == ["0", "0.5", "0.25", "0.25", "2.0", "0", "-0.125"]
    assert rows[2][5] == "1" and float(rows[2][6]) == 0.75


def test_plot_mprt_writes_png(tmp_path):
    curve = MprtCurve((("none", 1.0), ("conv1", 0.5), ("head", 0.1)), probe_size=4, seed=0)
    path = tmp_path / "mprt.png"
    fileio.plot_mprt(path, curve)
    assert path.stat().st_size > 500
    with Image.open(path) as img:
        assert img.format == "PNG"


# ---------------------------------------------------------------------------
# CLI pipeline
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One full pipeline pass on a tiny dataset; commands must all exit 0."""
    root = tmp_path_factory.mktemp("cli")
    data_bin = root / "data.bin"
    eval_bin = root / "eval.bin"
    models_dir = root / "models"
    run_dir = root / "run"
    cfg = root / "train.cfg"
    cfg.write_text("lambda1 = 0.75\nlambda2 = 0.2\nbatch_size = 32\n"
                   "max_lr = 0.001\nseed = 0\nepochs = 1\n")

    assert cli.run(["synth-data", "--out", str(data_bin), "--n", "160", "--seed", "3"]) == 0
    assert cli.run(["synth-data", "--out", str(eval_bin), "--n", "24", "--seed", "9"]) == 0
    assert cli.run(["train-models", "--data", str(data_bin), "--out", str(models_dir),
                    "--epochs", "1", "--seed", "0"]) == 0
    assert cli.run(["train", "--config", str(cfg), "--backbone", str(models_dir / "backbone.ckpt"),
                    "--aux", str(models_dir / "aux.ckpt"), "--data", str(data_bin),
                    "--out", str(run_dir)]) == 0

    import ptame
    dataset = ptame.read_cifar_bin(eval_bin)
    image_png = root / "sample.png"
    Image.fromarray(np.transpose(dataset.images[0], (1, 2, 0))).save(image_png)

    return {"root": root, "data": data_bin, "eval": eval_bin, "models": models_dir,
            "run": run_dir, "config": cfg, "image": image_png}


def test_cli_train_artifacts(cli_workspace):
    run_dir = cli_workspace["run"]
    assert (run_dir / "attention.ckpt").exists()
    trace = fileio.read_loss_trace(run_dir / "loss_trace.csv")
    assert len(trace) == 5  # ceil(160 / 32)
    head = (run_dir / "loss_trace.csv").read_text().splitlines()[:2]
    assert head[0].startswith("# config_digest=")
    assert head[1] == "# seed=0"


def test_cli_train_rerun_is_bitwise_identical(cli_workspace):
    ws = cli_workspace
    out2 = ws["root"] / "run2"
    assert cli.run(["train", "--config", str(ws["config"]),
                    "--backbone", str(ws["models"] / "backbone.ckpt"),
                    "--aux", str(ws["models"] / "aux.ckpt"),
                    "--data", str(ws["data"]), "--out", str(out2)]) == 0
    assert (out2 / "loss_trace.csv").read_bytes() == \
        (ws["run"] / "loss_trace.csv").read_bytes()
    assert (out2 / "attention.ckpt").read_bytes() == \
        (ws["run"] / "attention.ckpt").read_bytes()


def test_cli_explain_outputs(cli_workspace):
    ws = cli_workspace
    out = ws["root"] / "expl"
    argv = ["explain", "--image", str(ws["image"]), "--backbone",
            str(ws["models"] / "backbone.ckpt"), "--aux", str(ws["models"] / "aux.ckpt"),
            "--attention", str(ws["run"] / "attention.ckpt"), "--out", str(out)]
    assert cli.run(argv) == 0
    maps = fileio.import_explanation(out / "sample.pexp")
    assert maps.data.shape == (10, 16, 16)
    meta = json.loads((out / "sample.pexp.meta.json").read_text())
    assert set(meta) == {"seed", "config_digest", "class_index"}
    png_meta = fileio.read_png_metadata(out / "sample_heatmap.png")
    assert png_meta["class_index"] == str(meta["class_index"])

    out2 = ws["root"] / "expl2"
    assert cli.run(argv[:-1] + [str(out2)]) == 0
    assert (out2 / "sample.pexp").read_bytes() == (out / "sample.pexp").read_bytes()
    assert (out2 / "sample_heatmap.png").read_bytes() == \
        (out / "sample_heatmap.png").read_bytes()


def test_cli_explain_explicit_class(cli_workspace):
    ws = cli_workspace
    out = ws["root"] / "expl_c7"
    assert cli.run(["explain", "--image", str(ws["image"]), "--class", "7",
                    "--mode", "nearest", "--backbone", str(ws["models"] / "backbone.ckpt"),
                    "--aux", str(ws["models"] / "aux.ckpt"),
                    "--attention", str(ws["run"] / "attention.ckpt"),
                    "--out", str(out)]) == 0
    meta = json.loads((out / "sample.pexp.meta.json").read_text())
    assert meta["class_index"] == 7


def test_cli_evaluate_and_rerun(cli_workspace):
    ws = cli_workspace
    out = ws["root"] / "eval_out"
    argv = ["evaluate", "--backbone", str(ws["models"] / "backbone.ckpt"),
            "--aux", str(ws["models"] / "aux.ckpt"),
            "--attention", str(ws["run"] / "attention.ckpt"),
            "--data", str(ws["eval"]), "--out", str(out), "--seed", "1"]
    assert cli.run(argv) == 0
    payload = json.loads((out / "report.json").read_text())
    assert payload["image_count"] == 24
    assert payload["seed"] == 1
    assert set(payload["ad"]) == {"100", "50", "15"}
    assert len(payload["morf"]) == 7
    assert (out / "report.csv").exists()

    out2 = ws["root"] / "eval_out2"
    assert cli.run([a if a != str(out) else str(out2) for a in argv]) == 0
    assert (out2 / "report.json").read_bytes() == (out / "report.json").read_bytes()
    assert (out2 / "report.csv").read_bytes() == (out / "report.csv").read_bytes()


def test_cli_evaluate_random_explainer(cli_workspace):
    ws = cli_workspace
    out = ws["root"] / "eval_rand"
    assert cli.run(["evaluate", "--explainer", "random",
                    "--backbone", str(ws["models"] / "backbone.ckpt"),
                    "--aux", str(ws["models"] / "aux.ckpt"),
                    "--attention", str(ws["run"] / "attention.ckpt"),
                    "--data", str(ws["eval"]), "--out", str(out)]) == 0
    payload = json.loads((out / "report.json").read_text())
    assert payload["explainer_id"] == "random"


def test_cli_sanity_command(cli_workspace):
    ws = cli_workspace
    out = ws["root"] / "sanity_out"
    assert cli.run(["sanity", "--config", str(ws["config"]),
                    "--backbone", str(ws["models"] / "backbone.ckpt"),
                    "--aux", str(ws["models"] / "aux.ckpt"),
                    "--attention", str(ws["run"] / "attention.ckpt"),
                    "--data", str(ws["eval"]), "--probe-size", "8",
                    "--out", str(out)]) == 0
    lines = [l for l in (out / "mprt.csv").read_text().splitlines()
             if not l.startswith("#")]
    assert lines[0] == "layer,ssim"
    assert lines[1] == "none,1.0"
    assert len(lines) == 1 + 10  # header + unrandomized + 9 layers
    assert (out / "mprt.png").exists()


def test_cli_hpsearch_command(cli_workspace):
    ws = cli_workspace
    out = ws["root"] / "hp_out"
    assert cli.run(["hpsearch", "--config", str(ws["config"]), "--trials", "2",
                    "--subsample", "0.5", "--random-only",
                    "--backbone", str(ws["models"] / "backbone.ckpt"),
                    "--aux", str(ws["models"] / "aux.ckpt"),
                    "--data", str(ws["data"]), "--out", str(out)]) == 0
    rows = list(csv_mod.reader([l for l in (out / "trials.csv").read_text().splitlines()
                                if not l.startswith("#")]))
    assert len(rows) == 3
    best = json.loads((out / "best_weights.json").read_text())
    assert {"lambda1", "lambda2", "lambda3", "lambda_area"} <= set(best)
    scores = [float(r[6]) for r in rows[1:]]
    best_row = rows[1 + int(np.argmax(scores))]
    assert float(best_row[1]) == best["lambda1"]


def test_cli_error_paths(cli_workspace, tmp_path, capsys):
    ws = cli_workspace
    assert cli.run(["no-such-command"]) == 2
    assert cli.run(["train"]) == 2  # missing required flags
    assert cli.run([]) == 2

    assert cli.run(["train", "--config", str(tmp_path / "missing.cfg"),
                    "--backbone", "b", "--aux", "a", "--data", "d", "--out", "o"]) == 2
    assert "missing.cfg" in capsys.readouterr().err

    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("lambda2 = 0.2\n")
    assert cli.run(["train", "--config", str(bad_cfg), "--backbone", "b",
                    "--aux", "a", "--data", "d", "--out", "o"]) == 2
    assert "lambda1" in capsys.readouterr().err

    assert cli.run(["evaluate", "--backbone", str(tmp_path / "nope.ckpt"),
                    "--aux", str(ws["models"] / "aux.ckpt"),
                    "--attention", str(ws["run"] / "attention.ckpt"),
                    "--data", str(ws["eval"]), "--out", str(tmp_path / "x")]) == 1
    assert "error" in capsys.readouterr().err
