import json

import numpy as np
import pytest

from gmaflow import cli, vizio
from gmaflow.core import FlowField
from gmaflow.metrics import Region
from gmaflow.refinement import init_pipeline, save_pipeline


def _scene(tmp_path, size=32, bg=(0, 0), layers=(), name="scene.json"):
    doc = {"height": size, "width": size, "seed": 1, "background": {"translation": list(bg)},
           "layers": list(layers)}
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path


def _synth(tmp_path, **kw):
    out = tmp_path / "pair"
    assert cli.main(["synth", str(_scene(tmp_path, **kw)), str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def pair64(tmp_path_factory):
    base = tmp_path_factory.mktemp("pair64")
    layer = {"rect": [16, 16, 24, 20], "translation": [3, 2], "depth": 1}
    return _synth(base, size=64, bg=(-2, 1), layers=[layer])


def _run(pair, out, *extra):
    return cli.main(["run", str(pair / "img1.ppm"), str(pair / "img2.ppm"), str(out), *extra])


def test_synth_writes_all_outputs(tmp_path):
    out = _synth(tmp_path, bg=(5, 0))
    assert sorted(p.name for p in out.iterdir()) == ["gt.flo", "img1.ppm", "img2.ppm", "occ.pgm", "partition.pgm"]
    part = vizio.read_codes(out / "partition.pgm")
    assert np.count_nonzero(part == Region.OCC_OUT) == 32 * 5
    assert np.all(part[:, -5:] == Region.OCC_OUT)
    occ = vizio.read_codes(out / "occ.pgm")
    assert set(np.unique(occ)) == {0, 255}
    np.testing.assert_array_equal(vizio.read_flo(out / "gt.flo").u, 5.0)


def test_synth_zero_motion_frames_identical(tmp_path):
    out = _synth(tmp_path, layers=[{"rect": [4, 4, 8, 8], "translation": [0, 0], "depth": 1}])
    assert (out / "img1.ppm").read_bytes() == (out / "img2.ppm").read_bytes()


def test_synth_malformed_spec_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "height": 16,\n  "width": 16,\n  "layers": [\n    {"rect": [1, 2], "depth": 1}\n  ]\n}\n')
    assert cli.main(["synth", str(path), str(tmp_path / "o")]) == 1
    assert "line 5" in capsys.readouterr().err


def test_synth_missing_spec_is_io_error(tmp_path, capsys):
    assert cli.main(["synth", str(tmp_path / "nope.json"), str(tmp_path / "o")]) == 2
    assert "I/O error" in capsys.readouterr().err


def test_run_is_byte_reproducible(pair64, tmp_path):
    assert _run(pair64, tmp_path / "a.flo", "--iters", "4") == 0
    assert _run(pair64, tmp_path / "b.flo", "--iters", "4") == 0
    assert (tmp_path / "a.flo").read_bytes() == (tmp_path / "b.flo").read_bytes()
    flow = vizio.read_flo(tmp_path / "a.flo")
    assert flow.uv.shape == (64, 64, 2)
    assert _run(pair64, tmp_path / "c.flo", "--iters", "4", "--seed", "1") == 0
    assert (tmp_path / "c.flo").read_bytes() != (tmp_path / "a.flo").read_bytes()


def test_run_gma_off_matches_on_at_init(pair64, tmp_path):
    for mode in ("off", "content"):
        assert _run(pair64, tmp_path / f"{mode}.flo", "--iters", "3", "--gma", mode) == 0
    off = vizio.read_flo(tmp_path / "off.flo").uv
    on = vizio.read_flo(tmp_path / "content.flo").uv
    np.testing.assert_allclose(on, off, atol=1e-6)


def test_run_dumps_attention_heatmaps(pair64, tmp_path):
    out = tmp_path / "flow.flo"
    assert _run(pair64, out, "--iters", "2", "--dump-attention", "0,0;20,33;63,63") == 0
    names = sorted(p.name for p in tmp_path.glob("flow_attn_*.pgm"))
    assert names == ["flow_attn_r0_c0.pgm", "flow_attn_r2_c4.pgm", "flow_attn_r7_c7.pgm"]
    assert (tmp_path / "flow_attention.png").read_bytes()[:4] == b"\x89PNG"
    img = vizio.read_image(tmp_path / "flow_attn_r2_c4.pgm")
    assert img.data.shape == (8, 8, 1)
    assert img.data.max() == 1.0


def test_run_viz_outputs(pair64, tmp_path):
    assert _run(pair64, tmp_path / "f.flo", "--iters", "1", "--viz", str(tmp_path / "f.ppm")) == 0
    assert vizio.read_image(tmp_path / "f.ppm").data.shape == (64, 64, 3)
    assert (tmp_path / "f.png").read_bytes()[:4] == b"\x89PNG"


def test_run_small_images_use_shallower_pyramid(tmp_path):
    pair = _synth(tmp_path, size=32, bg=(1, 0))
    assert _run(pair, tmp_path / "f.flo", "--iters", "1") == 0
    assert vizio.read_flo(tmp_path / "f.flo").uv.shape == (32, 32, 2)


def test_run_with_weights_file_matches_seeded_init(pair64, tmp_path):
    w = init_pipeline(0, num_levels=4, h_max=8, w_max=8)
    save_pipeline(w, tmp_path / "w.bin")
    assert _run(pair64, tmp_path / "a.flo", "--iters", "2", "--weights", str(tmp_path / "w.bin")) == 0
    assert _run(pair64, tmp_path / "b.flo", "--iters", "2") == 0
    assert (tmp_path / "a.flo").read_bytes() == (tmp_path / "b.flo").read_bytes()


def test_run_bad_inputs(pair64, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"RFN1" + b"\x00" * 10)
    assert _run(pair64, tmp_path / "x.flo", "--weights", str(bad)) == 1
    assert _run(pair64, tmp_path / "x.flo", "--weights", str(tmp_path / "missing.bin")) == 2
    assert _run(pair64, tmp_path / "x.flo", "--gma", "sideways") == 1
    assert _run(pair64, tmp_path / "x.flo", "--iters", "0") == 1
    assert _run(pair64, tmp_path / "x.flo", "--dump-attention", "1;2") == 1
    assert _run(pair64, tmp_path / "x.flo", "--dump-attention", "64,0") == 1
    assert _run(pair64, tmp_path / "x.flo", "--gma", "off", "--dump-attention", "0,0") == 1
    other = _synth(tmp_path, size=32)
    assert cli.main(["run", str(pair64 / "img1.ppm"), str(other / "img2.ppm"), str(tmp_path / "x.flo")]) == 1
    capsys.readouterr()


def test_eval_perfect_prediction(tmp_path, capsys):
    pair = _synth(tmp_path, bg=(2, -1))
    capsys.readouterr()
    gt = str(pair / "gt.flo")
    assert cli.main(["eval", gt, gt, "--occ", str(pair / "occ.pgm")]) == 0
    text = capsys.readouterr().out
    rows = {ln.split()[0]: ln.split() for ln in text.splitlines()[2:7]}
    for name in ("Noc", "Occ", "Occ-in", "Occ-out", "All"):
        assert rows[name][1] in ("0.000", "n/a")
    assert "Fl-all: 0.00%" in text


def test_eval_without_occlusion_reports_all_only(tmp_path, capsys):
    pair = _synth(tmp_path, bg=(1, 1))
    capsys.readouterr()
    assert cli.main(["eval", str(pair / "gt.flo"), str(pair / "gt.flo")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines[2:-1]] == ["All"]


def _constant_flow(path, u, size=8):
    uv = np.zeros((size, size, 2))
    uv[..., 0] = u
    vizio.write_flo(FlowField(uv), path)


def test_eval_report_files_and_baseline(tmp_path, capsys):
    gt, base, ours = tmp_path / "gt.flo", tmp_path / "base.flo", tmp_path / "ours.flo"
    _constant_flow(gt, 0.0)
    _constant_flow(base, 2.86)
    _constant_flow(ours, 2.47)
    assert cli.main(["eval", str(base), str(gt), "--report", str(tmp_path / "base.txt")]) == 0
    doc = json.loads((tmp_path / "base.json").read_text())
    assert doc["regions"]["All"]["count"] == 64
    assert doc["regions"]["All"]["aepe"] == pytest.approx(2.86, abs=1e-6)
    assert (tmp_path / "base.png").read_bytes()[:4] == b"\x89PNG"
    capsys.readouterr()
    assert cli.main(["eval", str(ours), str(gt), "--baseline", str(tmp_path / "base.json"),
                     "--report", str(tmp_path / "ours.txt")]) == 0
    out = capsys.readouterr().out
    row = next(ln for ln in out.splitlines() if ln.startswith("All"))
    assert row.split()[:4] == ["All", "2.860", "2.470", "13.6"]
    assert (tmp_path / "ours.txt").read_text() == out


def test_eval_errors(tmp_path, capsys):
    a, b = tmp_path / "a.flo", tmp_path / "b.flo"
    _constant_flow(a, 1.0, size=8)
    _constant_flow(b, 1.0, size=4)
    assert cli.main(["eval", str(a), str(b)]) == 1
    junk = tmp_path / "junk.json"
    junk.write_text('{"not": "a report"}')
    assert cli.main(["eval", str(a), str(a), "--baseline", str(junk)]) == 1
    (tmp_path / "c.flo").write_bytes(b"\x00" * 20)
    assert cli.main(["eval", str(tmp_path / "c.flo"), str(a)]) == 1
    capsys.readouterr()


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck"]) == 0
    assert capsys.readouterr().out.rstrip().endswith("PASS")
    assert cli.main(["gradcheck", "--threshold", "1e-12"]) == 1
    assert capsys.readouterr().out.rstrip().endswith("FAIL")


def test_gradcheck_position_only_reports_unused_key(capsys):
    assert cli.main(["gradcheck", "--variant", "pos", "--seed", "2"]) == 0
    out = capsys.readouterr().out
    assert "identically zero: W_key" in out


def test_config_file_supplies_defaults(pair64, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iters": 1, "gma": "off"}))
    assert _run(pair64, tmp_path / "a.flo", "--config", str(cfg)) == 0
    assert "1 iterations, gma=off" in capsys.readouterr().out
    assert _run(pair64, tmp_path / "b.flo", "--config", str(cfg), "--gma", "pos") == 0
    assert "gma=pos" in capsys.readouterr().out
    cfg.write_text(json.dumps({"colour": "red"}))
    assert _run(pair64, tmp_path / "c.flo", "--config", str(cfg)) == 1
    cfg.write_text("{oops")
    assert _run(pair64, tmp_path / "c.flo", "--config", str(cfg)) == 1
    assert cli.main(["gradcheck", "--config", str(tmp_path / "none.json")]) == 2


def test_usage_errors_exit_one(capsys):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["--help"]) == 0
    capsys.readouterr()
