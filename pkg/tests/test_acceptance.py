"""Acceptance suite: one test per criterion, each under its runtime budget.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints a PASS/FAIL line per criterion.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from gmaflow import cli, gma, vizio
from gmaflow.core import FeatureMap, FlowField, ImageGrid, flatten_hw
from gmaflow.correlation import all_pairs_correlation
from gmaflow.encoder import ConvSpec, context_encoder, conv2d
from gmaflow.gradcheck import check_gma
from gmaflow.metrics import Region, evaluate, fl_all_kitti, fl_all_paper, partition_occlusion, relative_improvement
from gmaflow.refinement import PipelineConfig, init_pipeline, run_pipeline
from gmaflow.synth import Layer, SceneSpec, render_pair
from oracles import aggregate_loops, conv_loops, correlation_loops, logits_loops

VARIANTS = list(gma.Variant)


@contextmanager
def within(seconds):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"took {elapsed:.2f} s, budget {seconds} s"


def _random_gma(rng, alpha=None):
    """Random sizes and parameters with distinct D_in, D_c, D_m."""
    h, w = rng.integers(1, 6, size=2)
    d_in, d_c, d_m = rng.integers(1, 7, size=3)
    x = FeatureMap(rng.normal(size=(h, w, d_c)))
    y = FeatureMap(rng.normal(size=(h, w, d_m)))
    params = gma.GmaParams(
        w_qry=rng.normal(size=(d_in, d_c)),
        w_key=rng.normal(size=(d_in, d_c)),
        w_val=rng.normal(size=(d_m, d_m)),
        alpha=float(rng.uniform(-2, 2)) if alpha is None else alpha,
        pos_v=rng.normal(size=(2 * h - 1, d_in)),
        pos_h=rng.normal(size=(2 * w - 1, d_in)),
    )
    cfg = gma.GmaConfig(d_in=int(d_in), d_c=int(d_c), d_m=int(d_m))
    return x, y, params, cfg


def _scene64():
    layer = Layer(rect=(16, 16, 24, 20), translation=(3, 2), depth=1, texture_seed=5)
    return render_pair(SceneSpec(64, 64, background=(-2, 1), layers=(layer,), seed=3))


@pytest.mark.criterion(1, "GMA identity at initialization (alpha = 0, residual on)")
def test_criterion_01_identity_at_init():
    rng = np.random.default_rng(101)
    with within(1.0):
        for _ in range(100):
            x, y, params, cfg = _random_gma(rng, alpha=0.0)
            for variant in VARIANTS:
                out = gma.gma_forward(x, y, params, gma.GmaConfig(variant, d_in=cfg.d_in, d_c=cfg.d_c, d_m=cfg.d_m))
                assert out.y_hat.tobytes() == flatten_hw(y).tobytes()


@pytest.mark.criterion(2, "Attention is row-stochastic for every variant")
def test_criterion_02_attention_validity():
    rng = np.random.default_rng(102)
    with within(1.0):
        for variant in VARIANTS:
            for _ in range(100):
                x, _, params, _ = _random_gma(rng)
                params = params.replace(w_qry=params.w_qry * 5.0)  # sharp rows too
                a = gma.gma_attention(x, params, gma.GmaConfig(variant)).weights
                assert np.all(a >= 0.0)
                assert np.all(np.abs(a.sum(axis=1) - 1.0) <= 1e-6)


@pytest.mark.criterion(3, "Analytic gradients agree with central differences (1e-4)")
def test_criterion_03_gradient_correctness():
    with within(30.0):
        for variant in VARIANTS:
            for seed in range(5):
                rep = check_gma(3, 3, 4, variant, seed=seed, threshold=1e-4, h=1e-5)
                assert rep.passed, rep.to_table()


@pytest.mark.criterion(4, "Correlation, logits, aggregation and conv2d match loop oracles (1e-12)")
def test_criterion_04_oracle_equivalence():
    rng = np.random.default_rng(104)
    with within(10.0):
        for i in range(20):
            h, w = rng.integers(1, 9, size=2)
            d = int(rng.integers(1, 9))
            f1, f2 = rng.normal(size=(2, h, w, d))
            got = all_pairs_correlation(FeatureMap(f1), FeatureMap(f2))
            np.testing.assert_allclose(got, correlation_loops(f1, f2), atol=1e-12, rtol=0)

            h, w = rng.integers(1, 5, size=2)
            n = h * w
            q, k = rng.normal(size=(2, n, d))
            tables = (rng.normal(size=(2 * h - 1, d)), rng.normal(size=(2 * w - 1, d)))
            variant = VARIANTS[i % 3]
            got = gma.attention_logits(q, k, tables, variant, h, w)
            want = logits_loops(q, k, tables[0], tables[1], variant.value, h, w)
            np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

            dm = int(rng.integers(1, 6))
            y, v = rng.normal(size=(2, n, dm))
            a = rng.random((n, n))
            a /= a.sum(axis=1, keepdims=True)
            alpha = float(rng.normal())
            residual = bool(i % 2)
            got = gma.aggregate(y, a, v, alpha, residual)
            np.testing.assert_allclose(got, aggregate_loops(y, a, v, alpha, residual), atol=1e-12, rtol=0)

            hx, wx = rng.integers(1, 8, size=2)
            cin, cout = rng.integers(1, 4, size=2)
            kk = int(rng.choice([1, 3]))
            stride = int(rng.integers(1, 3))
            xx = rng.normal(size=(hx, wx, cin))
            spec = ConvSpec(rng.normal(size=(kk, kk, cin, cout)), rng.normal(size=cout), stride)
            got = conv2d(FeatureMap(xx), spec).data
            np.testing.assert_allclose(got, conv_loops(xx, spec.weight, spec.bias, stride), atol=1e-12, rtol=0)


@pytest.mark.criterion(5, "Content-only GMA commutes with pixel permutation (1e-9)")
def test_criterion_05_permutation_equivariance():
    rng = np.random.default_rng(105)

    def permute(fm, perm):
        return FeatureMap(flatten_hw(fm)[perm].reshape(fm.data.shape))

    with within(5.0):
        for _ in range(20):
            x, y, params, cfg = _random_gma(rng)
            perm = rng.permutation(x.height * x.width)
            base = gma.gma_forward(x, y, params, cfg).y_hat
            moved = gma.gma_forward(permute(x, perm), permute(y, perm), params, cfg).y_hat
            np.testing.assert_allclose(moved, base[perm], atol=1e-9, rtol=0)


@pytest.mark.criterion(6, "Relative-improvement arithmetic reproduces the headline numbers")
def test_criterion_06_headline_arithmetic():
    with within(1.0):
        assert relative_improvement(5.36, 4.25) == 20.7
        assert relative_improvement(2.86, 2.47) == 13.6
        assert relative_improvement(1.61, 1.39) == 13.7


@pytest.mark.criterion(7, "Metric identities, partition and Fl-all branches")
def test_criterion_07_metrics_identities():
    rng = np.random.default_rng(107)
    with within(5.0):
        for _ in range(50):
            h, w = rng.integers(2, 12, size=2)
            gt = FlowField(rng.normal(scale=5, size=(h, w, 2)), rng.random((h, w)) < 0.9)
            pred = FlowField(gt.uv + rng.normal(scale=3, size=(h, w, 2)))
            occ = rng.random((h, w)) < rng.random()
            rep = evaluate(pred, gt, occ)
            a, c = rep.aepe, rep.counts
            weighted = sum(a[k] * c[k] for k in ("Noc", "Occ") if c[k])
            if c["All"]:
                assert abs(a["All"] * c["All"] - weighted) <= 1e-9
            part = partition_occlusion(occ, gt)
            hits = sum((part == r).astype(int) for r in Region)
            assert np.all(hits == 1)
            assert c["Occ"] == c["Occ-in"] + c["Occ-out"]
            assert c["All"] == c["Noc"] + c["Occ"] == int(gt.valid.sum())

        def one(u, v):
            return FlowField(np.array([[[u, v]]], dtype=float))

        assert fl_all_paper(one(104, 0), one(100, 0)) == 100.0  # EPE 4 > 3
        assert fl_all_paper(one(12, 0), one(10, 0)) == 100.0  # EPE 2 > 5% of 10
        assert fl_all_paper(one(102, 0), one(100, 0)) == 0.0  # neither threshold
        assert fl_all_kitti(one(104, 0), one(100, 0)) == 0.0


@pytest.mark.criterion(8, "Synthetic out-of-frame counts and brightness constancy")
def test_criterion_08_synthetic_geometry():
    h = w = 32
    rows, cols = np.mgrid[0:h, 0:w]
    with within(5.0):
        for u in range(-5, 6):
            for v in range(-5, 6):
                pair = render_pair(SceneSpec(h, w, background=(u, v), seed=7))
                n_out = int(np.count_nonzero(pair.partition == Region.OCC_OUT))
                assert n_out == h * abs(v) + w * abs(u) - abs(u) * abs(v)
                noc = pair.partition == Region.NOC
                gu = pair.gt.u.astype(int)
                gv = pair.gt.v.astype(int)
                warped = pair.img2.data[(rows + gv)[noc], (cols + gu)[noc]]
                assert warped.tobytes() == pair.img1.data[noc].tobytes()


@pytest.mark.criterion(9, "Flow and PNM files round-trip bit-exact; 1x1 .flo layout")
def test_criterion_09_io_round_trips(tmp_path):
    rng = np.random.default_rng(109)
    with within(5.0):
        blob = vizio.flo_bytes(FlowField(np.array([[[1.0, -2.0]]])))
        assert blob == b"PIEH" + (1).to_bytes(4, "little") * 2 + bytes.fromhex("0000803f000000c0")
        assert len(blob) == 20
        for i in range(50):
            h, w = rng.integers(1, 20, size=2)
            uv = rng.normal(scale=20, size=(h, w, 2)).astype(np.float32).astype(np.float64)
            flow = FlowField(uv)
            path = tmp_path / f"f{i}.flo"
            vizio.write_flo(flow, path)
            back = vizio.read_flo(path)
            assert back.uv.tobytes() == flow.uv.tobytes()
            assert vizio.flo_bytes(back) == path.read_bytes()

            c = 3 if i % 2 else 1
            img = ImageGrid(rng.integers(0, 256, size=(h, w, c)) / 255.0)
            ipath = tmp_path / f"i{i}.pnm"
            vizio.write_image(img, ipath)
            back_img = vizio.read_image(ipath)
            assert back_img.data.tobytes() == img.data.tobytes()
            buf = ipath.read_bytes()
            vizio.write_image(back_img, ipath)
            assert ipath.read_bytes() == buf


@pytest.mark.criterion(10, "Pipeline 64x64, 12 iterations: shape, determinism, bounded state, accumulation")
def test_criterion_10_pipeline():
    pair = _scene64()
    weights = init_pipeline(0, h_max=8, w_max=8)
    cfg = PipelineConfig(12, gma.GmaConfig(d_in=32, d_c=32, d_m=32))
    with within(30.0):
        flow_a, trace = run_pipeline(pair.img1, pair.img2, weights, cfg)
        flow_b, _ = run_pipeline(pair.img1, pair.img2, weights, cfg)
        assert flow_a.uv.shape == (64, 64, 2)
        assert np.all(np.isfinite(flow_a.uv))
        assert flow_a.uv.tobytes() == flow_b.uv.tobytes()
        assert vizio.flo_bytes(flow_a) == vizio.flo_bytes(flow_b)
        assert len(trace.hidden) == 12
        for hidden in trace.hidden:
            assert np.all(np.abs(hidden.data) < 1.0)
        acc = trace.initial_flow.uv
        for res, flow in zip(trace.residuals, trace.flows):
            acc = acc + res.uv
            assert flow.uv.tobytes() == acc.tobytes()


@pytest.mark.criterion(11, "CLI attention export: 3 heatmaps whose brightest pixel is the argmax")
def test_criterion_11_attention_export(tmp_path, capsys):
    pair = _scene64()
    vizio.write_image(pair.img1, tmp_path / "img1.ppm")
    vizio.write_image(pair.img2, tmp_path / "img2.ppm")
    queries = [(0, 0), (20, 33), (63, 63)]
    spec = ";".join(f"{r},{c}" for r, c in queries)
    with within(30.0):
        code = cli.main(["run", str(tmp_path / "img1.ppm"), str(tmp_path / "img2.ppm"),
                         str(tmp_path / "out.flo"), "--dump-attention", spec])
        assert code == 0
        capsys.readouterr()
        files = sorted(tmp_path.glob("out_attn_*.pgm"))
        assert len(files) == 3

        # same weights the CLI builds for a 64x64 input at seed 0
        img1 = vizio.read_image(tmp_path / "img1.ppm")
        weights = init_pipeline(0, num_levels=4, h_max=8, w_max=8)
        ctx, _ = context_encoder(img1, weights.encoder)
        attn = gma.gma_attention(ctx, weights.gma, gma.GmaConfig(d_in=32, d_c=32, d_m=32)).weights
        for r, c in queries:
            gr, gc = r // 8, c // 8
            path = tmp_path / f"out_attn_r{gr}_c{gc}.pgm"
            raw = path.read_bytes()
            assert raw.startswith(b"P5\n8 8\n255\n") and len(raw) == len(b"P5\n8 8\n255\n") + 64
            heat = vizio.read_codes(path).ravel()
            row = attn[gr * 8 + gc]
            brightest = np.flatnonzero(heat == heat.max())
            assert heat.max() == 255
            assert brightest.tolist() == [int(np.argmax(row))]
