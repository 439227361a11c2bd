import math

import numpy as np
import pytest

from astrocnn.bench import (
    BenchError,
    BenchReport,
    BenchRow,
    degrade_for_bench,
    run_benchmark,
    train_leave_one_out,
)
from astrocnn.cnn import CnnModel, ConvLayer, TrainConfig, build_1cnn
from astrocnn.corpus import synthetic_sky
from astrocnn.degrade import NoiseSpec
from astrocnn.image import psnr
from astrocnn.psf import airy_kernel


@pytest.fixture(scope="module")
def setup():
    corpus = {f"s{k}": synthetic_sky(48, seed=k, n_stars=6) for k in range(2)}
    return corpus, airy_kernel(16, 3.0), NoiseSpec(0.01)


def delta_model():
    w = np.zeros((1, 1, 19, 19), np.float32)
    w[0, 0, 9, 9] = 1.0
    return CnnModel([ConvLayer(w, np.zeros(1, np.float32), relu=False)])


@pytest.fixture(scope="module")
def report(setup):
    corpus, psf, noise = setup
    models = {"cnn1": {k: delta_model() for k in corpus}}
    return run_benchmark(corpus, psf, noise, ("wiener", "rl", "cnn1"), models, seed=3)


def test_every_pair_once(report, setup):
    corpus, _, _ = setup
    pairs = [(r.image_id, r.method) for r in report.rows]
    assert len(pairs) == len(set(pairs)) == len(corpus) * 4
    assert report.methods() == ["none", "wiener", "rl", "cnn1"]


def test_none_row_is_degraded_psnr(report, setup):
    corpus, psf, noise = setup
    for r in report.rows:
        if r.method == "none":
            observed = degrade_for_bench(corpus[r.image_id], psf, noise, 3, r.image_id)
            assert r.psnr_db == psnr(corpus[r.image_id], observed)


def test_identity_network_scores_like_degraded(report):
    by = {(r.image_id, r.method): r.psnr_db for r in report.rows}
    for image_id in ("s0", "s1"):
        assert by[(image_id, "cnn1")] == pytest.approx(by[(image_id, "none")], abs=1e-4)


def test_aggregates_are_means(report):
    for method, (p, t) in report.aggregates().items():
        sel = [r for r in report.rows if r.method == method]
        assert abs(p - sum(r.psnr_db for r in sel) / len(sel)) < 1e-9
        assert abs(t - sum(r.wall_time_s for r in sel) / len(sel)) < 1e-9


def test_classical_rows_record_params(report):
    params = {r.method: r.params for r in report.rows}
    assert params["wiener"].startswith("lam=")
    assert params["rl"].startswith("iterations=")


def test_csv_roundtrip(report, tmp_path):
    path = tmp_path / "r.csv"
    report.write(path)
    assert path.read_text().splitlines()[0] == "image_id,method,psnr_db,wall_time_s,params"
    assert BenchReport.read(path) == report


def test_csv_roundtrip_awkward_values():
    rep = BenchReport([BenchRow("a,b", "tv", 1 / 3, 1e-7, "lam=0.01;iterations=100"),
                       BenchRow("c", "none", math.inf, 0.0, "")])
    assert BenchReport.from_csv(rep.to_csv()) == rep


def test_csv_bad_header():
    with pytest.raises(ValueError, match="header"):
        BenchReport.from_csv("a,b\n")


def test_missing_model(setup):
    corpus, psf, noise = setup
    with pytest.raises(BenchError, match="no cnn3 model"):
        run_benchmark(corpus, psf, noise, ("cnn3",), {"cnn3": {"s0": build_1cnn()}})


def test_unknown_method(setup):
    corpus, psf, noise = setup
    with pytest.raises(ValueError, match="unknown methods"):
        run_benchmark(corpus, psf, noise, ("magic",))


def test_deterministic_scores(setup):
    corpus, psf, noise = setup
    a = run_benchmark(corpus, psf, noise, ("wiener",), seed=1)
    b = run_benchmark(corpus, psf, noise, ("wiener",), seed=1)
    assert [r.psnr_db for r in a.rows] == [r.psnr_db for r in b.rows]


def test_leave_one_out_training(setup):
    corpus, psf, noise = setup
    models = train_leave_one_out(corpus, psf, noise, "cnn1", 40, 10,
                                 TrainConfig(max_epochs=1), seed=0)
    assert set(models) == set(corpus)
    assert all(m.n_params == 362 for m in models.values())
    with pytest.raises(ValueError):
        train_leave_one_out({"x": corpus["s0"]}, psf, noise, "cnn1")
