"""Per-image, per-method reconstruction benchmark with CSV export.

Each clean image is degraded once with a seed derived from the run seed
and the image id. Classical methods are tuned against the clean image;
network methods use a model trained without that image. Only the final
reconstruction call is timed.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .classical import RlParams, TvParams, WienerParams, autotune, deconvolve
from .cnn import CnnModel, TrainConfig, build_1cnn, build_3cnn, train
from .dataset import DatasetSpec, build_dataset, image_seed
from .degrade import NoiseSpec, degrade
from .image import as_image, psnr
from .predict import predict_image

log = logging.getLogger(__name__)

CLASSICAL_METHODS = ("wiener", "rl", "tv")
CNN_METHODS = ("cnn1", "cnn3")
ALL_METHODS = ("none",) + CLASSICAL_METHODS + CNN_METHODS
CSV_COLUMNS = ("image_id", "method", "psnr_db", "wall_time_s", "params")


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchRow:
    image_id: str
    method: str
    psnr_db: float
    wall_time_s: float
    params: str = ""


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def methods(self) -> list[str]:
        seen = []
        for row in self.rows:
            if row.method not in seen:
                seen.append(row.method)
        return seen

    def aggregates(self) -> dict[str, tuple[float, float]]:
        """Mean PSNR and mean wall time per method, in first-seen order."""
        out = {}
        for method in self.methods():
            sel = [r for r in self.rows if r.method == method]
            out[method] = (
                math.fsum(r.psnr_db for r in sel) / len(sel),
                math.fsum(r.wall_time_s for r in sel) / len(sel),
            )
        return out

    def mean_psnr(self, method: str) -> float:
        return self.aggregates()[method][0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            # repr keeps the shortest round-tripping decimal form of each float
            writer.writerow([r.image_id, r.method, repr(r.psnr_db), repr(r.wall_time_s), r.params])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BenchReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ValueError(f"expected CSV header {','.join(CSV_COLUMNS)}, got {header}")
        rows = []
        for line in reader:
            if len(line) != len(CSV_COLUMNS):
                raise ValueError(f"malformed CSV row {line}")
            rows.append(BenchRow(line[0], line[1], float(line[2]), float(line[3]), line[4]))
        return cls(rows)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, path) -> "BenchReport":
        with open(path, newline="") as fh:
            return cls.from_csv(fh.read())

    def summary(self) -> str:
        lines = [f"{'method':<8} {'mean PSNR (dB)':>15} {'mean time (s)':>14}"]
        for method, (p, t) in self.aggregates().items():
            lines.append(f"{method:<8} {p:>15.3f} {t:>14.4f}")
        return "\n".join(lines)


def _describe(params) -> str:
    if isinstance(params, WienerParams):
        return f"lam={params.lam:g}"
    if isinstance(params, RlParams):
        return f"iterations={params.iterations}"
    if isinstance(params, TvParams):
        return f"lam={params.lam:g};iterations={params.iterations}"
    return ""


def degrade_for_bench(clean, psf, noise: NoiseSpec, seed: int, image_id: str) -> np.ndarray:
    """The observation used for ``image_id``; same seed rule as dataset building."""
    return degrade(clean, psf, NoiseSpec(noise.sigma, image_seed(seed, image_id)))


def run_benchmark(corpus: dict[str, np.ndarray], psf, noise: NoiseSpec,
                  methods=ALL_METHODS, cnn_models: dict | None = None,
                  seed: int = 0) -> BenchReport:
    """Score every method on every image.

    ``cnn_models`` maps a network method name (``cnn1``/``cnn3``) to a dict
    from image id to the model trained without that image. A ``none`` row
    holding the degraded image's PSNR is always included.
    """
    methods = list(methods)
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; expected a subset of {', '.join(ALL_METHODS)}")
    if "none" not in methods:
        methods.insert(0, "none")
    cnn_models = cnn_models or {}
    for method in methods:
        if method in CNN_METHODS:
            missing = [k for k in corpus if k not in cnn_models.get(method, {})]
            if missing:
                raise BenchError(f"no {method} model for image(s) {', '.join(missing)}")

    report = BenchReport()
    for image_id, clean in corpus.items():
        clean = as_image(clean)
        observed = degrade_for_bench(clean, psf, noise, seed, image_id)
        for method in methods:
            if method == "none":
                row = BenchRow(image_id, method, psnr(clean, observed), 0.0, "")
            elif method in CLASSICAL_METHODS:
                tuned = autotune(method, observed, psf, clean)
                t0 = time.perf_counter()
                rec = deconvolve(method, observed, psf, tuned.params)
                elapsed = time.perf_counter() - t0
                row = BenchRow(image_id, method, psnr(clean, rec), elapsed, _describe(tuned.params))
            else:
                model = cnn_models[method][image_id]
                t0 = time.perf_counter()
                rec = predict_image(model, observed)
                elapsed = time.perf_counter() - t0
                row = BenchRow(image_id, method, psnr(clean, rec), elapsed,
                               f"n_params={model.n_params}")
            log.info("%s %s: %.3f dB in %.3fs", image_id, method, row.psnr_db, row.wall_time_s)
            report.rows.append(row)
    return report


def build_for_method(method: str, seed: int) -> CnnModel:
    if method == "cnn1":
        return build_1cnn(seed)
    if method == "cnn3":
        return build_3cnn(seed)
    raise ValueError(f"unknown network method {method!r}; expected cnn1 or cnn3")


def train_leave_one_out(corpus: dict[str, np.ndarray], psf, noise: NoiseSpec, method: str,
                        n_train: int = 100_000, n_val: int = 50_000,
                        cfg: TrainConfig = TrainConfig(), seed: int = 0) -> dict[str, CnnModel]:
    """One model per image, each trained on patches from the other images."""
    if len(corpus) < 2:
        raise ValueError("leave-one-out training needs at least two images")
    models = {}
    for image_id in corpus:
        spec = DatasetSpec(n_train, n_val, seed=seed, excluded_image=image_id)
        train_set, val_set = build_dataset(corpus, psf, noise, spec)
        log.info("training %s without %s", method, image_id)
        models[image_id], _ = train(build_for_method(method, seed), train_set, val_set, cfg)
    return models
