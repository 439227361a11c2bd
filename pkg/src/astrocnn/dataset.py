"""Training patch pairs synthesized from clean images.

Each clean image is degraded once (blur plus noise with an image-specific
seed), then patch positions are drawn uniformly with replacement. An input
is a degraded 32x32 window; its target is the clean 14x14 window centered
under it, i.e. offset by (32 - 14) / 2 = 9 pixels.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .degrade import NoiseSpec, degrade
from .formats import FormatError, decode_imf1, encode_imf1
from .image import DTYPE, as_image


@dataclass(frozen=True)
class PatchPair:
    input: np.ndarray
    target: np.ndarray
    source_id: str
    top: int
    left: int


@dataclass
class PatchSet:
    """A stack of patch pairs stored as contiguous arrays."""

    inputs: np.ndarray  # (N, in, in)
    targets: np.ndarray  # (N, out, out)
    source_ids: np.ndarray  # (N,) of str
    tops: np.ndarray
    lefts: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, i: int) -> PatchPair:
        return PatchPair(self.inputs[i], self.targets[i], str(self.source_ids[i]),
                         int(self.tops[i]), int(self.lefts[i]))

    @property
    def offset(self) -> int:
        return (self.inputs.shape[1] - self.targets.shape[1]) // 2


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 100_000
    n_val: int = 50_000
    seed: int = 0
    excluded_image: str | None = None
    input_size: int = 32
    output_size: int = 14

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if (self.input_size - self.output_size) % 2:
            raise ValueError("input and output window sizes must differ by an even number")


def image_seed(seed: int, image_id: str) -> int:
    """Stable per-image seed derived from a run seed and the image name."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(image_id.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


def split_counts(total: int, n_images: int) -> list[int]:
    """Round-robin allocation of ``total`` samples over ``n_images``."""
    base, extra = divmod(total, n_images)
    return [base + (1 if k < extra else 0) for k in range(n_images)]


def _sample(clean, degraded, image_id, count, rng, spec) -> PatchSet:
    H, W = clean.shape
    n_in, n_out = spec.input_size, spec.output_size
    off = (n_in - n_out) // 2
    tops = rng.integers(0, H - n_in + 1, size=count)
    lefts = rng.integers(0, W - n_in + 1, size=count)
    in_win = sliding_window_view(degraded, (n_in, n_in))
    out_win = sliding_window_view(clean, (n_out, n_out))
    return PatchSet(
        inputs=np.ascontiguousarray(in_win[tops, lefts], dtype=DTYPE),
        targets=np.ascontiguousarray(out_win[tops + off, lefts + off], dtype=DTYPE),
        source_ids=np.full(count, image_id, dtype=object),
        tops=tops,
        lefts=lefts,
    )


def concat(sets: list[PatchSet]) -> PatchSet:
    return PatchSet(
        inputs=np.concatenate([s.inputs for s in sets]),
        targets=np.concatenate([s.targets for s in sets]),
        source_ids=np.concatenate([s.source_ids for s in sets]),
        tops=np.concatenate([s.tops for s in sets]),
        lefts=np.concatenate([s.lefts for s in sets]),
    )


def build_dataset(corpus: dict[str, np.ndarray], psf, noise: NoiseSpec,
                  spec: DatasetSpec = DatasetSpec()) -> tuple[PatchSet, PatchSet]:
    """Build the training and validation patch sets.

    ``corpus`` maps image ids to clean images; ``spec.excluded_image`` is
    dropped before sampling (leave-one-image-out). Only ``noise.sigma`` is
    used: each image's noise seed comes from ``spec.seed`` and its id.
    Training and validation positions come from independent streams over
    the same images.
    """
    images = {k: as_image(v) for k, v in corpus.items() if k != spec.excluded_image}
    if not images:
        raise ValueError(
            f"corpus is empty after excluding {spec.excluded_image!r}"
        )
    for name, img in images.items():
        if img.shape[0] < spec.input_size or img.shape[1] < spec.input_size:
            raise ValueError(
                f"image {name!r} is {img.shape[0]}x{img.shape[1]}, "
                f"smaller than the {spec.input_size}x{spec.input_size} input window"
            )
    names = list(images)
    degraded = {
        name: degrade(img, psf, NoiseSpec(noise.sigma, image_seed(spec.seed, name)))
        for name, img in images.items()
    }
    train_ss, val_ss = np.random.SeedSequence(spec.seed).spawn(2)
    out = []
    for total, ss in ((spec.n_train, train_ss), (spec.n_val, val_ss)):
        rng = np.random.default_rng(ss)
        parts = [
            _sample(images[name], degraded[name], name, count, rng, spec)
            for name, count in zip(names, split_counts(total, len(names)))
            if count > 0
        ]
        out.append(concat(parts))
    return out[0], out[1]


# ---------------------------------------------------------------- cache

_CACHE_MAGIC = b"APS1"


def save_patchset(ps: PatchSet, path) -> None:
    """Index header (one line per pair) followed by IMF1 input/target blocks."""
    lines = [b"APS1 %d\n" % len(ps)]
    for sid, top, left in zip(ps.source_ids, ps.tops, ps.lefts):
        sid = str(sid)
        if any(c.isspace() for c in sid):
            raise ValueError(f"image id {sid!r} contains whitespace")
        lines.append(b"%s %d %d\n" % (sid.encode(), top, left))
    with open(path, "wb") as fh:
        fh.write(b"".join(lines))
        for x, t in zip(ps.inputs, ps.targets):
            fh.write(encode_imf1(x))
            fh.write(encode_imf1(t))


def load_patchset(path) -> PatchSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CACHE_MAGIC:
        raise FormatError(f"bad magic: expected b'APS1', found {blob[:4]!r}")
    nl = blob.find(b"\n")
    try:
        count = int(blob[5:nl])
    except ValueError:
        raise FormatError("malformed patch-set header") from None
    pos = nl + 1
    ids, tops, lefts = [], [], []
    for _ in range(count):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated patch-set index")
        sid, top, left = blob[pos:end].split()
        ids.append(sid.decode())
        tops.append(int(top))
        lefts.append(int(left))
        pos = end + 1
    inputs, targets = [], []
    for _ in range(count):
        x, pos = decode_imf1(blob, pos)
        t, pos = decode_imf1(blob, pos)
        inputs.append(x)
        targets.append(t)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes in patch-set file")
    return PatchSet(
        inputs=np.stack(inputs) if inputs else np.zeros((0, 32, 32), DTYPE),
        targets=np.stack(targets) if targets else np.zeros((0, 14, 14), DTYPE),
        source_ids=np.array(ids, dtype=object),
        tops=np.array(tops, dtype=np.int64),
        lefts=np.array(lefts, dtype=np.int64),
    )
