"""MNIST ingestion, downsampling and minimum-residue digit classification.

IDX files are big-endian: a 4-byte magic (2051 for images, 2049 for labels),
4-byte dimension sizes, then one unsigned byte per pixel or label.
"""

from __future__ import annotations

import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import structlog
from numpy.typing import NDArray

from app.exceptions import (
    IdxConsistencyError,
    IdxFormatError,
    IdxTruncatedError,
    InvalidConfigError,
)
from app.schemas.config import CloudConfig, CodingConfig, ExperimentConfig, KsvdConfig
from app.services.cloud_ksvd import cloud_ksvd_run
from app.services.dictionary_learning import Dictionary, run_ksvd, run_local_ksvd
from app.services.linalg import FloatArray, l2_norm
from app.services.network import gen_erdos_renyi_connected, local_degree_weights
from app.services.seeding import STREAM_SPLIT, stream
from app.services.site_pool import SerialSitePool, SitePool
from app.services.sparse_coding import encode_batch

logger = structlog.get_logger()

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
IMAGE_SIDE = 28
TARGET_SIDE = 16
TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"


@dataclass(frozen=True)
class MnistSet:
    """Images as rows of gray values in ``[0, 1]`` with their digit labels."""

    images: FloatArray
    labels: NDArray[np.uint8]
    rows: int
    cols: int
    images_path: Path
    labels_path: Path


def _read_idx(path: Path, magic: int, n_dims: int) -> tuple[list[int], bytes]:
    data = path.read_bytes()
    header_size = 4 * (1 + n_dims)
    if len(data) < 4:
        msg = f"{path}: file too short for an IDX header"
        raise IdxTruncatedError(msg)
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        msg = f"{path}: magic {found}, expected {magic}"
        raise IdxFormatError(msg)
    if len(data) < header_size:
        msg = f"{path}: header truncated"
        raise IdxTruncatedError(msg)
    dims = list(struct.unpack_from(f">{n_dims}I", data, 4))
    payload = data[header_size:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        msg = f"{path}: {len(payload)} payload bytes, header declares {expected}"
        raise IdxTruncatedError(msg)
    return dims, payload[:expected]


def load_mnist_idx(images_path: Path, labels_path: Path) -> MnistSet:
    """Parse an IDX image file and its label file.

    Raises:
        IdxFormatError: On a wrong magic number.
        IdxConsistencyError: If the image and label counts differ.
        IdxTruncatedError: If a file ends before its declared payload.
    """
    (count, rows, cols), pixels = _read_idx(Path(images_path), IMAGE_MAGIC, 3)
    (label_count,), label_bytes = _read_idx(Path(labels_path), LABEL_MAGIC, 1)
    if count != label_count:
        msg = f"{count} images but {label_count} labels"
        raise IdxConsistencyError(msg)

    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).copy()
    logger.info("mnist_loaded", images=count, rows=rows, cols=cols)
    return MnistSet(
        images=images,
        labels=labels,
        rows=rows,
        cols=cols,
        images_path=Path(images_path),
        labels_path=Path(labels_path),
    )


def bilinear_resize(image: FloatArray, side: int) -> FloatArray:
    """Resample a square image to ``side x side`` with corner-aligned bilinear weights."""
    src = image.shape[0]
    coords = np.linspace(0.0, src - 1.0, side)
    low = np.floor(coords).astype(np.intp)
    high = np.minimum(low + 1, src - 1)
    frac = coords - low
    left, right = (1.0 - frac)[None, :], frac[None, :]
    top = image[np.ix_(low, low)] * left + image[np.ix_(low, high)] * right
    bottom = image[np.ix_(high, low)] * left + image[np.ix_(high, high)] * right
    return np.asarray(top * (1.0 - frac)[:, None] + bottom * frac[:, None])


def downsample_28_to_16(image: FloatArray) -> FloatArray:
    """784-pixel image to a unit-norm 256-vector; an all-zero image stays zero."""
    pixels = np.asarray(image, dtype=np.float64).reshape(IMAGE_SIDE, IMAGE_SIDE)
    small = bilinear_resize(pixels, TARGET_SIDE).reshape(-1)
    norm = l2_norm(small)
    return small if norm == 0.0 else small / norm


def _stack(class_dicts: Sequence[Dictionary | FloatArray]) -> tuple[FloatArray, list[int]]:
    blocks = [d.atoms if isinstance(d, Dictionary) else np.asarray(d) for d in class_dicts]
    return np.concatenate(blocks, axis=1), [b.shape[1] for b in blocks]


def class_residues(
    Y: FloatArray, class_dicts: Sequence[Dictionary | FloatArray], sparsity: int
) -> FloatArray:
    """``r_c = ||y - D_c x_c||_2`` per class (rows) and sample (columns).

    Each sample is coded once against the concatenated dictionaries and the
    code is split by class.
    """
    D, widths = _stack(class_dicts)
    X = encode_batch(Y, D, CodingConfig(sparsity=sparsity)).codes
    bounds = np.cumsum((0, *widths))
    residues = np.zeros((len(widths), Y.shape[1]))
    for c in range(len(widths)):
        part = Y - D[:, bounds[c] : bounds[c + 1]] @ X[bounds[c] : bounds[c + 1]]
        residues[c] = np.sqrt(np.sum(part * part, axis=0))
    return residues


def classify_batch(
    Y: FloatArray, class_dicts: Sequence[Dictionary | FloatArray], sparsity: int
) -> NDArray[np.intp]:
    """Minimum-residue class index of every column; ties go to the lowest class."""
    return np.argmin(class_residues(Y, class_dicts, sparsity), axis=0).astype(np.intp)


def classify_min_residue(
    y: FloatArray, class_dicts: Sequence[Dictionary | FloatArray], sparsity: int
) -> int:
    return int(classify_batch(np.asarray(y).reshape(-1, 1), class_dicts, sparsity)[0])


@dataclass(frozen=True)
class DetectionRate:
    split: int
    method: str
    digit: int
    rate: float


def _split_indices(
    labels: NDArray[np.uint8],
    digits: Sequence[int],
    n_train: int,
    n_test: int,
    rng: np.random.Generator,
) -> tuple[list[NDArray[np.intp]], list[NDArray[np.intp]]]:
    train: list[NDArray[np.intp]] = []
    test: list[NDArray[np.intp]] = []
    for digit in digits:
        pool = np.flatnonzero(labels == digit)
        if pool.size < n_train + n_test:
            msg = f"digit {digit} has {pool.size} images, need {n_train + n_test}"
            raise InvalidConfigError(msg)
        pool = rng.permutation(pool)
        train.append(pool[:n_train])
        test.append(pool[n_train : n_train + n_test])
    return train, test


def _downsample_all(images: FloatArray) -> FloatArray:
    return np.stack([downsample_28_to_16(image) for image in images], axis=1)


def _rates(
    predicted: NDArray[np.intp], truth: NDArray[np.intp], n_classes: int
) -> list[float]:
    return [float(np.mean(predicted[truth == c] == c)) for c in range(n_classes)]


def default_mnist_paths(directory: Path) -> tuple[Path, Path]:
    """Training image and label files inside a directory holding the IDX files."""
    return directory / TRAIN_IMAGES, directory / TRAIN_LABELS


def run_mnist_pipeline(
    cfg: ExperimentConfig,
    *,
    data: MnistSet | None = None,
    pool: SitePool | None = None,
) -> list[DetectionRate]:
    """Per-class detection rates of centralized, cloud and local K-SVD dictionaries.

    For every split each digit's training images are spread equally over the
    sites; cloud classification uses the first site's dictionaries and the
    local method reports the worst and best site per digit.
    """
    pool = pool or SerialSitePool()
    if data is None:
        if cfg.mnist_images is None or cfg.mnist_labels is None:
            msg = "no MNIST files configured"
            raise InvalidConfigError(msg)
        data = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels)
    digits = list(cfg.digits)
    coding = CodingConfig(sparsity=cfg.sparsity)
    ksvd_cfg = KsvdConfig(
        n_atoms=cfg.atoms, dict_iters=cfg.dict_iters, seed=cfg.seed, coding=coding
    )
    cloud_cfg = CloudConfig(
        n_atoms=cfg.atoms,
        dict_iters=cfg.dict_iters,
        power_iters=cfg.power_iters,
        consensus_iters=cfg.consensus_iters,
        seed=cfg.seed,
        coding=coding,
    )
    W = local_degree_weights(gen_erdos_renyi_connected(cfg.sites, cfg.edge_prob, cfg.seed))

    rates: list[DetectionRate] = []
    for split in range(cfg.splits):
        rng = stream(cfg.seed, STREAM_SPLIT, split)
        train, test = _split_indices(
            data.labels, digits, cfg.train_per_class, cfg.test_per_class, rng
        )
        Y_test = _downsample_all(data.images[np.concatenate(test)])
        truth = np.repeat(np.arange(len(digits)), cfg.test_per_class)

        central: list[Dictionary] = []
        cloud: list[Dictionary] = []
        local: list[list[Dictionary]] = [[] for _ in range(cfg.sites)]
        for c, idx in enumerate(train):
            Y = _downsample_all(data.images[idx])
            sites = np.array_split(Y, cfg.sites, axis=1)
            central.append(run_ksvd(Y, ksvd_cfg)[0])
            site_dicts, _ = cloud_ksvd_run(sites, W, cloud_cfg, pool=pool)
            cloud.append(site_dicts[0])
            for i, (dictionary, _) in enumerate(run_local_ksvd(sites, ksvd_cfg, pool=pool)):
                local[i].append(dictionary)
            logger.info("mnist_class_trained", split=split, digit=digits[c])

        for method, dicts in (("centralized", central), ("cloud", cloud)):
            per_class = _rates(classify_batch(Y_test, dicts, cfg.sparsity), truth, len(digits))
            rates.extend(
                DetectionRate(split, method, digit, rate)
                for digit, rate in zip(digits, per_class, strict=True)
            )
        local_rates = np.array(
            [
                _rates(classify_batch(Y_test, dicts, cfg.sparsity), truth, len(digits))
                for dicts in local
            ]
        )
        for c, digit in enumerate(digits):
            rates.append(DetectionRate(split, "local_min", digit, float(local_rates[:, c].min())))
            rates.append(DetectionRate(split, "local_max", digit, float(local_rates[:, c].max())))
    return rates
