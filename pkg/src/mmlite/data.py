"""Deterministic synthetic image classification data and the dataset file format.

File layout, little-endian::

    b"MMDS" | u32 version | u32 N, C, H, W, num_classes | u32 n_train
    f32 images [N, C, H, W] | u16 labels [N]

The first ``n_train`` samples are the training split, the rest validation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"MMDS"
VERSION = 1
GENERATORS = ("gaussian-blobs-over-texture",)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    samples_per_class: int = 96
    resolution: tuple = (32, 32)
    channels: int = 3
    seed: int = 7
    generator: str = "gaussian-blobs-over-texture"
    train_fraction: float = 2 / 3
    blob_sigma: float = 0.12
    blob_amplitude: float = 1.0
    jitter: float = 0.12
    texture_amplitude: float = 1.0

    @property
    def val_fraction(self) -> float:
        return 1.0 - self.train_fraction

    def validate(self) -> "DatasetSpec":
        bad = []
        if self.num_classes < 1 or self.num_classes > 0xFFFF:
            bad.append("num_classes must be in [1, 65535]")
        if self.samples_per_class < 1:
            bad.append("samples_per_class must be >= 1")
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            bad.append("resolution must be (H, W) with positive sizes")
        if self.channels < 1:
            bad.append("channels must be >= 1")
        if self.generator not in GENERATORS:
            bad.append(f"unknown generator {self.generator!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            bad.append("train_fraction must be in (0, 1]")
        if bad:
            raise ContractError("; ".join(bad))
        return self


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] uint16
    num_classes: int
    n_train: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ContractError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if not 0 <= self.n_train <= len(self.labels):
            raise ContractError(f"n_train {self.n_train} outside [0, {len(self.labels)}]")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ContractError("label outside [0, num_classes)")

    def split(self, name: str):
        """``(images, labels)`` for ``train``, ``val`` or ``all``."""
        if name == "train":
            sl = slice(0, self.n_train)
        elif name == "val":
            sl = slice(self.n_train, None)
        elif name == "all":
            sl = slice(None)
        else:
            raise ContractError(f"unknown split {name!r}; expected train, val or all")
        return self.images[sl], self.labels[sl].astype(np.int64)

    @property
    def resolution(self) -> tuple:
        return tuple(self.images.shape[2:])

    @property
    def channels(self) -> int:
        return self.images.shape[1]


def _blob_centres(k: int) -> np.ndarray:
    """Class centres on a ring in unit image coordinates."""
    ang = 2 * np.pi * np.arange(k) / k
    return np.stack([0.5 + 0.3 * np.sin(ang), 0.5 + 0.3 * np.cos(ang)], axis=1)


def _texture(rng, C, H, W) -> np.ndarray:
    """Smooth random background: white noise low-passed in the frequency domain."""
    noise = rng.standard_normal((C, H, W))
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    lowpass = np.exp(-(fy ** 2 + fx ** 2) / (2 * 0.15 ** 2))
    tex = np.real(np.fft.ifft2(np.fft.fft2(noise) * lowpass))
    return tex / (tex.std() + 1e-12)


def synth_dataset(spec: DatasetSpec) -> Dataset:
    """Class-conditional gaussian blobs over a smooth noise texture.

    Each image is normalised to zero mean and unit variance. Samples are
    stratified: every class contributes the same count to each split.
    """
    spec.validate()
    H, W = spec.resolution
    C, K, n = spec.channels, spec.num_classes, spec.samples_per_class
    rng = np.random.default_rng(spec.seed)
    centres = _blob_centres(K)
    yy = (np.arange(H)[:, None] + 0.5) / H
    xx = (np.arange(W)[None, :] + 0.5) / W

    images = np.empty((K, n, C, H, W))
    for k in range(K):
        for i in range(n):
            cy, cx = centres[k] + rng.uniform(-spec.jitter, spec.jitter, size=2)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spec.blob_sigma ** 2))
            gain = spec.blob_amplitude * rng.uniform(0.7, 1.3, size=(C, 1, 1))
            img = spec.texture_amplitude * _texture(rng, C, H, W) + gain * blob * 3.0
            img -= img.mean()
            img /= img.std() + 1e-12
            images[k, i] = img

    n_tr = int(round(n * spec.train_fraction))
    order = []
    for part in (slice(0, n_tr), slice(n_tr, n)):
        block = [(k, i) for k in range(K) for i in range(n)[part]]
        perm = rng.permutation(len(block))
        order += [block[j] for j in perm]
    imgs = np.stack([images[k, i] for k, i in order]).astype(np.float32)
    labels = np.array([k for k, _ in order], dtype=np.uint16)
    return Dataset(imgs, labels, K, n_tr * K)


def dataset_bytes(ds: Dataset) -> bytes:
    N, C, H, W = ds.images.shape
    head = MAGIC + struct.pack("<7I", VERSION, N, C, H, W, ds.num_classes, ds.n_train)
    return head + ds.images.astype("<f4").tobytes() + ds.labels.astype("<u2").tobytes()


def write_dataset(ds: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(ds))
    return path


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("not a dataset file: bad magic", 0)
    if len(buf) < 32:
        raise FormatError("truncated dataset header", len(buf))
    version, N, C, H, W, K, n_train = struct.unpack("<7I", buf[4:32])
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    n_img = N * C * H * W * 4
    need = 32 + n_img + 2 * N
    if len(buf) != need:
        raise FormatError(f"dataset size mismatch: expected {need} bytes, found {len(buf)}", min(len(buf), need))
    if n_train > N:
        raise FormatError(f"n_train {n_train} exceeds N {N}", 28)
    images = np.frombuffer(buf, dtype="<f4", count=N * C * H * W, offset=32).reshape(N, C, H, W)
    labels = np.frombuffer(buf, dtype="<u2", count=N, offset=32 + n_img)
    if N and int(labels.max()) >= K:
        raise FormatError("label outside [0, num_classes)", 32 + n_img)
    if not np.all(np.isfinite(images)):
        raise FormatError("non-finite pixel values", 32)
    return Dataset(images.astype(np.float32), labels.astype(np.uint16), K, n_train)


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}", 0) from None
    return dataset_from_bytes(buf)


__all__ = ["Dataset", "DatasetSpec", "dataset_bytes", "dataset_from_bytes", "read_dataset", "synth_dataset",
           "write_dataset"]
