"""Multi-domain classification data: synthetic rotated-cluster generation,
IDX ingestion, deterministic batching, and interchange formats.

Domain ids are deliberately absent from the Batch interface. Training code
sees inputs, labels and sample ids only; evaluation and diagnostics code
reaches hidden domain ids through `DomainDataset.hidden_domains`.

File formats owned by this module:

* IDX (bit-exact): big-endian, magic 0x00000803 for image files and
  0x00000801 for label files, then one u32 per dimension, then raw bytes.
* Synthetic export: little-endian header {u32 version=1, u32 S, u32 n_c,
  u32 count}, then `count` rows of float32 features (the feature dimension
  is recovered from the file size), then `count` u8 labels, then `count`
  u8 domain ids. Label 0 / domain 0 mark unlabeled target rows.
* CSV manifest: one `path,label,domain` line per image for folder
  ingestion; an empty label field marks a target image.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

TARGET_DOMAIN_ID = 0
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTH_FORMAT_VERSION = 1

# Guard against corrupt IDX headers claiming absurd payloads (8 GiB).
_IDX_MAX_ELEMENTS = 1 << 33


class IdxMagicError(ValueError):
    """IDX file does not start with the expected magic number."""


class IdxTruncatedError(ValueError):
    """IDX file ends before the payload its header promises."""


class IdxDimensionError(ValueError):
    """IDX header declares dimensions outside the supported range."""


@dataclass(frozen=True)
class Sample:
    """One example. `y` is None for unlabeled target samples; `d` is the
    hidden domain id (0 for target) and must only be read by evaluation
    and diagnostics code."""

    x: np.ndarray
    y: int | None
    d: int


@dataclass(frozen=True)
class SyntheticConfig:
    """Rotated-cluster benchmark layout.

    `rotations_deg` has n_source_domains + 1 entries: one per source
    domain followed by the target domain's rotation.
    """

    n_source_domains: int
    n_classes: int
    samples_per_domain: int
    rotations_deg: tuple[float, ...]
    noise_std: float
    seed: int
    # Size of the labeled target hold-out used only for evaluation;
    # 0 means "same as samples_per_domain".
    test_samples: int = 0

    def resolved_test_samples(self) -> int:
        return self.test_samples if self.test_samples > 0 else self.samples_per_domain

    def validate(self) -> None:
        if self.n_source_domains < 2:
            raise ValueError("need at least 2 source domains")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.samples_per_domain <= 0:
            raise ValueError("samples_per_domain must be positive")
        if len(self.rotations_deg) != self.n_source_domains + 1:
            raise ValueError(
                f"rotations_deg needs {self.n_source_domains + 1} entries "
                f"(sources + target), got {len(self.rotations_deg)}"
            )
        if not np.isfinite(self.noise_std) or self.noise_std < 0:
            raise ValueError("noise_std must be finite and >= 0")


@dataclass
class DomainDataset:
    """Pooled multi-source training data plus the unlabeled target pool.

    Arrays are immutable after construction and safe to share across
    threads. `source_d` and the labeled `target_test_*` hold-out exist for
    evaluation/diagnostics only and are never exposed through batches.
    """

    source_x: np.ndarray  # [N_s, ...] float32
    source_y: np.ndarray  # [N_s] int64, raw label values
    source_d: np.ndarray  # [N_s] int64, hidden domain ids in {1..S}
    target_x: np.ndarray  # [N_t, ...] float32
    n_classes: int
    n_source_domains: int
    label_values: tuple[int, ...]  # sorted distinct labels; index = class
    target_test_x: np.ndarray | None = None
    target_test_y: np.ndarray | None = None

    def __post_init__(self) -> None:
        for a in (self.source_x, self.source_y, self.source_d, self.target_x):
            a.setflags(write=False)

    @property
    def n_source(self) -> int:
        return self.source_x.shape[0]

    @property
    def n_target(self) -> int:
        return self.target_x.shape[0]

    @property
    def source_pool(self) -> tuple[Sample, ...]:
        return tuple(
            Sample(self.source_x[i], int(self.source_y[i]), int(self.source_d[i]))
            for i in range(self.n_source)
        )

    @property
    def target_pool(self) -> tuple[Sample, ...]:
        return tuple(
            Sample(self.target_x[i], None, TARGET_DOMAIN_ID)
            for i in range(self.n_target)
        )

    def class_indices(self, labels: np.ndarray) -> np.ndarray:
        """Map raw label values to contiguous 0-based class indices."""
        lookup = {v: i for i, v in enumerate(self.label_values)}
        try:
            return np.array([lookup[int(v)] for v in labels], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"label {e.args[0]} not in dataset labels") from e

    def source_class_indices(self) -> np.ndarray:
        return self.class_indices(self.source_y)

    def hidden_domains(self, sample_ids: Sequence[int]) -> np.ndarray:
        """Diagnostics interface: hidden domain ids for source sample ids."""
        return self.source_d[np.asarray(sample_ids, dtype=np.int64)]


def _cluster_centers(n_classes: int, rotation_deg: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    angles = angles + np.deg2rad(rotation_deg)
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _balanced_class_counts(total: int, n_classes: int) -> np.ndarray:
    counts = np.full(n_classes, total // n_classes, dtype=np.int64)
    counts[: total % n_classes] += 1
    return counts


def _draw_domain(
    rng: np.random.Generator, cfg: SyntheticConfig, rotation_deg: float, count: int
) -> tuple[np.ndarray, np.ndarray]:
    centers = _cluster_centers(cfg.n_classes, rotation_deg)
    counts = _balanced_class_counts(count, cfg.n_classes)
    xs, ys = [], []
    for c in range(cfg.n_classes):
        noise = rng.standard_normal((counts[c], 2)) * cfg.noise_std
        xs.append(centers[c] + noise)
        ys.append(np.full(counts[c], c + 1, dtype=np.int64))  # labels are 1-based
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys)


def generate_synthetic(cfg: SyntheticConfig) -> DomainDataset:
    """Build the rotated-cluster dataset: every domain is the same n_c
    cluster layout on the unit circle rotated by its domain angle, so the
    angular distance to the target rotation is a controllable ground truth
    for transferability."""
    cfg.validate()
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_source_domains + 3)

    xs, ys, ds = [], [], []
    for d in range(cfg.n_source_domains):
        rng = np.random.default_rng(streams[d])
        x, y = _draw_domain(rng, cfg, cfg.rotations_deg[d], cfg.samples_per_domain)
        xs.append(x)
        ys.append(y)
        ds.append(np.full(cfg.samples_per_domain, d + 1, dtype=np.int64))
    source_x = np.concatenate(xs)
    source_y = np.concatenate(ys)
    source_d = np.concatenate(ds)

    # Concatenated sources are shuffled once so the pool carries no domain order.
    perm = np.random.default_rng(streams[-1]).permutation(source_x.shape[0])
    source_x, source_y, source_d = source_x[perm], source_y[perm], source_d[perm]

    target_rot = cfg.rotations_deg[-1]
    rng_t = np.random.default_rng(streams[cfg.n_source_domains])
    target_x, _ = _draw_domain(rng_t, cfg, target_rot, cfg.samples_per_domain)

    rng_tt = np.random.default_rng(streams[cfg.n_source_domains + 1])
    test_x, test_y = _draw_domain(rng_tt, cfg, target_rot, cfg.resolved_test_samples())

    return DomainDataset(
        source_x=source_x,
        source_y=source_y,
        source_d=source_d,
        target_x=target_x,
        n_classes=cfg.n_classes,
        n_source_domains=cfg.n_source_domains,
        label_values=tuple(range(1, cfg.n_classes + 1)),
        target_test_x=test_x,
        target_test_y=test_y,
    )


# ---------------------------------------------------------------------------
# IDX ingestion


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    magic = int.from_bytes(data[:4], "big")
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    total = 1
    for d in dims:
        total *= d
    if total > _IDX_MAX_ELEMENTS:
        raise IdxDimensionError(f"{path}: header claims {total} elements")
    if len(data) < header_len + total:
        raise IdxTruncatedError(
            f"{path}: payload has {len(data) - header_len} bytes, header claims {total}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=total, offset=header_len).reshape(dims)


@dataclass(frozen=True)
class DatasetFragment:
    """Images and labels for one domain, ready to assemble into a pool."""

    x: np.ndarray  # [N, 1, H, W] float32 in [0, 1]
    y: np.ndarray  # [N] int64, label values preserved from the file


def load_idx_dataset(images_path: str | Path, labels_path: str | Path) -> DatasetFragment:
    """Read an IDX image/label file pair. Pixels are scaled to [0, 1];
    label values are preserved as stored."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxDimensionError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return DatasetFragment(x=x, y=labels.astype(np.int64))


def assemble_domains(
    source_fragments: Sequence[DatasetFragment],
    target_fragment: DatasetFragment,
    seed: int,
    target_test: DatasetFragment | None = None,
    per_domain_cap: int = 0,
) -> DomainDataset:
    """Pool several labeled fragments into one multi-source dataset with the
    target fragment's labels dropped. `per_domain_cap` > 0 subsamples each
    fragment uniformly by seed before pooling."""
    streams = np.random.SeedSequence(seed).spawn(len(source_fragments) + 2)

    def _cap(frag: DatasetFragment, stream) -> DatasetFragment:
        if per_domain_cap <= 0 or frag.x.shape[0] <= per_domain_cap:
            return frag
        idx = np.random.default_rng(stream).permutation(frag.x.shape[0])[:per_domain_cap]
        return DatasetFragment(x=frag.x[idx], y=frag.y[idx])

    capped = [_cap(f, s) for f, s in zip(source_fragments, streams)]
    source_x = np.concatenate([f.x for f in capped])
    source_y = np.concatenate([f.y for f in capped])
    source_d = np.concatenate(
        [np.full(f.x.shape[0], i + 1, dtype=np.int64) for i, f in enumerate(capped)]
    )
    perm = np.random.default_rng(streams[-1]).permutation(source_x.shape[0])
    target = _cap(target_fragment, streams[-2])

    labels = tuple(sorted(int(v) for v in np.unique(source_y)))
    return DomainDataset(
        source_x=source_x[perm],
        source_y=source_y[perm],
        source_d=source_d[perm],
        target_x=target.x,
        n_classes=len(labels),
        n_source_domains=len(source_fragments),
        label_values=labels,
        target_test_x=None if target_test is None else target_test.x,
        target_test_y=None if target_test is None else target_test.y,
    )


# ---------------------------------------------------------------------------
# Batching


@dataclass(frozen=True)
class Batch:
    """One training batch. `source_y` holds 0-based class indices; ids
    resolve bijectively into the dataset pools."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    source_ids: np.ndarray
    target_ids: np.ndarray


class Batcher:
    """Deterministic batch stream over a DomainDataset.

    The batch at step t is a pure function of (dataset, sizes, seed, t):
    the source pool gets one permutation per epoch with the remainder
    dropped, and the target pool cycles through its own independently
    shuffled epochs. This makes resumption exact: `batch_at(t)` after a
    restart equals the uninterrupted stream.
    """

    def __init__(
        self, dataset: DomainDataset, batch_source: int, batch_target: int, seed: int
    ):
        if batch_source <= 0 or batch_target <= 0:
            raise ValueError("batch sizes must be positive")
        if batch_source > dataset.n_source or batch_target > dataset.n_target:
            raise ValueError("batch size exceeds pool size")
        self.dataset = dataset
        self.batch_source = batch_source
        self.batch_target = batch_target
        self.seed = seed
        self._source_classes = dataset.source_class_indices()

    @property
    def batches_per_epoch(self) -> int:
        return self.dataset.n_source // self.batch_source

    @property
    def target_batches_per_cycle(self) -> int:
        return self.dataset.n_target // self.batch_target

    def _perm(self, stream: int, epoch: int, n: int) -> np.ndarray:
        return np.random.default_rng([self.seed, stream, epoch]).permutation(n)

    def source_ids_at(self, t: int) -> np.ndarray:
        epoch, k = divmod(t, self.batches_per_epoch)
        perm = self._perm(0, epoch, self.dataset.n_source)
        return perm[k * self.batch_source : (k + 1) * self.batch_source]

    def target_ids_at(self, t: int) -> np.ndarray:
        cycle, k = divmod(t, self.target_batches_per_cycle)
        perm = self._perm(1, cycle, self.dataset.n_target)
        return perm[k * self.batch_target : (k + 1) * self.batch_target]

    def batch_at(self, t: int) -> Batch:
        sid = self.source_ids_at(t)
        tid = self.target_ids_at(t)
        return Batch(
            source_x=self.dataset.source_x[sid],
            source_y=self._source_classes[sid],
            target_x=self.dataset.target_x[tid],
            source_ids=sid,
            target_ids=tid,
        )

    def epoch(self, e: int) -> Iterator[Batch]:
        """Batches of one source epoch (remainder dropped)."""
        base = e * self.batches_per_epoch
        for k in range(self.batches_per_epoch):
            yield self.batch_at(base + k)

    def __iter__(self) -> Iterator[Batch]:
        t = 0
        while True:
            yield self.batch_at(t)
            t += 1


def make_batcher(
    dataset: DomainDataset, batch_source: int, batch_target: int, seed: int
) -> Batcher:
    return Batcher(dataset, batch_source, batch_target, seed)


# ---------------------------------------------------------------------------
# Synthetic interchange format


def save_synthetic(dataset: DomainDataset, path: str | Path) -> None:
    """Write the training pools (not the eval hold-out) in the binary
    interchange format documented in the module docstring."""
    count = dataset.n_source + dataset.n_target
    rows = np.concatenate(
        [
            dataset.source_x.reshape(dataset.n_source, -1),
            dataset.target_x.reshape(dataset.n_target, -1),
        ]
    ).astype("<f4")
    labels = np.concatenate(
        [dataset.source_y, np.zeros(dataset.n_target, dtype=np.int64)]
    ).astype(np.uint8)
    domains = np.concatenate(
        [dataset.source_d, np.zeros(dataset.n_target, dtype=np.int64)]
    ).astype(np.uint8)
    header = struct.pack(
        "<4I", SYNTH_FORMAT_VERSION, dataset.n_source_domains, dataset.n_classes, count
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(rows.tobytes())
        f.write(labels.tobytes())
        f.write(domains.tobytes())


def read_synthetic_header(path: str | Path) -> tuple[int, int, int, int]:
    with open(path, "rb") as f:
        raw = f.read(16)
    if len(raw) < 16:
        raise ValueError(f"{path}: too short for a synthetic-format header")
    return struct.unpack("<4I", raw)


def load_synthetic(path: str | Path) -> DomainDataset:
    version, n_domains, n_classes, count = read_synthetic_header(path)
    if version != SYNTH_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    payload = Path(path).read_bytes()[16:]
    # dim is implied: payload = count*dim*4 + 2*count bytes.
    if count == 0 or (len(payload) - 2 * count) % (4 * count) != 0:
        raise ValueError(f"{path}: payload size inconsistent with count={count}")
    dim = (len(payload) - 2 * count) // (4 * count)
    rows = np.frombuffer(payload, dtype="<f4", count=count * dim).reshape(count, dim)
    labels = np.frombuffer(payload, dtype=np.uint8, count=count, offset=count * dim * 4)
    domains = np.frombuffer(
        payload, dtype=np.uint8, count=count, offset=count * dim * 4 + count
    )
    is_source = domains != TARGET_DOMAIN_ID
    return DomainDataset(
        source_x=np.ascontiguousarray(rows[is_source], dtype=np.float32),
        source_y=labels[is_source].astype(np.int64),
        source_d=domains[is_source].astype(np.int64),
        target_x=np.ascontiguousarray(rows[~is_source], dtype=np.float32),
        n_classes=n_classes,
        n_source_domains=n_domains,
        label_values=tuple(range(1, n_classes + 1)),
    )


# ---------------------------------------------------------------------------
# CSV manifest ingestion


def load_manifest(path: str | Path, root: str | Path | None = None) -> DomainDataset:
    """Read a `path,label,domain` manifest and load the referenced images.
    Rows with an empty label form the target pool."""
    from PIL import Image

    base = Path(root) if root is not None else Path(path).parent
    src_rows: list[tuple[str, int, int]] = []
    tgt_rows: list[str] = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or not row[0].strip():
                continue
            p, label, domain = row[0].strip(), row[1].strip(), row[2].strip()
            if label:
                src_rows.append((p, int(label), int(domain)))
            else:
                tgt_rows.append(p)
    if not src_rows or not tgt_rows:
        raise ValueError("manifest needs at least one source and one target row")

    def _load(p: str) -> np.ndarray:
        img = np.asarray(Image.open(base / p), dtype=np.float32) / 255.0
        if img.ndim == 2:
            img = img[None, :, :]
        else:
            img = np.moveaxis(img, -1, 0)
        return img

    source_x = np.stack([_load(p) for p, _, _ in src_rows])
    source_y = np.array([y for _, y, _ in src_rows], dtype=np.int64)
    source_d = np.array([d for _, _, d in src_rows], dtype=np.int64)
    target_x = np.stack([_load(p) for p in tgt_rows])
    labels = tuple(sorted(int(v) for v in np.unique(source_y)))
    return DomainDataset(
        source_x=source_x,
        source_y=source_y,
        source_d=source_d,
        target_x=target_x,
        n_classes=len(labels),
        n_source_domains=int(source_d.max()),
        label_values=labels,
    )
