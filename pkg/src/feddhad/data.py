"""Synthetic classification data and non-IID partitioning across devices."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, StructuralError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=np.intp)
        if features.ndim != 2:
            raise StructuralError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise StructuralError("features and labels differ in length")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise StructuralError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    @classmethod
    def concat(cls, parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise DomainError("cannot concatenate zero datasets")
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].class_count,
        )


@dataclass(frozen=True)
class PartitionPlan:
    device_indices: list[np.ndarray]
    concentration: float

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.device_indices])


@dataclass(frozen=True)
class LabelDistribution:
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise StructuralError("a label distribution is a non-empty vector")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise DomainError(f"not a probability vector: {probs}")
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return self.probs.size


def generate_synthetic(
    class_count: int,
    dim: int,
    per_class_count: int,
    cluster_spread: float,
    seed: int,
    modes_per_class: int = 1,
) -> Dataset:
    """Gaussian mixture with unit-sphere component means.

    Each class owns ``modes_per_class`` components; samples pick one of
    their class's components uniformly.
    """
    if min(class_count, dim, per_class_count, modes_per_class) < 1:
        raise ConfigError("class_count, dim, per_class_count and modes_per_class must all be >= 1")
    if cluster_spread < 0:
        raise ConfigError("cluster_spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(class_count * modes_per_class, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(class_count), per_class_count)
    component = labels * modes_per_class
    if modes_per_class > 1:
        component = component + rng.integers(0, modes_per_class, labels.size)
    noise = rng.normal(size=(labels.size, dim))
    features = means[component] + cluster_spread * noise
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], class_count)


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.intp)
    short = total - counts.sum()
    if short > 0:
        # stable tie-break by index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    dataset: Dataset,
    device_count: int,
    concentration: float,
    seed: int,
) -> PartitionPlan:
    """Split each class across devices with proportions drawn from Dir(concentration).

    Devices left empty are repaired by taking one sample from the current
    largest device.
    """
    if device_count < 1:
        raise ConfigError("device_count must be >= 1")
    if not concentration > 0:
        raise ConfigError("Dirichlet concentration must be positive")
    if len(dataset) < device_count:
        raise ConfigError(f"{len(dataset)} samples cannot cover {device_count} devices")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(device_count)]
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        props = rng.dirichlet(np.full(device_count, concentration))
        if not np.all(np.isfinite(props)) or props.sum() <= 0:
            # tiny concentrations can underflow to an all-zero draw
            props = np.zeros(device_count)
            props[rng.integers(device_count)] = 1.0
        counts = _largest_remainder(members.size, props / props.sum())
        for k, part in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            buckets[k].extend(part.tolist())
    for k in range(device_count):
        if not buckets[k]:
            donor = max(range(device_count), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return PartitionPlan([np.array(sorted(b), dtype=np.intp) for b in buckets], concentration)


def label_distribution(dataset: Dataset, indices=None) -> LabelDistribution:
    labels = dataset.labels if indices is None else dataset.labels[np.asarray(indices, dtype=np.intp)]
    if labels.size == 0:
        raise DomainError("label distribution of an empty index set")
    counts = np.bincount(labels, minlength=dataset.class_count)
    return LabelDistribution(counts / labels.size)


def global_distribution(dists: list[LabelDistribution], sizes) -> LabelDistribution:
    """Sample-weighted mean of per-device distributions."""
    sizes = np.asarray(sizes, dtype=float)
    P = np.stack([d.probs for d in dists])
    mixed = sizes @ P / sizes.sum()
    return LabelDistribution(mixed / mixed.sum())


def server_splits(
    dataset: Dataset,
    balanced_per_class: int,
    validation_fraction: float,
    seed: int,
) -> tuple[Dataset, Dataset, Dataset]:
    """Carve a class-balanced set and a validation set off a dataset.

    Returns ``(balanced, validation, remainder)``; the three are disjoint
    and together cover the input. The validation size is
    ``round(validation_fraction * len(dataset))``, drawn after the
    balanced split.
    """
    if balanced_per_class < 0:
        raise ConfigError("balanced_per_class must be non-negative")
    if not 0 <= validation_fraction < 1:
        raise ConfigError("validation_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    taken = []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if members.size < balanced_per_class:
            raise ConfigError(
                f"class {c} has {members.size} samples, balanced split needs {balanced_per_class}"
            )
        taken.append(rng.choice(members, size=balanced_per_class, replace=False))
    balanced_idx = np.sort(np.concatenate(taken)) if taken else np.zeros(0, dtype=np.intp)
    rest = np.setdiff1d(np.arange(len(dataset)), balanced_idx)
    n_val = int(round(validation_fraction * len(dataset)))
    if n_val > rest.size:
        raise ConfigError("validation split larger than the remaining samples")
    val_idx = np.sort(rng.choice(rest, size=n_val, replace=False))
    remainder_idx = np.setdiff1d(rest, val_idx)
    return dataset.subset(balanced_idx), dataset.subset(val_idx), dataset.subset(remainder_idx)


def stratified_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off ``fraction`` of every class; returns ``(held_out, rest)``."""
    rng = np.random.default_rng(seed)
    held = []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        held.append(rng.choice(members, size=int(round(fraction * members.size)), replace=False))
    held_idx = np.sort(np.concatenate(held))
    return dataset.subset(held_idx), dataset.subset(np.setdiff1d(np.arange(len(dataset)), held_idx))


# File format: one JSON header line, then float32 LE features, then uint32 LE labels.


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    header = {
        "dim": dataset.dim,
        "class_count": dataset.class_count,
        "sample_count": len(dataset),
        "dtype": "f32-le",
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    blob += dataset.features.astype("<f4").tobytes()
    blob += dataset.labels.astype("<u4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise StructuralError(f"{path}: missing header line")
    header = json.loads(head)
    if header.get("dtype") != "f32-le":
        raise StructuralError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    n, dim = int(header["sample_count"]), int(header["dim"])
    expected = n * dim * 4 + n * 4
    if len(body) != expected:
        raise StructuralError(f"{path}: payload has {len(body)} bytes, expected {expected}")
    features = np.frombuffer(body, dtype="<f4", count=n * dim).reshape(n, dim)
    labels = np.frombuffer(body, dtype="<u4", offset=n * dim * 4, count=n)
    return Dataset(features.astype(float), labels.astype(np.intp), int(header["class_count"]))

