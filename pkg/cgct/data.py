import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from tenacity import retry, retry_if_exception, stop_after_attempt, wait_fixed

from .errors import ConfigurationError, ContractViolation, DatasetError

logger = logging.getLogger(__name__)

# Silence PIL's per-file plugin chatter, it floods DEBUG runs
logging.getLogger("PIL").setLevel(logging.WARNING)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")
SOURCE_DOMAIN_ID = 0


@dataclass(frozen=True, eq=False)
class Sample:
    """
    One input with its optional class label and domain identity.

    Args:
        features (np.ndarray): Feature vector of dimension d, or a channels-first image array.
        label (int, optional): Class id in [0, n_c), None for raw target samples.
        domain_id (int): Domain the sample was drawn from.
        uid (str): Identifier unique within a task.
    """

    features: np.ndarray
    label: Optional[int]
    domain_id: int
    uid: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError(f"Sample {self.uid} has non-finite features")
        self.features.setflags(write=False)

    @property
    def is_labeled(self) -> bool:
        return self.label is not None

    def with_label(self, label: Optional[int]) -> "Sample":
        return replace(self, label=label)


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """An ordered, immutable collection of samples sharing one domain id."""

    name: str
    domain_id: int
    samples: Tuple[Sample, ...]
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.samples:
            raise DatasetError(f"Domain '{self.name}' has no samples")
        foreign = [s.uid for s in self.samples if s.domain_id != self.domain_id]
        if foreign:
            raise DatasetError(
                f"Domain '{self.name}' holds samples of another domain: {foreign[:3]}"
            )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def is_labeled(self) -> bool:
        return all(s.is_labeled for s in self.samples)

    def unlabeled(self) -> "DomainDataset":
        """Returns a copy of the dataset with every label stripped."""
        return replace(self, samples=tuple(s.with_label(None) for s in self.samples))


@dataclass(frozen=True, eq=False)
class MTDATask:
    """
    One labeled source domain, N unlabeled target domains and labeled evaluation splits.

    Args:
        source (DomainDataset): Labeled source training split.
        targets (tuple): Unlabeled target training splits, one per target domain.
        n_c (int): Number of classes, shared by every domain.
        held_out_eval (dict): Labeled evaluation split per domain id.
    """

    source: DomainDataset
    targets: Tuple[DomainDataset, ...]
    n_c: int
    held_out_eval: Dict[int, DomainDataset] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets:
            raise ConfigurationError("A task needs at least one target domain")
        if self.n_c < 2:
            raise ConfigurationError(f"n_c must be >= 2, got {self.n_c}")
        ids = [self.source.domain_id] + [t.domain_id for t in self.targets]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"Domain ids must be distinct, got {ids}")
        if not self.source.is_labeled:
            raise ConfigurationError("Every source sample must carry a label")
        for target in self.targets:
            if any(s.is_labeled for s in target):
                raise ConfigurationError(
                    f"Target domain '{target.name}' training split must be unlabeled"
                )
        for dataset in [self.source, *self.held_out_eval.values()]:
            bad = [s.uid for s in dataset if s.is_labeled and not 0 <= s.label < self.n_c]
            if bad:
                raise ConfigurationError(f"Labels outside [0, {self.n_c}): {bad[:3]}")

        train_uids: List[str] = [s.uid for d in self.domains for s in d]
        if len(set(train_uids)) != len(train_uids):
            raise ConfigurationError("Sample uids must be unique within a task")
        eval_uids = {s.uid for d in self.held_out_eval.values() for s in d}
        if eval_uids.intersection(train_uids):
            raise ConfigurationError("Evaluation splits overlap the training splits")

    @property
    def domains(self) -> Tuple[DomainDataset, ...]:
        return (self.source, *self.targets)

    @property
    def target_ids(self) -> Tuple[int, ...]:
        return tuple(t.domain_id for t in self.targets)

    def target(self, domain_id: int) -> DomainDataset:
        for target in self.targets:
            if target.domain_id == domain_id:
                return target
        raise DatasetError(f"No target domain with id {domain_id}")

    def domain_name(self, domain_id: int) -> str:
        for dataset in self.domains:
            if dataset.domain_id == domain_id:
                return dataset.name
        raise DatasetError(f"No domain with id {domain_id}")


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Parameters of a synthetic Gaussian-blob task with controllable domain shift.

    The source class centroids sit evenly spaced on a circle of radius
    ``class_separation`` inside one random 2-plane (the class plane); every
    other dimension carries noise only. Target domain j rotates the centroids
    by ``shift_magnitudes[j]`` radians inside the class plane, so the shift
    moves every class towards its neighbour's decision region, then translates
    them by ``shift_magnitudes[j] * translation_scale`` along one random
    direction orthogonal to the class plane. The plane and direction are
    shared by all targets, so the targets lie on a path away from the source
    ordered by magnitude. A rotation of pi / n_c puts a class on the source
    decision boundary.
    """

    n_c: int = 4
    d: int = 16
    samples_per_class_per_domain: int = 100
    shift_magnitudes: Tuple[float, ...] = (0.2, 0.6, 0.9)
    noise_scale: float = 1.0
    seed: int = 0
    eval_samples_per_class: int = 50
    class_separation: float = 3.0
    translation_scale: float = 0.5

    def validate(self) -> None:
        if self.n_c < 2:
            raise ConfigurationError(f"n_c must be >= 2, got {self.n_c}")
        if self.d < 2:
            raise ConfigurationError(f"d must be >= 2, got {self.d}")
        if self.samples_per_class_per_domain < 1 or self.eval_samples_per_class < 1:
            raise ConfigurationError("Every class needs at least one sample per split")
        if not self.shift_magnitudes:
            raise ConfigurationError("At least one target shift magnitude is required")
        if any(not 0 <= m <= np.pi for m in self.shift_magnitudes):
            raise ConfigurationError(
                f"Shift magnitudes must be rotation angles in [0, pi], got {list(self.shift_magnitudes)}"
            )
        if self.noise_scale < 0 or self.class_separation <= 0 or self.translation_scale < 0:
            raise ConfigurationError("Noise, separation and translation scales must be >= 0")

    @property
    def hardness_ranking(self) -> Tuple[int, ...]:
        """Target indices from the smallest shift to the largest (stable on ties)."""
        return tuple(int(i) for i in np.argsort(self.shift_magnitudes, kind="stable"))


def circle_centroids(n_c: int, radius: float, plane: np.ndarray, phase: float = 0.0) -> np.ndarray:
    """(n_c, d) centroids evenly spaced on a circle of `radius` inside `plane`."""
    angles = phase + 2 * np.pi * np.arange(n_c) / n_c
    return radius * (np.outer(np.cos(angles), plane[:, 0]) + np.outer(np.sin(angles), plane[:, 1]))


def shift_centroids(
    centroids: np.ndarray,
    magnitude: float,
    plane: np.ndarray,
    direction: np.ndarray,
    translation_scale: float,
) -> np.ndarray:
    """
    Rotates centroids by `magnitude` radians inside `plane` and translates them.

    Args:
        centroids (np.ndarray): (n_c, d) class centroids.
        magnitude (float): Rotation angle, also scales the translation.
        plane (np.ndarray): (d, 2) orthonormal basis of the rotation plane.
        direction (np.ndarray): Unit translation direction of dimension d.
        translation_scale (float): Translation norm per unit of magnitude.

    Returns:
        np.ndarray: Shifted (n_c, d) centroids.
    """
    u, w = plane[:, 0], plane[:, 1]
    a, b = centroids @ u, centroids @ w
    cos, sin = np.cos(magnitude), np.sin(magnitude)
    rotated = (
        centroids
        + np.outer(a * cos - b * sin - a, u)
        + np.outer(a * sin + b * cos - b, w)
    )
    return rotated + magnitude * translation_scale * direction


def _sample_blobs(
    name: str,
    domain_id: int,
    split: str,
    centroids: np.ndarray,
    per_class: int,
    noise_scale: float,
    rng: np.random.Generator,
    labeled: bool,
) -> DomainDataset:
    n_c, d = centroids.shape
    labels = rng.permutation(np.repeat(np.arange(n_c), per_class))
    features = centroids[labels] + rng.normal(scale=noise_scale, size=(len(labels), d))
    features = features.astype(np.float32)
    samples = [
        Sample(
            features=features[i],
            label=int(labels[i]) if labeled else None,
            domain_id=domain_id,
            uid=f"{name}:{split}:{i:05d}",
        )
        for i in range(len(labels))
    ]
    return DomainDataset(name, domain_id, samples, tuple(str(c) for c in range(n_c)))


def generate_synthetic_task(spec: SyntheticSpec) -> MTDATask:
    """
    Builds a deterministic multi-target task from Gaussian class blobs.

    Args:
        spec (SyntheticSpec): Generator parameters.

    Returns:
        MTDATask: Labeled source, unlabeled shifted targets and labeled evaluation
        splits for every domain (source included).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    basis, _ = np.linalg.qr(rng.normal(size=(spec.d, spec.d)))
    plane = basis[:, :2]
    centroids = circle_centroids(spec.n_c, spec.class_separation, plane, rng.uniform(0.0, 2 * np.pi))
    # the translation leaves the class plane untouched
    direction = basis[:, 2] if spec.d > 2 else np.zeros(spec.d)

    def blobs(name, domain_id, split, domain_centroids, per_class, labeled):
        return _sample_blobs(
            name, domain_id, split, domain_centroids, per_class, spec.noise_scale, rng, labeled
        )

    source = blobs("source", SOURCE_DOMAIN_ID, "train", centroids,
                   spec.samples_per_class_per_domain, True)
    held_out = {
        SOURCE_DOMAIN_ID: blobs("source", SOURCE_DOMAIN_ID, "eval", centroids,
                                spec.eval_samples_per_class, True)
    }
    targets = []
    for j, magnitude in enumerate(spec.shift_magnitudes):
        domain_id = j + 1
        name = f"target_{j}"
        shifted = shift_centroids(centroids, magnitude, plane, direction, spec.translation_scale)
        targets.append(
            blobs(name, domain_id, "train", shifted, spec.samples_per_class_per_domain, False)
        )
        held_out[domain_id] = blobs(
            name, domain_id, "eval", shifted, spec.eval_samples_per_class, True
        )
    logger.debug(
        "Generated synthetic task: n_c=%d d=%d shifts=%s seed=%d",
        spec.n_c, spec.d, list(spec.shift_magnitudes), spec.seed,
    )
    return MTDATask(source=source, targets=tuple(targets), n_c=spec.n_c, held_out_eval=held_out)


def _is_transient_io_error(error: BaseException) -> bool:
    return isinstance(error, OSError) and not isinstance(error, UnidentifiedImageError)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_fixed(0.2),
    retry=retry_if_exception(_is_transient_io_error),
    reraise=True,
)
def _read_image(path: str, image_size: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if image_size:
            img = img.resize((image_size, image_size), Image.Resampling.BILINEAR)
        pixels = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def load_image_folder(
    path: str,
    domain_id: int = SOURCE_DOMAIN_ID,
    name: Optional[str] = None,
    image_size: Optional[int] = None,
) -> DomainDataset:
    """
    Loads one domain from disk.

    A folder holding one subdirectory per class (``<domain>/<class>/<file>``) gives a
    labeled domain whose label ids follow the sorted class directory names. A flat
    folder (``<domain>/<file>``) gives an unlabeled domain. Images are decoded to
    channels-first RGB arrays scaled to [0, 1].

    Args:
        path (str): Domain directory.
        domain_id (int): Domain id assigned to every sample.
        name (str, optional): Domain name, defaults to the directory name.
        image_size (int, optional): Resize every image to a square of this side.

    Returns:
        DomainDataset: The decoded samples in sorted path order.
    """
    if not os.path.isdir(path):
        raise DatasetError(f"Domain folder not found: {path}")
    name = name or os.path.basename(os.path.normpath(path))
    entries = sorted(os.listdir(path))
    class_names = [e for e in entries if os.path.isdir(os.path.join(path, e))]

    items: List[Tuple[str, Optional[int]]] = []
    if class_names:
        for label, class_name in enumerate(class_names):
            class_dir = os.path.join(path, class_name)
            for filename in sorted(os.listdir(class_dir)):
                items.append((os.path.join(class_name, filename), label))
    else:
        items = [(e, None) for e in entries]

    samples = []
    for relative, label in items:
        if not relative.lower().endswith(IMAGE_EXTENSIONS):
            continue
        try:
            pixels = _read_image(os.path.join(path, relative), image_size)
        except OSError as e:
            logger.warning("Skipping unreadable image %s: %s", os.path.join(path, relative), e)
            continue
        uid = f"{name}/{relative.replace(os.sep, '/')}"
        samples.append(Sample(pixels, label, domain_id, uid))

    if not samples:
        raise DatasetError(f"No readable images in {path}")
    logger.info("Loaded %d images from %s (%d classes)", len(samples), path, len(class_names))
    return DomainDataset(name, domain_id, samples, tuple(class_names))


def split_dataset(
    dataset: DomainDataset, eval_fraction: float, rng: np.random.Generator
) -> Tuple[DomainDataset, DomainDataset]:
    """
    Splits a labeled domain into training and evaluation parts.

    Args:
        dataset (DomainDataset): Domain to split.
        eval_fraction (float): Share of samples kept for evaluation, in (0, 1).
        rng (np.random.Generator): Source of the split permutation.

    Returns:
        tuple: (training split, evaluation split), each keeping the original order.
    """
    if not 0 < eval_fraction < 1:
        raise ConfigurationError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    n_eval = max(1, int(round(len(dataset) * eval_fraction)))
    if n_eval >= len(dataset):
        raise DatasetError(f"Domain '{dataset.name}' is too small to split")
    eval_idx = set(rng.permutation(len(dataset))[:n_eval].tolist())
    train = [s for i, s in enumerate(dataset.samples) if i not in eval_idx]
    held = [s for i, s in enumerate(dataset.samples) if i in eval_idx]
    return replace(dataset, samples=tuple(train)), replace(dataset, samples=tuple(held))


def build_folder_task(
    root: str,
    source: str,
    targets: Sequence[str],
    eval_fraction: float = 0.2,
    seed: int = 0,
    image_size: Optional[int] = None,
) -> MTDATask:
    """
    Builds a task from ``<root>/<domain>`` image folders.

    The source folder must be labeled. Labeled target folders are split into an
    unlabeled training part and a labeled evaluation part; flat target folders
    become training data only.

    Args:
        root (str): Directory holding one folder per domain.
        source (str): Name of the source domain folder.
        targets (list): Names of the target domain folders, in domain id order.
        eval_fraction (float): Share of each labeled domain held out for evaluation.
        seed (int): Seed of the split permutation.
        image_size (int, optional): Square resize applied to every image.

    Returns:
        MTDATask: The assembled task.
    """
    rng = np.random.default_rng(seed)
    source_all = load_image_folder(os.path.join(root, source), SOURCE_DOMAIN_ID, source, image_size)
    if not source_all.is_labeled:
        raise ConfigurationError(f"Source domain '{source}' must have class subdirectories")
    source_train, source_eval = split_dataset(source_all, eval_fraction, rng)
    held_out = {SOURCE_DOMAIN_ID: source_eval}

    target_sets = []
    for j, target_name in enumerate(targets):
        domain_id = j + 1
        loaded = load_image_folder(os.path.join(root, target_name), domain_id, target_name, image_size)
        if loaded.is_labeled:
            if loaded.class_names != source_all.class_names:
                raise ConfigurationError(
                    f"Target '{target_name}' classes {loaded.class_names} differ from "
                    f"source classes {source_all.class_names}"
                )
            train, held = split_dataset(loaded, eval_fraction, rng)
            held_out[domain_id] = held
            target_sets.append(train.unlabeled())
        else:
            target_sets.append(loaded)
    return MTDATask(
        source=source_train,
        targets=tuple(target_sets),
        n_c=len(source_all.class_names),
        held_out_eval=held_out,
    )


@dataclass(frozen=True)
class MiniBatch:
    """B samples from the pseudo-source set paired with B samples from the target pool."""

    source_half: Tuple[Sample, ...]
    target_half: Tuple[Sample, ...]

    def __post_init__(self):
        if len(self.source_half) != len(self.target_half):
            raise ContractViolation("Both halves of a mini-batch must have the same size")
        if not all(s.is_labeled for s in self.source_half):
            raise ContractViolation("Every source-half sample must carry a label")

    @property
    def size(self) -> int:
        return len(self.source_half)

    @property
    def samples(self) -> Tuple[Sample, ...]:
        return self.source_half + self.target_half


def stack_features(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.features for s in samples])


class EpochSampler:
    """
    Draws samples from one pool, reshuffling at the start of every epoch.

    A pool smaller than the requested draw falls back to sampling with
    replacement and logs a warning once.
    """

    def __init__(self, pool: Sequence[Sample], rng: np.random.Generator, name: str = "pool"):
        if not pool:
            raise DatasetError(f"Cannot sample from an empty {name}")
        self.pool = tuple(pool)
        self.rng = rng
        self.name = name
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self._warned = False

    def draw(self, count: int) -> List[Sample]:
        if len(self.pool) < count:
            if not self._warned:
                logger.warning(
                    "%s has %d samples, fewer than %d: sampling with replacement",
                    self.name, len(self.pool), count,
                )
                self._warned = True
            return [self.pool[i] for i in self.rng.integers(0, len(self.pool), size=count)]

        drawn: List[Sample] = []
        while len(drawn) < count:
            if self._cursor >= len(self._order):
                self._order = self.rng.permutation(len(self.pool))
                self._cursor = 0
            take = min(count - len(drawn), len(self._order) - self._cursor)
            drawn.extend(self.pool[i] for i in self._order[self._cursor:self._cursor + take])
            self._cursor += take
        return drawn


class PairedBatchSampler:
    """
    Produces mini-batches pairing the pseudo-source set with the active target pool.

    Args:
        pseudo_source (list): Labeled samples (ground truth or pseudo-labels).
        target_pool (list): Target samples of the active pool.
        batch_size (int): B, the size of each half; at least 2.
        rng (np.random.Generator): The sampler's own random stream.
        stratify_targets (bool): Fill the target half round-robin across domains
            instead of drawing from the combined pool.
    """

    def __init__(
        self,
        pseudo_source: Sequence[Sample],
        target_pool: Sequence[Sample],
        batch_size: int,
        rng: np.random.Generator,
        stratify_targets: bool = False,
    ):
        if batch_size < 2:
            raise ConfigurationError(f"Batch size must be >= 2, got {batch_size}")
        if not all(s.is_labeled for s in pseudo_source):
            raise ContractViolation("The pseudo-source set must be fully labeled")
        if not target_pool:
            raise DatasetError("Cannot sample from an empty target pool")
        self.batch_size = batch_size
        self._source = EpochSampler(pseudo_source, rng, "pseudo-source set")
        if stratify_targets:
            by_domain: Dict[int, List[Sample]] = {}
            for s in target_pool:
                by_domain.setdefault(s.domain_id, []).append(s)
            self._targets = [
                EpochSampler(by_domain[d], rng, f"target domain {d}") for d in sorted(by_domain)
            ]
        else:
            self._targets = [EpochSampler(target_pool, rng, "target pool")]
        self._offset = 0

    def _target_counts(self) -> List[int]:
        k = len(self._targets)
        counts = [self.batch_size // k] * k
        for i in range(self.batch_size % k):
            counts[(self._offset + i) % k] += 1
        self._offset = (self._offset + self.batch_size % k) % k
        return counts

    def sample_minibatch(self) -> MiniBatch:
        source_half = self._source.draw(self.batch_size)
        target_half: List[Sample] = []
        for sampler, count in zip(self._targets, self._target_counts()):
            if count:
                target_half.extend(sampler.draw(count))
        return MiniBatch(tuple(source_half), tuple(target_half))
