"""Procedural datasets, synthetic mixing, the equal-frequency sampler and augmentation.

The generator draws a hierarchical Gaussian mixture in a latent space:
super-class centers, per-class offsets around them, and isotropic noise.
Points are optionally pushed through a fixed random ``tanh`` network to make
the observed features non-linear in the latent structure. The pretraining
corpus is labelled by super-class; the downstream task labels each fine
class, so a pretrained encoder carries transferable but incomplete structure.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DimensionError, Tensor


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


class ParseError(ValueError):
    pass


ORIGINAL = "original"
SYNTHETIC = "synthetic"


@dataclass
class Sample:
    features: np.ndarray
    label: int | None
    provenance: str = ORIGINAL
    source_ids: tuple[int, int] | None = None


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DimensionError("features must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, K)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(x, int(y)) for x, y in zip(self.features, self.labels)]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, self.split)

    def take_per_class(self, n: int) -> "LabeledDataset":
        """First ``n`` samples of every class, in original order."""
        keep = np.concatenate([np.flatnonzero(self.labels == c)[:n] for c in range(self.num_classes)])
        return self.subset(np.sort(keep))


@dataclass
class TaskSplits:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


@dataclass
class TaskSpec:
    d_in: int = 64
    latent_dim: int = 8
    n_super: int = 4
    classes_per_super: int = 4
    train_per_class: int = 20
    val_per_class: int = 20
    test_per_class: int = 100
    pretrain_per_super: int = 3000
    # "super": corpus labelled by super-class; "disjoint-fine": labelled by
    # extra sub-clusters of the same super-classes, disjoint from the task classes
    pretrain_labels: str = "disjoint-fine"
    pretrain_classes_per_super: int = 12
    super_scale: float = 3.0
    class_scale: float = 1.0
    noise: float = 0.8
    # isotropic noise added after the warp
    obs_noise: float = 1.0
    warp: str = "tanh-mlp"
    warp_width: int = 64

    @property
    def num_classes(self) -> int:
        return self.n_super * self.classes_per_super

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("the downstream task needs at least 2 classes")
        if self.n_super < 1 or self.classes_per_super < 1:
            raise ConfigError("need at least one super-class and one class per super-class")
        if self.pretrain_labels not in ("super", "disjoint-fine"):
            raise ConfigError(f"unknown pretrain_labels {self.pretrain_labels!r}")
        if self.warp not in ("none", "tanh-mlp"):
            raise ConfigError(f"unknown warp {self.warp!r}")
        if self.warp == "none" and self.d_in != self.latent_dim:
            raise ConfigError("warp 'none' requires d_in == latent_dim")
        if self.noise < 0 or self.obs_noise < 0:
            raise ConfigError("noise scales must be non-negative")


@dataclass
class GeneratedTask:
    spec: TaskSpec
    pretrain: LabeledDataset
    splits: TaskSplits
    class_centers: np.ndarray  # latent-space centers, (K, latent_dim)
    class_to_super: np.ndarray


class _Warp:
    def __init__(self, spec: TaskSpec, rng: np.random.Generator):
        self.kind = spec.warp
        if self.kind == "tanh-mlp":
            h = spec.warp_width
            self.a = rng.normal(0.0, 1.0 / math.sqrt(spec.latent_dim), size=(spec.latent_dim, h))
            self.c = rng.normal(0.0, 0.5, size=h)
            self.b = rng.normal(0.0, math.sqrt(2.0 / h), size=(h, spec.d_in))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return z.copy()
        return np.tanh(z @ self.a + self.c) @ self.b


def generate_task(spec: TaskSpec, seed: int) -> GeneratedTask:
    """Deterministically draw the pretraining corpus and the downstream train/val/test splits."""
    spec.validate()
    rng = np.random.default_rng(seed)
    geometry_rng, warp_rng, pre_rng, down_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, 4))
    supers = geometry_rng.normal(0.0, spec.super_scale, size=(spec.n_super, spec.latent_dim))
    class_to_super = np.repeat(np.arange(spec.n_super), spec.classes_per_super)
    offsets = geometry_rng.normal(0.0, spec.class_scale, size=(spec.num_classes, spec.latent_dim))
    centers = supers[class_to_super] + offsets
    warp = _Warp(spec, warp_rng)

    def draw(rng_, cluster_centers, per_class: int, split: str) -> LabeledDataset:
        k = len(cluster_centers)
        labels = np.repeat(np.arange(k), per_class)
        z = cluster_centers[labels] + rng_.normal(0.0, 1.0, size=(labels.size, spec.latent_dim)) * spec.noise
        x = warp(z)
        if spec.obs_noise > 0:
            x = x + rng_.normal(0.0, spec.obs_noise, size=x.shape)
        return LabeledDataset(x, labels, k, split)

    if spec.pretrain_labels == "super":
        # fresh draws from every task class, labelled by super-class
        per_class = max(1, spec.pretrain_per_super // spec.classes_per_super)
        fine = draw(pre_rng, centers, per_class, "pretrain")
        pretrain = LabeledDataset(fine.features, class_to_super[fine.labels], spec.n_super, "pretrain")
    else:
        m = spec.pretrain_classes_per_super
        pre_super = np.repeat(np.arange(spec.n_super), m)
        pre_offsets = pre_rng.normal(0.0, spec.class_scale, size=(spec.n_super * m, spec.latent_dim))
        per_class = max(1, spec.pretrain_per_super // m)
        pretrain = draw(pre_rng, supers[pre_super] + pre_offsets, per_class, "pretrain")

    splits = TaskSplits(
        draw(down_rng, centers, spec.train_per_class, "train"),
        draw(down_rng, centers, spec.val_per_class, "val"),
        draw(down_rng, centers, spec.test_per_class, "test"),
    )
    return GeneratedTask(spec, pretrain, splits, centers, class_to_super)


def nearest_centroid_accuracy(train: LabeledDataset, test: LabeledDataset) -> float:
    centroids = np.stack([train.features[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d = ((test.features[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == test.labels).mean())


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class MixerSpec:
    kind: str = "inter-class"
    interpolation: str = "convex-pixel"
    weight_law: float = 1.0
    fixed_lambda: float | None = None

    def validate(self) -> None:
        if self.kind not in ("inter-class", "intra-class"):
            raise ConfigError(f"unknown mixer kind {self.kind!r}")
        if self.interpolation not in ("convex-pixel", "encoder-latent"):
            raise ConfigError(f"unknown interpolation {self.interpolation!r}")
        if self.weight_law <= 0:
            raise ConfigError("Beta parameter must be positive")


@dataclass
class AugmentedDataset:
    originals: LabeledDataset
    synthetic_features: np.ndarray
    source_ids: np.ndarray  # (n_syn, 2), -1 when unknown
    multiplier: int = 0
    # shared class label of intra-class synthetics, -1 otherwise
    synthetic_labels: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.synthetic_features = np.asarray(self.synthetic_features, dtype=np.float64).reshape(
            -1, self.originals.dim
        )
        n = len(self.synthetic_features)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64).reshape(n, 2)
        if self.synthetic_labels is None:
            self.synthetic_labels = np.full(n, -1, dtype=np.int64)
        self.synthetic_labels = np.asarray(self.synthetic_labels, dtype=np.int64)

    @property
    def n_synthetic(self) -> int:
        return len(self.synthetic_features)

    @property
    def synthetics(self) -> list[Sample]:
        out = []
        for x, src, lab in zip(self.synthetic_features, self.source_ids, self.synthetic_labels):
            ids = None if src[0] < 0 else (int(src[0]), int(src[1]))
            out.append(Sample(x, None, SYNTHETIC, ids))
        return out

    @classmethod
    def plain(cls, train: LabeledDataset) -> "AugmentedDataset":
        return cls(train, np.zeros((0, train.dim)), np.zeros((0, 2)), 0)


def _draw_pairs(train: LabeledDataset, kind: str, count: int, rng: np.random.Generator) -> np.ndarray:
    n = len(train)
    if kind == "inter-class":
        a = rng.integers(0, n, size=count)
        b = rng.integers(0, n - 1, size=count)
        b = b + (b >= a)
        return np.stack([a, b], axis=1)
    members = [np.flatnonzero(train.labels == c) for c in range(train.num_classes)]
    for c, m in enumerate(members):
        if len(m) == 1:
            raise GenerationError(f"intra-class mixing impossible: class {c} has a single sample")
    # anchors uniform over samples visit classes in proportion to their size
    a = rng.integers(0, n, size=count)
    pos = np.empty(n, dtype=np.int64)
    for m in members:
        pos[m] = np.arange(len(m))
    b = np.empty(count, dtype=np.int64)
    for i, anchor in enumerate(a):
        m = members[train.labels[anchor]]
        j = rng.integers(0, len(m) - 1)
        j += j >= pos[anchor]
        b[i] = m[j]
    return np.stack([a, b], axis=1)


def build_dsd(
    train: LabeledDataset,
    mixer: MixerSpec,
    n: int,
    seed: int,
    encoder=None,
) -> AugmentedDataset:
    """Extend ``train`` with ``n * len(train)`` pairwise-mixed synthetic samples.

    ``encoder`` is required for ``encoder-latent`` interpolation: the mix is
    formed in its embedding space, the nearest training sample to the mixed
    embedding is retrieved, and it is averaged 50/50 with the input-space mix.
    """
    mixer.validate()
    if n < 0:
        raise ConfigError("multiplier must be non-negative")
    if n == 0:
        return AugmentedDataset.plain(train)
    if len(train) < 2:
        raise GenerationError("need at least two training samples to mix")
    rng = np.random.default_rng(seed)
    count = n * len(train)
    pairs = _draw_pairs(train, mixer.kind, count, rng)
    if mixer.fixed_lambda is not None:
        lam = np.full(count, float(mixer.fixed_lambda))
    else:
        lam = rng.beta(mixer.weight_law, mixer.weight_law, size=count)
    xa, xb = train.features[pairs[:, 0]], train.features[pairs[:, 1]]
    mixed = lam[:, None] * xa + (1.0 - lam[:, None]) * xb
    if mixer.interpolation == "encoder-latent":
        if encoder is None:
            raise ConfigError("encoder-latent interpolation needs an encoder")
        embed = encoder.embed if hasattr(encoder, "embed") else encoder
        emb = embed(Tensor(train.features)).data
        target = lam[:, None] * emb[pairs[:, 0]] + (1.0 - lam[:, None]) * emb[pairs[:, 1]]
        d = (target**2).sum(1)[:, None] - 2 * target @ emb.T + (emb**2).sum(1)[None]
        nearest = d.argmin(axis=1)
        mixed = 0.5 * train.features[nearest] + 0.5 * mixed
    labels = train.labels[pairs[:, 0]] if mixer.kind == "intra-class" else np.full(count, -1)
    return AugmentedDataset(train, mixed, pairs, n, labels)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray  # -1 where absent
    synthetic: np.ndarray  # bool provenance flags
    index: np.ndarray  # position inside the originating pool

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def provenance(self) -> list[str]:
        return [SYNTHETIC if s else ORIGINAL for s in self.synthetic]

    @property
    def original_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.synthetic)


def sample_batch(
    dsd: AugmentedDataset,
    batch_size: int,
    use_synthetic: bool,
    rng: np.random.Generator,
    strict: bool = False,
) -> Batch:
    """Draw a batch; with synthetics enabled each slot is original or synthetic with probability 1/2.

    ``strict`` replaces the per-slot coin with exactly ``ceil(b/2)`` originals
    and ``floor(b/2)`` synthetics, in shuffled slot order.
    """
    if batch_size < 1:
        raise SamplingError("batch_size must be at least 1")
    n_orig, n_syn = len(dsd.originals), dsd.n_synthetic
    if use_synthetic:
        if strict:
            syn = np.zeros(batch_size, dtype=bool)
            syn[(batch_size + 1) // 2 :] = True
            syn = rng.permutation(syn)
        else:
            syn = rng.random(batch_size) < 0.5
    else:
        syn = np.zeros(batch_size, dtype=bool)
    k_syn = int(syn.sum())
    if k_syn and n_syn == 0:
        raise SamplingError("synthetic slot requested but the synthetic pool is empty")
    if batch_size - k_syn and n_orig == 0:
        raise SamplingError("original slot requested but the original pool is empty")
    index = np.empty(batch_size, dtype=np.int64)
    index[~syn] = rng.integers(0, max(n_orig, 1), size=batch_size - k_syn)
    if k_syn:
        index[syn] = rng.integers(0, n_syn, size=k_syn)
    features = np.empty((batch_size, dsd.originals.dim))
    labels = np.empty(batch_size, dtype=np.int64)
    features[~syn] = dsd.originals.features[index[~syn]]
    labels[~syn] = dsd.originals.labels[index[~syn]]
    features[syn] = dsd.synthetic_features[index[syn]]
    labels[syn] = dsd.synthetic_labels[index[syn]]
    return Batch(features, labels, syn, index)


@dataclass
class AugmentationSpec:
    flip: bool = False
    jitter_sigma: float = 0.0
    crop_fraction: float = 1.0
    mixup_alpha: float = 0.2

    def validate(self) -> None:
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ConfigError("crop_fraction must lie in (0, 1]")
        if self.jitter_sigma < 0 or self.mixup_alpha < 0:
            raise ConfigError("jitter_sigma and mixup_alpha must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(False, 0.0, 1.0, 0.0)


@dataclass
class AugmentedBatch:
    features: np.ndarray
    targets: np.ndarray  # (b, K) label distributions; zero rows where unlabelled
    labelled: np.ndarray  # bool, row has a target
    synthetic: np.ndarray
    mixup_partner: np.ndarray  # -1 when not mixed
    mixup_lambda: float


def mixup(features, targets, lam: float, partner) -> tuple[np.ndarray, np.ndarray]:
    """Convex mix of rows with their partners; rows with partner -1 stay untouched."""
    partner = np.asarray(partner)
    rows = np.flatnonzero(partner >= 0)
    x, t = features.copy(), targets.copy()
    if lam == 1.0 or rows.size == 0:
        return x, t
    src = partner[rows]
    x[rows] = lam * features[rows] + (1.0 - lam) * features[src]
    t[rows] = lam * targets[rows] + (1.0 - lam) * targets[src]
    return x, t


def apply_augmentation(
    batch: Batch,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    num_classes: int,
    allow_mixup: bool = True,
) -> AugmentedBatch:
    """Per-sample flip/jitter/crop draws, then Mixup among original rows only."""
    spec.validate()
    x = batch.features.copy()
    b, d = x.shape
    if spec.flip:
        flip = rng.random(b) < 0.5
        x[flip] = x[flip, ::-1]
    if spec.crop_fraction < 1.0:
        width = max(1, int(math.ceil(spec.crop_fraction * d)))
        starts = rng.integers(0, d - width + 1, size=b)
        cols = np.arange(d)[None, :]
        keep = (cols >= starts[:, None]) & (cols < starts[:, None] + width)
        x = np.where(keep, x, 0.0)
    if spec.jitter_sigma > 0:
        x = x + rng.normal(0.0, spec.jitter_sigma, size=x.shape)

    labelled = batch.labels >= 0
    targets = np.zeros((b, num_classes))
    targets[labelled, batch.labels[labelled]] = 1.0
    partner = np.full(b, -1, dtype=np.int64)
    lam = 1.0
    if allow_mixup and spec.mixup_alpha > 0:
        orig = batch.original_rows
        if orig.size >= 2:
            lam = float(rng.beta(spec.mixup_alpha, spec.mixup_alpha))
            partner[orig] = orig[rng.permutation(orig.size)]
            x, targets = mixup(x, targets, lam, partner)
    return AugmentedBatch(x, targets, labelled, batch.synthetic.copy(), partner, lam)


# ---------------------------------------------------------------------------
# external synthetic format

_SOURCE_RE = re.compile(r"^source=(-?\d+),(-?\d+)$")


def export_synthetic(path: str | Path, samples) -> Path:
    """One comma-separated record per line, 17 significant digits, optional ``#source=a,b``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        line = ",".join(f"{v:.17g}" for v in np.asarray(s.features, dtype=np.float64))
        if s.source_ids is not None:
            line += f"#source={s.source_ids[0]},{s.source_ids[1]}"
        lines.append(line)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def ingest_external_synthetic(path: str | Path, d_in: int | None = None) -> list[Sample]:
    samples = []
    text = Path(path).read_text(encoding="utf-8")
    for i, raw in enumerate(text.splitlines()):
        if not raw.strip():
            continue
        body, _, comment = raw.partition("#")
        try:
            values = np.array([float(v) for v in body.split(",")], dtype=np.float64)
        except ValueError:
            raise ParseError(f"record {i}: malformed value list") from None
        if d_in is not None and values.size != d_in:
            raise ParseError(f"record {i}: expected {d_in} values, found {values.size}")
        if not np.isfinite(values).all():
            raise ParseError(f"record {i}: non-finite value")
        source = None
        if comment:
            m = _SOURCE_RE.match(comment.strip())
            if m is None:
                raise ParseError(f"record {i}: malformed comment {comment!r}")
            source = (int(m.group(1)), int(m.group(2)))
        samples.append(Sample(values, None, SYNTHETIC, source))
    return samples


def dsd_from_samples(train: LabeledDataset, samples: list[Sample], multiplier: int = 0) -> AugmentedDataset:
    if samples and samples[0].features.size != train.dim:
        raise DimensionError(f"synthetic width {samples[0].features.size} != d_in {train.dim}")
    feats = np.array([s.features for s in samples]).reshape(-1, train.dim)
    src = np.array([s.source_ids if s.source_ids is not None else (-1, -1) for s in samples]).reshape(-1, 2)
    return AugmentedDataset(train, feats, src, multiplier)
