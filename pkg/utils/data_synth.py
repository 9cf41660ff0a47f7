"""
Seeded synthetic verb/noun benchmark.

Each clip is a T x S x d token grid. A contiguous run of spatial slots holds the
hand-object interaction: the noun factor as spatial content plus the verb
factor ramped over frames. The remaining slots are clutter drawn from a shared
background pool. Domain 1 clips are rotated and perturbed to model a dataset
shift. A fraction of verbs and nouns is held out as novel and never appears in
training.
"""
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from utils.blob_store import read_blob_file, write_blob_file
from utils.errors import ConfigError, DimensionError, SpecError, UsageError
from utils.vocabulary import phrase_vector

logger = logging.getLogger(__name__)

VERB_WORDS = [
    "take", "put", "open", "close", "wash", "cut", "mix", "pour", "turn", "move",
    "throw", "dry", "fold", "peel", "insert", "remove", "shake", "squeeze", "scoop", "hold",
]
NOUN_WORDS = [
    "knife", "cup", "plate", "pan", "bowl", "spoon", "lid", "tap", "fridge", "drawer",
    "bag", "bottle", "sponge", "board", "onion", "towel", "jar", "fork", "box", "glass",
]
SPLITS = ("train", "within-test", "cross-test", "base-test", "novel-test")
DATASET_KIND = "dataset"


@dataclass
class BenchmarkSpec:
    n_verbs: int = 8
    n_nouns: int = 12
    compat: Optional[List[List[bool]]] = None
    compat_density: float = 0.5
    samples_per_split: int = 512
    frames: int = 4
    patches: int = 4
    width: int = 32
    clutter_ratio: float = 0.5
    shift_rotation: float = 0.6
    shift_noise_std: float = 0.1
    token_noise_std: float = 0.05
    novel_fraction: float = 0.25
    background_pool: int = 16

    def validate(self) -> "BenchmarkSpec":
        for key in ("n_verbs", "n_nouns", "samples_per_split", "frames", "patches", "width", "background_pool"):
            if getattr(self, key) < 1:
                raise ConfigError(f"benchmark.{key}", "must be >= 1")
        for key in ("shift_noise_std", "token_noise_std"):
            if getattr(self, key) < 0:
                raise ConfigError(f"benchmark.{key}", "must be >= 0")
        if not 0.0 <= self.clutter_ratio < 1.0 or self.hoi_length < 1:
            raise ConfigError("benchmark.clutter_ratio", "must leave at least one interaction slot")
        if not 0.0 < self.compat_density <= 1.0:
            raise ConfigError("benchmark.compat_density", "must lie in (0, 1]")
        if not 0.0 <= self.novel_fraction < 1.0:
            raise ConfigError("benchmark.novel_fraction", "must lie in [0, 1)")
        return self

    @property
    def hoi_length(self) -> int:
        return self.patches - int(round(self.clutter_ratio * self.patches))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Sample:
    tokens: np.ndarray
    verb_label: int
    noun_label: int
    domain_id: int


@dataclass
class Dataset:
    """One split. ``verb_classes``/``noun_classes`` are the label sets it is scored against."""

    name: str
    tokens: np.ndarray
    verb_labels: np.ndarray
    noun_labels: np.ndarray
    domain_ids: np.ndarray
    verb_classes: List[int]
    noun_classes: List[int]

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def sample(self, i: int) -> Sample:
        return Sample(self.tokens[i], int(self.verb_labels[i]), int(self.noun_labels[i]), int(self.domain_ids[i]))

    def labels(self, component: str) -> np.ndarray:
        return self.verb_labels if component == "verb" else self.noun_labels

    def classes(self, component: str) -> List[int]:
        return self.verb_classes if component == "verb" else self.noun_classes

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.tokens.astype("<f4"), self.verb_labels.astype("<i4"),
                    self.noun_labels.astype("<i4"), self.domain_ids.astype("<i4")):
            h.update(arr.tobytes())
        return h.hexdigest()


@dataclass
class SyntheticBenchmark:
    spec: BenchmarkSpec
    seed: int
    verb_names: List[str]
    noun_names: List[str]
    compat: np.ndarray
    novel_verbs: List[int]
    novel_nouns: List[int]
    splits: Dict[str, Dataset] = field(default_factory=dict)

    @property
    def base_verbs(self) -> List[int]:
        return [i for i in range(self.spec.n_verbs) if i not in self.novel_verbs]

    @property
    def base_nouns(self) -> List[int]:
        return [i for i in range(self.spec.n_nouns) if i not in self.novel_nouns]

    def label_names(self, component: str) -> List[str]:
        return self.verb_names if component == "verb" else self.noun_names

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in SPLITS:
            h.update(name.encode("utf-8"))
            h.update(self.splits[name].content_hash().encode("ascii"))
        return h.hexdigest()


@dataclass
class Batch:
    indices: np.ndarray
    tokens: np.ndarray
    verb_labels: np.ndarray
    noun_labels: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.size)

    def labels(self, component: str) -> np.ndarray:
        return self.verb_labels if component == "verb" else self.noun_labels


def local_labels(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Position of each label within ``classes``; -1 where the label is outside the set."""
    labels = np.asarray(labels, dtype=np.int64)
    size = max(max(classes, default=-1), int(labels.max(initial=-1))) + 1
    lookup = np.full(size, -1, dtype=np.int64)
    lookup[list(classes)] = np.arange(len(classes))
    return lookup[labels]


def label_names(words: Sequence[str], count: int) -> List[str]:
    return [words[i] if i < len(words) else f"{words[i % len(words)]}{i // len(words)}" for i in range(count)]


def _compat_matrix(spec: BenchmarkSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.compat is not None:
        compat = np.asarray(spec.compat, dtype=bool)
        if compat.shape != (spec.n_verbs, spec.n_nouns):
            raise SpecError(f"compat must be {spec.n_verbs} x {spec.n_nouns}, got {compat.shape}")
        empty_rows = np.flatnonzero(~compat.any(axis=1)).tolist()
        empty_cols = np.flatnonzero(~compat.any(axis=0)).tolist()
        if empty_rows or empty_cols:
            raise SpecError(f"infeasible compat: verbs {empty_rows} / nouns {empty_cols} have no partner")
        return compat
    compat = rng.random((spec.n_verbs, spec.n_nouns)) < spec.compat_density
    for v in np.flatnonzero(~compat.any(axis=1)):
        compat[v, rng.integers(spec.n_nouns)] = True
    for n in np.flatnonzero(~compat.any(axis=0)):
        compat[rng.integers(spec.n_verbs), n] = True
    return compat


def _held_out(count: int, fraction: float, rng: np.random.Generator) -> List[int]:
    n_novel = min(int(round(fraction * count)), count - 1)
    return sorted(rng.choice(count, size=n_novel, replace=False).tolist()) if n_novel > 0 else []


def _domain_rotation(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal map rotating d//2 random disjoint coordinate planes by ``angle``."""
    rotation = np.eye(d)
    perm = rng.permutation(d)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(d // 2):
        a, b = perm[2 * i], perm[2 * i + 1]
        givens = np.eye(d)
        givens[a, a], givens[a, b], givens[b, a], givens[b, b] = c, -s, s, c
        rotation = givens @ rotation
    return rotation


def _render_clips(spec: BenchmarkSpec, pairs: np.ndarray, verb_factors: np.ndarray, noun_factors: np.ndarray,
                  background: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = pairs.shape[0]
    t_len, s_len, d, hoi = spec.frames, spec.patches, spec.width, spec.hoi_length
    ramp = ((np.arange(t_len) + 1.0) / t_len)[:, None, None]
    tokens = np.empty((n, t_len, s_len, d), dtype=np.float64)
    for i, (v, nn) in enumerate(pairs):
        offset = rng.integers(0, s_len - hoi + 1)
        clutter_slots = [p for p in range(s_len) if not offset <= p < offset + hoi]
        tokens[i, :, offset:offset + hoi] = noun_factors[nn] + ramp * verb_factors[v]
        if clutter_slots:
            tokens[i][:, clutter_slots] = background[rng.integers(0, background.shape[0], size=len(clutter_slots))]
    tokens += spec.token_noise_std * rng.standard_normal(tokens.shape)
    return tokens


def _make_split(name: str, spec: BenchmarkSpec, pairs_pool: np.ndarray, domain: int, rotation: np.ndarray,
                verb_factors, noun_factors, background, rng, verb_classes, noun_classes) -> Dataset:
    if pairs_pool.shape[0] == 0:
        empty = np.zeros((0, spec.frames, spec.patches, spec.width), dtype=np.float32)
        ints = np.zeros(0, dtype=np.int32)
        return Dataset(name, empty, ints, ints.copy(), ints.copy(), verb_classes, noun_classes)
    pairs = pairs_pool[rng.integers(0, pairs_pool.shape[0], size=spec.samples_per_split)]
    tokens = _render_clips(spec, pairs, verb_factors, noun_factors, background, rng)
    if domain == 1:
        tokens = tokens @ rotation.T + spec.shift_noise_std * rng.standard_normal(tokens.shape)
    return Dataset(
        name=name,
        tokens=tokens.astype(np.float32),
        verb_labels=pairs[:, 0].astype(np.int32),
        noun_labels=pairs[:, 1].astype(np.int32),
        domain_ids=np.full(pairs.shape[0], domain, dtype=np.int32),
        verb_classes=list(verb_classes),
        noun_classes=list(noun_classes),
    )


def make_benchmark(seed: int, spec: BenchmarkSpec) -> SyntheticBenchmark:
    """Generate all five splits from ``seed``.

    Args:
        seed: drives the compatibility matrix, the held-out labels, the
            background pool, the domain rotation and every split's samples.
        spec: benchmark geometry and difficulty knobs, validated here.

    Returns:
        A ``SyntheticBenchmark``. Train and within-test come from the source
        domain with base labels only; cross-test, base-test and novel-test
        come from the shifted target domain.

    Raises:
        ConfigError: a spec field is out of range.
        SpecError: no compatible pair survives the hold-out.
    """
    spec.validate()
    compat = _compat_matrix(spec, np.random.default_rng([seed, 100]))
    selection_rng = np.random.default_rng([seed, 101])
    novel_verbs = _held_out(spec.n_verbs, spec.novel_fraction, selection_rng)
    novel_nouns = _held_out(spec.n_nouns, spec.novel_fraction, selection_rng)
    background = np.random.default_rng([seed, 102]).standard_normal((spec.background_pool, spec.width)) / np.sqrt(spec.width)
    rotation = _domain_rotation(spec.width, spec.shift_rotation, np.random.default_rng([seed, 103]))

    verb_names = label_names(VERB_WORDS, spec.n_verbs)
    noun_names = label_names(NOUN_WORDS, spec.n_nouns)
    verb_factors = np.stack([phrase_vector(n, spec.width) for n in verb_names]).astype(np.float64)
    noun_factors = np.stack([phrase_vector(n, spec.width) for n in noun_names]).astype(np.float64)

    bench = SyntheticBenchmark(spec, seed, verb_names, noun_names, compat, novel_verbs, novel_nouns)
    all_pairs = np.argwhere(compat)
    is_novel = np.isin(all_pairs[:, 0], novel_verbs) | np.isin(all_pairs[:, 1], novel_nouns)
    base_pairs, novel_pairs = all_pairs[~is_novel], all_pairs[is_novel]
    if base_pairs.shape[0] == 0:
        raise SpecError("no compatible verb-noun pair remains after holding out novel labels")

    layout = {
        "train": (base_pairs, 0, bench.base_verbs, bench.base_nouns),
        "within-test": (base_pairs, 0, bench.base_verbs, bench.base_nouns),
        "cross-test": (base_pairs, 1, bench.base_verbs, bench.base_nouns),
        "base-test": (base_pairs, 1, bench.base_verbs, bench.base_nouns),
        "novel-test": (novel_pairs, 1, novel_verbs, novel_nouns),
    }
    for index, name in enumerate(SPLITS):
        pairs_pool, domain, verb_classes, noun_classes = layout[name]
        rng = np.random.default_rng([seed, index])
        bench.splits[name] = _make_split(name, spec, pairs_pool, domain, rotation, verb_factors,
                                         noun_factors, background, rng, verb_classes, noun_classes)
    logger.debug("benchmark seed=%d: %d base pairs, %d novel pairs, novel verbs=%s nouns=%s",
                 seed, base_pairs.shape[0], novel_pairs.shape[0], novel_verbs, novel_nouns)
    return bench


def sample_batch(dataset: Dataset, batch_size: int, epoch_seed: int) -> List[Batch]:
    """Seeded shuffle without replacement; the last partial batch is kept."""
    if len(dataset) == 0:
        raise UsageError(f"dataset {dataset.name!r} is empty")
    if not 1 <= batch_size <= len(dataset):
        raise UsageError(f"batch_size must lie in [1, {len(dataset)}], got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(len(dataset))
    batches = []
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        batches.append(Batch(idx, dataset.tokens[idx], dataset.verb_labels[idx], dataset.noun_labels[idx]))
    return batches


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

def export_dataset(bench: SyntheticBenchmark, path: Union[str, Path]) -> int:
    meta = {
        "spec": bench.spec.to_dict(),
        "seed": bench.seed,
        "verb_names": bench.verb_names,
        "noun_names": bench.noun_names,
        "compat": bench.compat.astype(int).tolist(),
        "novel_verbs": bench.novel_verbs,
        "novel_nouns": bench.novel_nouns,
        "splits": {name: {"size": len(ds), "verb_classes": ds.verb_classes, "noun_classes": ds.noun_classes}
                   for name, ds in bench.splits.items()},
    }
    arrays = {}
    for name in SPLITS:
        ds = bench.splits[name]
        arrays[f"{name}.tokens"] = ds.tokens
        arrays[f"{name}.verb_labels"] = ds.verb_labels
        arrays[f"{name}.noun_labels"] = ds.noun_labels
        arrays[f"{name}.domain_ids"] = ds.domain_ids
    return write_blob_file(path, DATASET_KIND, meta, arrays)


def import_dataset(path: Union[str, Path]) -> SyntheticBenchmark:
    manifest, arrays = read_blob_file(path, expected_kind=DATASET_KIND)
    meta = manifest["meta"]
    spec = BenchmarkSpec(**meta["spec"])
    bench = SyntheticBenchmark(
        spec=spec,
        seed=meta["seed"],
        verb_names=list(meta["verb_names"]),
        noun_names=list(meta["noun_names"]),
        compat=np.asarray(meta["compat"], dtype=bool),
        novel_verbs=list(meta["novel_verbs"]),
        novel_nouns=list(meta["novel_nouns"]),
    )
    expected = (spec.frames, spec.patches, spec.width)
    for name in SPLITS:
        tokens = arrays[f"{name}.tokens"]
        if tokens.shape[1:] != expected:
            raise DimensionError(f"split {name!r} tokens are {tokens.shape[1:]}, manifest declares {expected}")
        info = meta["splits"][name]
        bench.splits[name] = Dataset(
            name=name,
            tokens=tokens,
            verb_labels=arrays[f"{name}.verb_labels"],
            noun_labels=arrays[f"{name}.noun_labels"],
            domain_ids=arrays[f"{name}.domain_ids"],
            verb_classes=list(info["verb_classes"]),
            noun_classes=list(info["noun_classes"]),
        )
    return bench


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def label_mutual_information(dataset: Dataset) -> float:
    """Empirical verb/noun mutual information in nats."""
    if len(dataset) == 0:
        raise UsageError(f"dataset {dataset.name!r} is empty")
    joint = np.zeros((int(dataset.verb_labels.max()) + 1, int(dataset.noun_labels.max()) + 1))
    np.add.at(joint, (dataset.verb_labels, dataset.noun_labels), 1.0)
    joint /= joint.sum()
    outer = joint.sum(axis=1, keepdims=True) @ joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))


def hoi_linear_readout_accuracy(bench: SyntheticBenchmark) -> Dict[str, float]:
    """Least-squares linear readout on noiseless interaction tokens, one feature row per compatible pair."""
    spec = bench.spec
    verb_factors = np.stack([phrase_vector(n, spec.width) for n in bench.verb_names]).astype(np.float64)
    noun_factors = np.stack([phrase_vector(n, spec.width) for n in bench.noun_names]).astype(np.float64)
    ramp = ((np.arange(spec.frames) + 1.0) / spec.frames)[:, None]
    pairs = np.argwhere(bench.compat)
    features = np.stack([(noun_factors[n] + ramp * verb_factors[v]).reshape(-1) for v, n in pairs])
    design = np.hstack([features, np.ones((features.shape[0], 1))])
    accuracy = {}
    for component, labels, count in (("verb", pairs[:, 0], spec.n_verbs), ("noun", pairs[:, 1], spec.n_nouns)):
        targets = np.eye(count)[labels]
        coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
        accuracy[component] = float(100.0 * np.mean(np.argmax(design @ coef, axis=1) == labels))
    return accuracy
