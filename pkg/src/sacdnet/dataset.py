"""Balanced fold construction, feature encoding, and demographic groups.

Folds follow the undersampling protocol: five pairwise-disjoint negative
samples, each the size of the positive set, are combined with all
positives into five balanced datasets, each with its own 80/20
train/test split. Vocabulary and standardization statistics are always
fit on a fold's training split only.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .nn.rng import RngStream
from .preprocess import GENDERS, ExamplePoint

PAD_INDEX = 0
UNK_INDEX = 1

NUM_FOLDS = 5
TEST_FRACTION = 0.2

DEFAULT_MAX_SEQUENCE_LENGTH = 64

STD_FLOOR = 1e-8

# Age group boundaries in years: [low, high) per group.
AGE_BUCKETS = (
    ("infant", 0.0, 2.0),
    ("preschooler", 2.0, 6.0),
    ("child", 6.0, 13.0),
    ("teen", 13.0, 19.0),
    ("adult", 19.0, 45.0),
    ("middle-aged", 45.0, 65.0),
    ("senior", 65.0, float("inf")),
)

GROUP_AXES = ("age", "gender", "race")


@dataclass
class Vocabulary:
    """Diagnosis-code index map with reserved PAD and UNK entries."""

    code_to_index: Dict[str, int]
    max_sequence_length: int = DEFAULT_MAX_SEQUENCE_LENGTH

    @classmethod
    def build(cls, train_examples: Sequence[ExamplePoint],
              max_sequence_length: int = DEFAULT_MAX_SEQUENCE_LENGTH) -> "Vocabulary":
        codes = sorted({c for e in train_examples for c in e.diagnosis_codes})
        mapping = {code: i + 2 for i, code in enumerate(codes)}
        return cls(code_to_index=mapping, max_sequence_length=max_sequence_length)

    @property
    def size(self) -> int:
        return len(self.code_to_index) + 2

    def lookup(self, code: str) -> int:
        return self.code_to_index.get(code, UNK_INDEX)

    def encode_codes(self, codes: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Fixed-length index sequence plus validity mask.

        Sequences longer than the window keep the most recent codes. An
        empty history becomes a single valid UNK sentinel so attention
        always has at least one position to pool over.
        """
        length = self.max_sequence_length
        recent = list(codes)[-length:]
        indices = np.full(length, PAD_INDEX, dtype=np.int64)
        mask = np.zeros(length, dtype=bool)
        if not recent:
            indices[0] = UNK_INDEX
            mask[0] = True
            return indices, mask
        for i, code in enumerate(recent):
            indices[i] = self.lookup(code)
            mask[i] = True
        return indices, mask

    def to_dict(self) -> dict:
        return {"code_to_index": self.code_to_index,
                "max_sequence_length": self.max_sequence_length}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(code_to_index={k: int(v) for k, v in d["code_to_index"].items()},
                   max_sequence_length=int(d["max_sequence_length"]))


@dataclass
class Standardizer:
    """Dense-feature builder: z-scored continuous columns plus one-hots.

    Continuous columns are the retained vitals (sorted by name) followed
    by age; categorical columns are one-hot gender (fixed order) and
    one-hot race (categories observed in the training split). Means and
    standard deviations come from the training split only.
    """

    vitals_attributes: List[str]
    race_categories: List[str]
    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(cls, train_examples: Sequence[ExamplePoint]) -> "Standardizer":
        if not train_examples:
            raise ValueError("cannot fit a standardizer on an empty training split")
        vitals = sorted(train_examples[0].vitals_features)
        races = sorted({e.race for e in train_examples})
        raw = np.array([
            [e.vitals_features[a] for a in vitals] + [e.age_years]
            for e in train_examples
        ])
        means = raw.mean(axis=0)
        stds = np.maximum(raw.std(axis=0), STD_FLOOR)
        return cls(vitals_attributes=vitals, race_categories=races,
                   means=means, stds=stds)

    @property
    def n_features(self) -> int:
        return len(self.vitals_attributes) + 1 + len(GENDERS) + len(self.race_categories)

    def feature_names(self) -> List[str]:
        return (list(self.vitals_attributes) + ["age"]
                + [f"gender={g}" for g in GENDERS]
                + [f"race={r}" for r in self.race_categories])

    def transform(self, example: ExamplePoint) -> np.ndarray:
        continuous = np.array(
            [example.vitals_features[a] for a in self.vitals_attributes]
            + [example.age_years])
        scaled = (continuous - self.means) / self.stds
        gender = np.zeros(len(GENDERS))
        gender[GENDERS.index(example.gender)] = 1.0
        race = np.zeros(len(self.race_categories))
        if example.race in self.race_categories:
            race[self.race_categories.index(example.race)] = 1.0
        return np.concatenate([scaled, gender, race])

    def to_dict(self) -> dict:
        return {
            "vitals_attributes": self.vitals_attributes,
            "race_categories": self.race_categories,
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(
            vitals_attributes=list(d["vitals_attributes"]),
            race_categories=list(d["race_categories"]),
            means=np.asarray(d["means"], dtype=np.float64),
            stds=np.asarray(d["stds"], dtype=np.float64),
        )


@dataclass
class EncodedExample:
    """Model-ready form of one example point."""

    code_indices: np.ndarray   # [max_sequence_length] int64
    mask: np.ndarray           # [max_sequence_length] bool
    dense_features: np.ndarray  # [n_features] float64
    label: int


def encode(examples: Sequence[ExamplePoint], vocab: Vocabulary,
           standardizer: Standardizer) -> List[EncodedExample]:
    encoded = []
    for example in examples:
        indices, mask = vocab.encode_codes(example.diagnosis_codes)
        dense = standardizer.transform(example)
        if not np.isfinite(dense).all():
            raise ValueError(f"non-finite dense features for patient "
                             f"{example.patient_id}")
        encoded.append(EncodedExample(code_indices=indices, mask=mask,
                                      dense_features=dense, label=example.label))
    return encoded


@dataclass
class Batch:
    """Stacked arrays for a list of encoded examples."""

    code_indices: np.ndarray   # [B, L]
    mask: np.ndarray           # [B, L]
    dense_features: np.ndarray  # [B, F]
    labels: np.ndarray         # [B]

    @classmethod
    def stack(cls, examples: Sequence[EncodedExample]) -> "Batch":
        if not examples:
            raise ValueError("cannot stack an empty batch")
        return cls(
            code_indices=np.stack([e.code_indices for e in examples]),
            mask=np.stack([e.mask for e in examples]),
            dense_features=np.stack([e.dense_features for e in examples]),
            labels=np.array([e.label for e in examples], dtype=np.float64),
        )

    def __len__(self) -> int:
        return self.code_indices.shape[0]

    def take(self, indices) -> "Batch":
        """Sub-batch by row index."""
        idx = np.asarray(indices)
        return Batch(self.code_indices[idx], self.mask[idx],
                     self.dense_features[idx], self.labels[idx])

    def trimmed(self) -> "Batch":
        """Drop trailing sequence columns that are PAD in every row.

        Such columns are masked out of attention and pooling anyway, so
        cutting them changes no model output, only the work done.
        """
        valid_cols = np.nonzero(self.mask.any(axis=0))[0]
        if valid_cols.size == 0:
            raise ValueError("batch has no valid sequence positions")
        effective = int(valid_cols[-1]) + 1
        return Batch(self.code_indices[:, :effective], self.mask[:, :effective],
                     self.dense_features, self.labels)

    def multi_hot(self, vocab_size: int) -> np.ndarray:
        """Presence vector over the vocabulary for attention-free models."""
        out = np.zeros((len(self), vocab_size))
        for row, (indices, mask) in enumerate(zip(self.code_indices, self.mask)):
            out[row, indices[mask]] = 1.0
        return out


# ---------------------------------------------------------------------------
# fold protocol


@dataclass
class Fold:
    negative_indices: List[int]
    train_indices: List[int]
    test_indices: List[int]


@dataclass
class FoldPlan:
    """Five balanced datasets with disjoint negative samples and splits."""

    seed: int
    n_examples: int
    folds: List[Fold] = field(default_factory=list)

    def validate(self, labels: Optional[Sequence[int]] = None) -> None:
        """Raise if any fold-protocol invariant is broken."""
        seen_negatives: set = set()
        for k, fold in enumerate(self.folds):
            negatives = set(fold.negative_indices)
            if negatives & seen_negatives:
                raise ValueError(f"fold {k}: negative sample overlaps a previous fold")
            seen_negatives |= negatives
            train, test = set(fold.train_indices), set(fold.test_indices)
            if train & test:
                raise ValueError(f"fold {k}: train and test overlap")
            dataset = train | test
            if labels is not None:
                positives = {i for i in dataset if labels[i] == 1}
                if len(negatives) != len(positives):
                    raise ValueError(f"fold {k}: negative sample size "
                                     f"{len(negatives)} != positive count "
                                     f"{len(positives)}")
                if dataset != positives | negatives:
                    raise ValueError(f"fold {k}: split does not cover the dataset")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(seed=int(d["seed"]), n_examples=int(d["n_examples"]),
                   folds=[Fold(**f) for f in d["folds"]])

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def undersample_folds(examples: Sequence[ExamplePoint], seed: int) -> FoldPlan:
    """Build the five balanced datasets and their 80/20 splits.

    Every fold combines all positives with one of five pairwise-disjoint
    random negative samples of equal size. Deterministic given the seed.
    """
    labels = [e.label for e in examples]
    positives = [i for i, y in enumerate(labels) if y == 1]
    negatives = [i for i, y in enumerate(labels) if y == 0]
    needed = NUM_FOLDS * len(positives)
    if len(positives) == 0:
        raise ValueError("no positive examples; cannot build folds")
    if len(negatives) < needed:
        raise ValueError(f"need at least {needed} negatives for {NUM_FOLDS} "
                         f"disjoint samples of {len(positives)}, "
                         f"got {len(negatives)}")

    master = RngStream(seed)
    order = master.derive(1).permutation(len(negatives))
    plan = FoldPlan(seed=seed, n_examples=len(examples))
    n_pos = len(positives)
    for k in range(NUM_FOLDS):
        sample = [negatives[j] for j in order[k * n_pos:(k + 1) * n_pos]]
        dataset = np.array(positives + sample)
        split = master.derive(100 + k).permutation(len(dataset))
        n_test = int(round(TEST_FRACTION * len(dataset)))
        test = dataset[split[:n_test]]
        train = dataset[split[n_test:]]
        plan.folds.append(Fold(
            negative_indices=sorted(sample),
            train_indices=sorted(int(i) for i in train),
            test_indices=sorted(int(i) for i in test),
        ))
    return plan


# ---------------------------------------------------------------------------
# demographic grouping


@dataclass
class DemographicGroup:
    axis: str
    name: str
    member_indices: List[int]


def age_bucket(age_years: float) -> str:
    for name, low, high in AGE_BUCKETS:
        if low <= age_years < high:
            return name
    raise ValueError(f"age {age_years} outside all buckets")


def group_by(examples: Sequence[ExamplePoint], axis: str) -> List[DemographicGroup]:
    """Partition examples into demographic groups along one axis.

    Empty groups are omitted; the returned groups partition the input.
    """
    if axis not in GROUP_AXES:
        raise ValueError(f"axis must be one of {GROUP_AXES}, got {axis!r}")
    members: Dict[str, List[int]] = {}
    for i, example in enumerate(examples):
        if axis == "age":
            name = age_bucket(example.age_years)
        elif axis == "gender":
            name = example.gender
        else:
            name = example.race
        members.setdefault(name, []).append(i)
    if axis == "age":
        ordered = [name for name, _, _ in AGE_BUCKETS if name in members]
    else:
        ordered = sorted(members)
    return [DemographicGroup(axis=axis, name=name, member_indices=members[name])
            for name in ordered]
