"""EHR preprocessing: history filtering, missing-value handling, and
per-patient example construction.

The pipeline turns raw dated encounters (diagnosis codes + vitals) and
patient demographics into one labeled example per patient:

1. keep diabetic patients only if they have at least
   ``MIN_HISTORY_ENCOUNTERS`` visits before their first T2DM-coded
   encounter, and non-diabetic patients only with at least that many
   visits overall;
2. drop vitals attributes whose cohort-wide missing-value ratio exceeds
   a threshold, then drop patients with no observation at all for a
   retained attribute;
3. impute remaining gaps per patient with a forward exponentially
   weighted moving average (leading gaps take the first observation);
4. collapse each patient's visit history into a single example point.

Positive examples use the diagnosis history strictly before the first
T2DM encounter and that encounter's vitals; negative examples use the
full history and the final encounter's vitals.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

# ICD-10-CM code family marking type 2 diabetes mellitus.
T2DM_CODE_PREFIX = "E11"

MIN_HISTORY_ENCOUNTERS = 4

DAYS_PER_YEAR = 365.25

# The vitals attributes an encounter may carry.
VITALS_ATTRIBUTES = (
    "Weight",
    "Height",
    "BMI",
    "Lean Body Weight",
    "Ideal Body Weight",
    "Neck Circumference",
    "Waist",
    "Oxygen Saturation",
    "Peak Expiratory Flow",
    "Blood Type",
    "Blood Rh",
    "Finger Stick",
    "Pulse",
    "Respiration",
    "Temperature",
    "Systolic Blood Pressure",
    "Diastolic Blood Pressure",
)

GENDERS = ("female", "male", "unspecified")

_ICD_CODE_RE = re.compile(r"^[A-Za-z]\d+(\.\w+)?$")
_VITALS_SET = frozenset(VITALS_ATTRIBUTES)


def is_t2dm_code(code: str) -> bool:
    return code.upper().startswith(T2DM_CODE_PREFIX)


@dataclass(frozen=True)
class Encounter:
    """One dated clinical visit: diagnosis codes plus optional vitals."""

    patient_id: str
    date: dt.date
    icd_codes: Tuple[str, ...]
    vitals: Mapping[str, Optional[float]]

    def __post_init__(self):
        object.__setattr__(self, "icd_codes", tuple(self.icd_codes))
        for code in self.icd_codes:
            if not _ICD_CODE_RE.match(code):
                raise ValueError(f"malformed ICD code {code!r} "
                                 f"(patient {self.patient_id}, {self.date})")
        unknown = set(self.vitals) - _VITALS_SET
        if unknown:
            raise ValueError(f"unknown vitals attributes {sorted(unknown)} "
                             f"(patient {self.patient_id})")


@dataclass(frozen=True)
class PatientRecord:
    """A patient's demographics and date-ordered encounters."""

    patient_id: str
    date_of_birth: dt.date
    gender: str
    race: str
    sexual_orientation: str
    encounters: Tuple[Encounter, ...]

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        ordered = tuple(sorted(self.encounters, key=lambda e: e.date))
        object.__setattr__(self, "encounters", ordered)
        for enc in ordered:
            if enc.patient_id != self.patient_id:
                raise ValueError(f"encounter patient {enc.patient_id!r} does not "
                                 f"match record {self.patient_id!r}")
        if ordered and self.date_of_birth > ordered[0].date:
            raise ValueError(f"patient {self.patient_id}: date of birth "
                             f"{self.date_of_birth} is after first encounter")

    def first_t2dm_index(self) -> Optional[int]:
        for i, enc in enumerate(self.encounters):
            if any(is_t2dm_code(c) for c in enc.icd_codes):
                return i
        return None

    def is_positive(self) -> bool:
        return self.first_t2dm_index() is not None


@dataclass(frozen=True)
class ExamplePoint:
    """One training instance collapsed from a patient's history."""

    patient_id: str
    diagnosis_codes: Tuple[str, ...]
    vitals_features: Mapping[str, float]
    age_years: float
    gender: str
    race: str
    label: int

    def as_key(self) -> tuple:
        """Canonical hashable form, for set-style comparisons."""
        return (self.patient_id, self.diagnosis_codes,
                tuple(sorted(self.vitals_features.items())),
                self.age_years, self.gender, self.race, self.label)


@dataclass(frozen=True)
class ImputationConfig:
    smoothing_alpha: float = 0.5
    drop_threshold: float = 50.0  # percent

    def __post_init__(self):
        if not 0.0 < self.smoothing_alpha <= 1.0:
            raise ValueError(f"smoothing_alpha must be in (0, 1], "
                             f"got {self.smoothing_alpha}")
        if not 0.0 < self.drop_threshold <= 100.0:
            raise ValueError(f"drop_threshold must be in (0, 100], "
                             f"got {self.drop_threshold}")


# ---------------------------------------------------------------------------
# operations


def missing_ratio(records: Sequence[Encounter], attribute: str) -> float:
    """Percentage of encounter records with no value for ``attribute``."""
    if not records:
        raise ValueError("missing_ratio needs at least one record")
    missing = sum(1 for r in records if r.vitals.get(attribute) is None)
    return missing * 100.0 / len(records)


def present_ratio(records: Sequence[Encounter], attribute: str) -> float:
    """Complement of :func:`missing_ratio`; the two sum to exactly 100."""
    return 100.0 - missing_ratio(records, attribute)


def filter_min_history(
    patients: Iterable[PatientRecord],
) -> Tuple[List[PatientRecord], List[PatientRecord]]:
    """Split patients into kept positives and kept negatives.

    A patient is positive iff some encounter carries a T2DM code.
    Positives are kept iff at least ``MIN_HISTORY_ENCOUNTERS`` encounters
    strictly precede the first T2DM encounter; negatives are kept iff
    they have at least that many encounters in total.
    """
    kept_positive: List[PatientRecord] = []
    kept_negative: List[PatientRecord] = []
    for patient in patients:
        t2dm_idx = patient.first_t2dm_index()
        if t2dm_idx is not None:
            if t2dm_idx >= MIN_HISTORY_ENCOUNTERS:
                kept_positive.append(patient)
        elif len(patient.encounters) >= MIN_HISTORY_ENCOUNTERS:
            kept_negative.append(patient)
    return kept_positive, kept_negative


def ewma_impute(patient: PatientRecord, attribute: str,
                cfg: ImputationConfig) -> PatientRecord:
    """Fill missing values of one attribute with a running EWMA.

    Iterating encounters in date order, the smoothed value ``s`` starts
    at the first observation and updates as ``s <- alpha*x + (1-alpha)*s``
    on each later observation. A gap is filled with the current ``s``;
    gaps before the first observation take the first observed value.
    Observed values are never altered.
    """
    values = [enc.vitals.get(attribute) for enc in patient.encounters]
    observed = [v for v in values if v is not None]
    if not observed:
        raise ValueError(f"patient {patient.patient_id} has no observation "
                         f"for {attribute!r}; cannot impute")
    alpha = cfg.smoothing_alpha
    first = observed[0]
    smoothed: Optional[float] = None
    new_encounters = []
    for enc, value in zip(patient.encounters, values):
        if value is None:
            filled = smoothed if smoothed is not None else first
            vitals = dict(enc.vitals)
            vitals[attribute] = filled
            enc = dataclasses.replace(enc, vitals=vitals)
        else:
            smoothed = value if smoothed is None else alpha * value + (1.0 - alpha) * smoothed
        new_encounters.append(enc)
    return dataclasses.replace(patient, encounters=tuple(new_encounters))


def build_example(patient: PatientRecord,
                  retained_attributes: Optional[Sequence[str]] = None) -> ExamplePoint:
    """Collapse a filtered, imputed patient into a single example point.

    Positives take diagnosis history strictly before the first T2DM
    encounter (T2DM codes excluded) and vitals from that encounter;
    negatives take the full history and vitals from the last encounter.
    Age is computed at the vitals-source encounter date.
    """
    t2dm_idx = patient.first_t2dm_index()
    if t2dm_idx is not None:
        if t2dm_idx == 0:
            raise ValueError(f"patient {patient.patient_id} has no history before "
                             "the first T2DM encounter")
        history = patient.encounters[:t2dm_idx]
        vitals_source = patient.encounters[t2dm_idx]
        label = 1
    else:
        if not patient.encounters:
            raise ValueError(f"patient {patient.patient_id} has no encounters")
        history = patient.encounters
        vitals_source = patient.encounters[-1]
        label = 0

    codes: Dict[str, None] = {}
    for enc in history:
        for code in enc.icd_codes:
            if not is_t2dm_code(code):
                codes.setdefault(code, None)

    if retained_attributes is None:
        retained_attributes = sorted(
            a for a, v in vitals_source.vitals.items() if v is not None)
    vitals_features = {}
    for attr in retained_attributes:
        value = vitals_source.vitals.get(attr)
        if value is None:
            raise ValueError(f"patient {patient.patient_id}: attribute {attr!r} "
                             "still missing at the vitals-source encounter")
        vitals_features[attr] = float(value)

    age_years = (vitals_source.date - patient.date_of_birth).days / DAYS_PER_YEAR
    return ExamplePoint(
        patient_id=patient.patient_id,
        diagnosis_codes=tuple(codes),
        vitals_features=vitals_features,
        age_years=age_years,
        gender=patient.gender,
        race=patient.race,
        label=label,
    )


@dataclass
class PipelineReport:
    """Stage-by-stage bookkeeping for one pipeline run."""

    n_patients_in: int = 0
    n_positive_identified: int = 0
    n_negative_identified: int = 0
    n_positive_kept_history: int = 0
    n_negative_kept_history: int = 0
    missing_ratios: Dict[str, float] = field(default_factory=dict)
    attributes_retained: List[str] = field(default_factory=list)
    attributes_dropped: List[str] = field(default_factory=list)
    n_patients_dropped_missing_vitals: int = 0
    n_positive_examples: int = 0
    n_negative_examples: int = 0
    errors: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def run_pipeline(
    raw_patients: Sequence[PatientRecord],
    cfg: ImputationConfig = ImputationConfig(),
) -> Tuple[List[ExamplePoint], PipelineReport]:
    """Run the full preprocessing chain and report stage counts.

    Per-patient failures are recorded in the report's error list rather
    than aborting the run.
    """
    report = PipelineReport(n_patients_in=len(raw_patients))
    report.n_positive_identified = sum(1 for p in raw_patients if p.is_positive())
    report.n_negative_identified = report.n_patients_in - report.n_positive_identified

    positives, negatives = filter_min_history(raw_patients)
    report.n_positive_kept_history = len(positives)
    report.n_negative_kept_history = len(negatives)
    kept = positives + negatives

    all_encounters = [enc for p in kept for enc in p.encounters]
    attributes = sorted({a for enc in all_encounters for a in enc.vitals})
    retained: List[str] = []
    for attr in attributes:
        ratio = missing_ratio(all_encounters, attr)
        report.missing_ratios[attr] = ratio
        if ratio > cfg.drop_threshold:
            report.attributes_dropped.append(attr)
        else:
            retained.append(attr)
    report.attributes_retained = list(retained)

    examples: List[ExamplePoint] = []
    for patient in kept:
        observed = {
            attr: any(enc.vitals.get(attr) is not None for enc in patient.encounters)
            for attr in retained
        }
        if not all(observed.values()):
            report.n_patients_dropped_missing_vitals += 1
            continue
        try:
            for attr in retained:
                patient = ewma_impute(patient, attr, cfg)
            examples.append(build_example(patient, retained))
        except ValueError as exc:
            report.errors.append(f"{patient.patient_id}: {exc}")

    report.n_positive_examples = sum(1 for e in examples if e.label == 1)
    report.n_negative_examples = len(examples) - report.n_positive_examples
    report.errors.sort()  # canonical order regardless of input ordering
    return examples, report


# ---------------------------------------------------------------------------
# file formats: JSON-Lines in, JSON-Lines out


def load_cohort(patients_path: Path, encounters_path: Path) -> List[PatientRecord]:
    """Read the two-file cohort format into patient records.

    The patients file has one object per patient
    ``{patient_id, dob, gender, race, sexual_orientation}``; the
    encounters file one object per visit
    ``{patient_id, date, icd_codes, vitals}``. Rows missing demographic
    fields are rejected.
    """
    encounters_by_patient: Dict[str, List[Encounter]] = {}
    with open(encounters_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                enc = Encounter(
                    patient_id=row["patient_id"],
                    date=dt.date.fromisoformat(row["date"]),
                    icd_codes=tuple(row["icd_codes"]),
                    vitals={k: (None if v is None else float(v))
                            for k, v in row.get("vitals", {}).items()},
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{encounters_path}:{line_no}: {exc}") from exc
            encounters_by_patient.setdefault(enc.patient_id, []).append(enc)

    patients: List[PatientRecord] = []
    with open(patients_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            missing = [k for k in ("patient_id", "dob", "gender", "race",
                                   "sexual_orientation") if not row.get(k)]
            if missing:
                raise ValueError(f"{patients_path}:{line_no}: missing demographic "
                                 f"fields {missing}")
            patients.append(PatientRecord(
                patient_id=row["patient_id"],
                date_of_birth=dt.date.fromisoformat(row["dob"]),
                gender=row["gender"],
                race=row["race"],
                sexual_orientation=row["sexual_orientation"],
                encounters=tuple(encounters_by_patient.get(row["patient_id"], ())),
            ))
    return patients


def example_to_dict(example: ExamplePoint) -> dict:
    return {
        "patient_id": example.patient_id,
        "diagnosis_codes": list(example.diagnosis_codes),
        "vitals_features": dict(example.vitals_features),
        "age_years": example.age_years,
        "gender": example.gender,
        "race": example.race,
        "label": example.label,
    }


def example_from_dict(row: dict) -> ExamplePoint:
    return ExamplePoint(
        patient_id=row["patient_id"],
        diagnosis_codes=tuple(row["diagnosis_codes"]),
        vitals_features={k: float(v) for k, v in row["vitals_features"].items()},
        age_years=float(row["age_years"]),
        gender=row["gender"],
        race=row["race"],
        label=int(row["label"]),
    )


def write_examples(examples: Iterable[ExamplePoint], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example_to_dict(example), sort_keys=True) + "\n")


def read_examples(path: Path) -> List[ExamplePoint]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(example_from_dict(json.loads(line)))
    return out
