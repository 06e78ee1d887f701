"""Seeded synthetic EHR cohort generator.

Emits raw patients/encounters files in the ingestion format, with a
planted, bookkept signal: positive patients receive a T2DM-coded
encounter after at least four prior visits, carry comorbidity marker
codes in their pre-diagnosis history at a higher rate than negatives
do, and have mildly shifted weight-related vitals. Demographics are
drawn independently of the label, so per-gender and per-race
performance should agree up to sampling noise.

Vitals ranges are merely plausible (for exercising imputation), not a
clinical model. Generation is single-threaded over one sequential
random stream so identical seeds give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

from .nn.rng import RngStream
from .preprocess import MIN_HISTORY_ENCOUNTERS, is_t2dm_code

T2DM_DIAGNOSIS_CODE = "E11.9"

_BASE_DATE = dt.date(2012, 1, 1)

# (mean, sd) per generated vitals attribute
VITALS_DISTRIBUTIONS: Mapping[str, Tuple[float, float]] = {
    "Weight": (80.0, 15.0),
    "Height": (168.0, 10.0),
    "BMI": (27.0, 5.0),
    "Pulse": (75.0, 10.0),
    "Systolic Blood Pressure": (120.0, 15.0),
    "Diastolic Blood Pressure": (78.0, 10.0),
    "Temperature": (37.0, 0.4),
    "Respiration": (16.0, 3.0),
    "Oxygen Saturation": (97.0, 2.0),
    "Waist": (95.0, 12.0),
}

# additive vitals shift for positive patients (comorbid profile)
POSITIVE_VITALS_SHIFT: Mapping[str, float] = {
    "Weight": 8.0,
    "BMI": 3.0,
    "Systolic Blood Pressure": 6.0,
}

# additive vitals shift by gender
GENDER_VITALS_SHIFT: Mapping[str, Mapping[str, float]] = {
    "male": {"Height": 7.0, "Weight": 6.0},
    "female": {"Height": -7.0, "Weight": -6.0},
    "unspecified": {},
}

DEFAULT_MISSING_RATES: Mapping[str, float] = {
    "Weight": 0.10,
    "Height": 0.18,
    "BMI": 0.25,
    "Pulse": 0.26,
    "Systolic Blood Pressure": 0.13,
    "Diastolic Blood Pressure": 0.13,
    "Temperature": 0.56,
    "Respiration": 0.62,
    "Oxygen Saturation": 0.88,
    "Waist": 0.92,
}

DEFAULT_BACKGROUND_CODES = (
    "A09", "B34.9", "F32.9", "F41.1", "G43.9", "G47.0", "H10.9", "H52.4",
    "H66.9", "J02.9", "J06.9", "J20.9", "J30.9", "J45.9", "K21.9", "K29.7",
    "K59.0", "L20.9", "L30.9", "M25.5", "M54.5", "N39.0", "R05", "R10.9",
    "R42", "R51", "R53.1", "S61.4", "T14.9", "Z00.0",
)


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 10_000
    positive_prevalence: float = 0.1
    marker_codes: Tuple[str, ...] = ("I10", "E66.9", "E78.5")
    marker_prob_positive: float = 0.8
    marker_prob_negative: float = 0.2
    background_codes: Tuple[str, ...] = DEFAULT_BACKGROUND_CODES
    encounters_min: int = 5
    encounters_max: int = 12
    missing_rates: Mapping[str, float] = field(
        default_factory=lambda: dict(DEFAULT_MISSING_RATES))
    gender_weights: Mapping[str, float] = field(
        default_factory=lambda: {"female": 0.49, "male": 0.49, "unspecified": 0.02})
    race_weights: Mapping[str, float] = field(
        default_factory=lambda: {"asian": 0.15, "black": 0.25,
                                 "hispanic": 0.18, "white": 0.42})
    orientation_weights: Mapping[str, float] = field(
        default_factory=lambda: {"heterosexual": 0.90, "homosexual": 0.04,
                                 "bisexual": 0.03, "unspecified": 0.03})
    positive_age_range: Tuple[float, float] = (25.0, 80.0)
    negative_age_range: Tuple[float, float] = (1.0, 88.0)
    seed: int = 42

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if not 0.0 < self.positive_prevalence < 1.0:
            raise ValueError("positive_prevalence must be in (0, 1)")
        if self.encounters_min < MIN_HISTORY_ENCOUNTERS + 1:
            raise ValueError(f"encounters_min must be >= {MIN_HISTORY_ENCOUNTERS + 1} "
                             "so every patient can survive history filtering")
        if self.encounters_max < self.encounters_min:
            raise ValueError("encounters_max must be >= encounters_min")
        if not self.marker_prob_positive > self.marker_prob_negative:
            raise ValueError("marker_prob_positive must exceed marker_prob_negative")
        probs = [self.marker_prob_positive, self.marker_prob_negative,
                 *self.missing_rates.values()]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must be in [0, 1]")
        for code in (*self.marker_codes, *self.background_codes):
            if is_t2dm_code(code):
                raise ValueError(f"code {code!r} collides with the T2DM family")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["missing_rates"] = dict(self.missing_rates)
        d["gender_weights"] = dict(self.gender_weights)
        d["race_weights"] = dict(self.race_weights)
        d["orientation_weights"] = dict(self.orientation_weights)
        return d


def _weighted_choice(rng: RngStream, weights: Mapping[str, float]) -> str:
    names = sorted(weights)
    total = sum(weights[n] for n in names)
    probs = [weights[n] / total for n in names]
    return str(rng.choice(names, p=probs))


def generate_cohort(cfg: SynthConfig, out_dir: Path) -> dict:
    """Write patients.jsonl, encounters.jsonl, and bookkeeping.json.

    The bookkeeping records every planted fact (labels, history lengths,
    markers, per-attribute missingness) so pipeline stages can be
    checked against ground truth. Byte-identical for identical seeds.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = RngStream(cfg.seed)

    attributes = sorted(cfg.missing_rates)
    n_attrs = len(attributes)
    patients_rows: List[dict] = []
    encounter_rows: List[dict] = []
    patient_book: List[dict] = []
    missing_counts = {a: {"missing": 0, "total": 0} for a in attributes}
    marker_counts = {m: {"positive": 0, "negative": 0} for m in cfg.marker_codes}
    n_positive = 0

    for pid_no in range(cfg.n_patients):
        patient_id = f"p{pid_no:06d}"
        positive = bool(rng.random() < cfg.positive_prevalence)
        n_positive += positive
        n_enc = int(rng.integers(cfg.encounters_min, cfg.encounters_max + 1))
        t2dm_index = int(rng.integers(MIN_HISTORY_ENCOUNTERS, n_enc)) if positive else None

        gender = _weighted_choice(rng, cfg.gender_weights)
        race = _weighted_choice(rng, cfg.race_weights)
        orientation = _weighted_choice(rng, cfg.orientation_weights)

        lo, hi = (cfg.positive_age_range if positive else cfg.negative_age_range)
        age_years = float(rng.uniform(lo, hi))
        first_date = _BASE_DATE + dt.timedelta(days=int(rng.integers(0, 2500)))
        dob = first_date - dt.timedelta(days=int(round(age_years * 365.25)))
        gaps = rng.integers(30, 400, size=n_enc)
        dates = [first_date]
        for gap in gaps[1:]:
            dates.append(dates[-1] + dt.timedelta(days=int(gap)))

        # codes: markers planted per class rate, background noise everywhere
        marker_prob = (cfg.marker_prob_positive if positive
                       else cfg.marker_prob_negative)
        marker_present = rng.random(len(cfg.marker_codes)) < marker_prob
        history_span = t2dm_index if positive else n_enc
        marker_slots = rng.integers(0, history_span, size=len(cfg.marker_codes))
        codes_per_encounter: List[List[str]] = [[] for _ in range(n_enc)]
        planted_markers = []
        for m, present, slot in zip(cfg.marker_codes, marker_present, marker_slots):
            if present:
                codes_per_encounter[int(slot)].append(m)
                planted_markers.append(m)
                marker_counts[m]["positive" if positive else "negative"] += 1
        bg_counts = rng.integers(0, 3, size=n_enc)
        bg_picks = rng.integers(0, len(cfg.background_codes), size=(n_enc, 2))
        for i in range(n_enc):
            for j in range(int(bg_counts[i])):
                code = cfg.background_codes[int(bg_picks[i, j])]
                if code not in codes_per_encounter[i]:
                    codes_per_encounter[i].append(code)
        if positive:
            codes_per_encounter[t2dm_index].append(T2DM_DIAGNOSIS_CODE)

        # vitals: demographic- and label-conditioned normals with gaps
        missing = rng.random((n_enc, n_attrs))
        values = rng.normal(0.0, 1.0, (n_enc, n_attrs))
        for i in range(n_enc):
            vitals: Dict[str, object] = {}
            for j, attr in enumerate(attributes):
                missing_counts[attr]["total"] += 1
                if missing[i, j] < cfg.missing_rates[attr]:
                    vitals[attr] = None
                    missing_counts[attr]["missing"] += 1
                else:
                    mean, sd = VITALS_DISTRIBUTIONS.get(attr, (50.0, 10.0))
                    mean += GENDER_VITALS_SHIFT.get(gender, {}).get(attr, 0.0)
                    if positive:
                        mean += POSITIVE_VITALS_SHIFT.get(attr, 0.0)
                    vitals[attr] = max(round(mean + sd * float(values[i, j]), 2), 0.1)
            encounter_rows.append({
                "patient_id": patient_id,
                "date": dates[i].isoformat(),
                "icd_codes": codes_per_encounter[i],
                "vitals": vitals,
            })

        patients_rows.append({
            "patient_id": patient_id,
            "dob": dob.isoformat(),
            "gender": gender,
            "race": race,
            "sexual_orientation": orientation,
        })
        patient_book.append({
            "patient_id": patient_id,
            "label": int(positive),
            "n_encounters": n_enc,
            "n_before_t2dm": t2dm_index,
            "markers": planted_markers,
        })

    bookkeeping = {
        "config": cfg.to_dict(),
        "n_patients": cfg.n_patients,
        "n_positive": n_positive,
        "n_negative": cfg.n_patients - n_positive,
        "marker_counts": marker_counts,
        "missing_counts": missing_counts,
        "patients": patient_book,
    }

    _write_jsonl(patients_rows, out_dir / "patients.jsonl")
    _write_jsonl(encounter_rows, out_dir / "encounters.jsonl")
    (out_dir / "bookkeeping.json").write_text(
        json.dumps(bookkeeping, indent=2, sort_keys=True), encoding="utf-8")
    return bookkeeping


def _write_jsonl(rows: List[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
