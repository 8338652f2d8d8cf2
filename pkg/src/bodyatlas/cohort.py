"""Phenotype-driven cohort handling: health filtering, BMI/sex partitioning,
and median-based reference selection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BMI_NORMAL_LOW = 18.5
BMI_OVERWEIGHT_LOW = 25.0
BMI_OBESE_LOW = 30.0

CATEGORIES = ("normal", "overweight", "obese")
SEXES = ("female", "male")

# attributes entering the reference-selection distance
REFERENCE_ATTRIBUTES = ("age", "weight", "height", "bmi", "body_fat")

CSV_HEADER = [
    "id", "sex", "age", "height_cm", "weight_kg", "bmi", "body_fat_pct",
    "cancer", "disease", "operation", "image", "labels",
]


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    sex: str
    age: float
    height: float  # cm
    weight: float  # kg
    bmi: float
    body_fat: float  # percent
    has_cancer_record: bool = False
    has_self_reported_disease: bool = False
    has_operation_history: bool = False
    image_path: str = ""
    label_paths: tuple[str, ...] = ()

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.bmi <= 0 or self.height <= 0 or self.weight <= 0:
            raise ValueError(f"subject {self.id}: non-positive body measurement")
        if not 0 <= self.body_fat <= 100:
            raise ValueError(f"subject {self.id}: body fat {self.body_fat} out of range")


@dataclass(frozen=True)
class GroupSpec:
    sex: str
    category: str

    def __post_init__(self):
        if self.sex not in SEXES or self.category not in CATEGORIES:
            raise ValueError(f"invalid group {self.sex}/{self.category}")

    @property
    def name(self) -> str:
        return f"{self.sex}_{self.category}"

    @property
    def bmi_range(self) -> tuple[float, float]:
        """Half-open [low, high) interval; obese is unbounded above."""
        return {
            "normal": (BMI_NORMAL_LOW, BMI_OVERWEIGHT_LOW),
            "overweight": (BMI_OVERWEIGHT_LOW, BMI_OBESE_LOW),
            "obese": (BMI_OBESE_LOW, float("inf")),
        }[self.category]


ALL_GROUPS = tuple(GroupSpec(s, c) for s in SEXES for c in CATEGORIES)


def bmi_category(bmi: float) -> str | None:
    """BMI class: normal [18.5,25), overweight [25,30), obese >=30.

    Below 18.5 returns None (underweight subjects are excluded).
    """
    if bmi <= 0:
        raise ValueError(f"non-positive bmi {bmi}")
    if bmi < BMI_NORMAL_LOW:
        return None
    if bmi < BMI_OVERWEIGHT_LOW:
        return "normal"
    if bmi < BMI_OBESE_LOW:
        return "overweight"
    return "obese"


def select_healthy(records: list[SubjectRecord]) -> list[SubjectRecord]:
    """Keep subjects with no cancer record, self-reported disease, or
    operation history."""
    return [
        r
        for r in records
        if not (r.has_cancer_record or r.has_self_reported_disease or r.has_operation_history)
    ]


def partition(records: list[SubjectRecord]):
    """Split records into the six sex x BMI groups.

    Returns (groups, excluded) where groups maps group name -> record list
    and excluded lists (record, reason) pairs (underweight only; invalid
    records are rejected at construction).
    """
    groups: dict[str, list[SubjectRecord]] = {g.name: [] for g in ALL_GROUPS}
    excluded: list[tuple[SubjectRecord, str]] = []
    for r in records:
        cat = bmi_category(r.bmi)
        if cat is None:
            excluded.append((r, f"underweight (bmi {r.bmi:g} < {BMI_NORMAL_LOW})"))
            continue
        groups[GroupSpec(r.sex, cat).name].append(r)
    return groups, excluded


def _attribute_matrix(group: list[SubjectRecord]) -> np.ndarray:
    return np.array([[getattr(r, a) for a in REFERENCE_ATTRIBUTES] for r in group], dtype=np.float64)


def select_reference(group: list[SubjectRecord]) -> SubjectRecord:
    """The subject closest to the group's median phenotype vector.

    Each attribute is normalized by its interquartile range (falling back to
    the standard deviation, then 1) before the Euclidean distance. Ties are
    broken by lowest subject id; medians use the lower-median convention.
    """
    if not group:
        raise ValueError("empty group")
    mat = _attribute_matrix(group)
    n = len(group)
    med = np.sort(mat, axis=0)[(n - 1) // 2]  # lower median
    q1, q3 = np.percentile(mat, [25, 75], axis=0)
    scale = q3 - q1
    sd = mat.std(axis=0)
    scale = np.where(scale > 0, scale, sd)
    scale = np.where(scale > 0, scale, 1.0)
    dist = np.sqrt((((mat - med) / scale) ** 2).sum(axis=1))
    order = sorted(range(n), key=lambda i: (dist[i], group[i].id))
    return group[order[0]]


# ---------------------------------------------------------------------------
# CSV interface


def _parse_flag(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes", "y")


def read_subject_table(path) -> list[SubjectRecord]:
    """Subject table CSV with header ``id,sex,age,height_cm,weight_kg,bmi,
    body_fat_pct,cancer,disease,operation,image,labels``; the labels column
    holds ';'-separated paths. Raises with the offending row number."""
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"subject table missing columns: {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(
                    SubjectRecord(
                        id=row["id"].strip(),
                        sex=row["sex"].strip().lower(),
                        age=float(row["age"]),
                        height=float(row["height_cm"]),
                        weight=float(row["weight_kg"]),
                        bmi=float(row["bmi"]),
                        body_fat=float(row["body_fat_pct"]),
                        has_cancer_record=_parse_flag(row["cancer"]),
                        has_self_reported_disease=_parse_flag(row["disease"]),
                        has_operation_history=_parse_flag(row["operation"]),
                        image_path=row["image"].strip(),
                        label_paths=tuple(p for p in row["labels"].split(";") if p.strip()),
                    )
                )
            except (ValueError, KeyError) as exc:
                raise ValueError(f"subject table row {lineno}: {exc}") from exc
    return records


def write_subject_table(records: list[SubjectRecord], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(
                [
                    r.id, r.sex, r.age, r.height, r.weight, r.bmi, r.body_fat,
                    int(r.has_cancer_record), int(r.has_self_reported_disease),
                    int(r.has_operation_history), r.image_path, ";".join(r.label_paths),
                ]
            )


def write_exclusion_report(excluded: list[tuple[SubjectRecord, str]], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "reason"])
        for r, reason in excluded:
            w.writerow([r.id, reason])
