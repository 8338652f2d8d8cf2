"""Cohort filtering, grouping, reference selection, and table IO."""

import numpy as np
import pytest

from bodyatlas.cohort import (
    ALL_GROUPS,
    GroupSpec,
    SubjectRecord,
    bmi_category,
    partition,
    read_subject_table,
    select_healthy,
    select_reference,
    write_exclusion_report,
    write_subject_table,
)


def _record(i, sex="female", bmi=22.0, **kw):
    defaults = dict(
        id=f"s{i}",
        sex=sex,
        age=50.0,
        height=170.0,
        weight=bmi * 1.7**2,
        bmi=bmi,
        body_fat=30.0,
    )
    defaults.update(kw)
    return SubjectRecord(**defaults)


def test_bmi_category_boundaries():
    assert bmi_category(18.4) is None
    assert bmi_category(18.5) == "normal"
    assert bmi_category(24.999) == "normal"
    assert bmi_category(25.0) == "overweight"
    assert bmi_category(29.999) == "overweight"
    assert bmi_category(30.0) == "obese"
    assert bmi_category(55.0) == "obese"
    with pytest.raises(ValueError):
        bmi_category(0.0)


def test_record_validation():
    with pytest.raises(ValueError):
        _record(0, sex="other")
    with pytest.raises(ValueError):
        _record(0, bmi=-1.0)
    with pytest.raises(ValueError):
        _record(0, body_fat=150.0)


def test_select_healthy_drops_flagged():
    recs = [
        _record(0),
        _record(1, has_cancer_record=True),
        _record(2, has_self_reported_disease=True),
        _record(3, has_operation_history=True),
    ]
    kept = select_healthy(recs)
    assert [r.id for r in kept] == ["s0"]


def test_partition_exhaustive_and_exclusive():
    rng = np.random.default_rng(0)
    recs = [
        _record(i, sex=("female" if rng.random() < 0.5 else "male"), bmi=rng.uniform(19, 40))
        for i in range(100)
    ]
    groups = partition(recs)
    seen = [r.id for members in groups.values() for r in members]
    assert sorted(seen) == sorted(r.id for r in recs)
    assert len(seen) == len(set(seen))
    for spec, members in groups.items():
        lo, hi = spec.bmi_range
        for r in members:
            assert r.sex == spec.sex
            assert lo <= r.bmi < hi


def test_partition_excludes_underweight():
    groups = partition([_record(0, bmi=17.0)])
    assert all(len(m) == 0 for m in groups.values())


def test_select_reference_prefers_median_subject():
    # one subject sits exactly at the median of every attribute
    recs = [
        _record(0, age=40.0, height=160.0, weight=60.0, bmi=20.0, body_fat=25.0),
        _record(1, age=50.0, height=170.0, weight=65.0, bmi=22.0, body_fat=30.0),
        _record(2, age=60.0, height=180.0, weight=70.0, bmi=24.0, body_fat=35.0),
    ]
    assert select_reference(recs).id == "s1"


def test_select_reference_single_subject():
    rec = _record(7)
    assert select_reference([rec]).id == "s7"


def test_group_spec_names():
    names = {g.name for g in ALL_GROUPS}
    assert "female_normal" in names and "male_obese" in names
    assert len(names) == 6


def test_subject_table_round_trip(tmp_path):
    recs = [
        _record(0, image_path="img/s0.nii.gz", label_paths=("lab/s0.nii.gz",)),
        _record(1, sex="male", bmi=31.0, has_cancer_record=True),
    ]
    path = tmp_path / "subjects.csv"
    write_subject_table(recs, path)
    back = read_subject_table(path)
    assert [r.id for r in back] == ["s0", "s1"]
    assert back[0].image_path == "img/s0.nii.gz"
    assert back[0].label_paths == ("lab/s0.nii.gz",)
    assert back[1].has_cancer_record is True
    assert back[1].bmi == pytest.approx(31.0)


def test_exclusion_report(tmp_path):
    path = tmp_path / "excluded.csv"
    write_exclusion_report([(_record(0, has_cancer_record=True), "cancer record")], path)
    text = path.read_text()
    assert "s0" in text and "cancer record" in text
