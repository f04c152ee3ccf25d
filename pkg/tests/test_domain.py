import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histrem import domain
from histrem.domain import (
    ACTIVITY,
    REMISSION,
    DanglingReference,
    DuplicateId,
    GeboesGrade,
    MalformedGrade,
    MissingField,
    SizeMismatch,
    all_grades,
    binarize,
    make_split,
    parse_grade,
)

# Independent oracle: the full grade order written out by hand, lowest first.
ORDERED_TOKENS = [
    "0", "0.1", "0.2", "0.3",
    "1", "1.1", "1.2", "1.3",
    "2A", "2A.1", "2A.2", "2A.3",
    "2B", "2B.1", "2B.2", "2B.3",
    "3", "3.1", "3.2", "3.3",
    "4", "4.1", "4.2", "4.3",
    "5", "5.1", "5.2", "5.3",
]


def test_parse_grade_examples():
    g = parse_grade("3.2")
    assert (g.major, g.subscore) == ("3", 2)
    assert parse_grade("0") == GeboesGrade("0", 0)
    g2 = parse_grade("2B.1")
    assert (g2.major, g2.subscore) == ("2B", 1)
    assert g2 < parse_grade("3.0")


@pytest.mark.parametrize("bad", ["6", "2C", "3.x", "3.4", "", "2A.", ".2", "3..1", "03", "2b"])
def test_parse_grade_malformed(bad):
    with pytest.raises(MalformedGrade):
        parse_grade(bad)


def test_grade_total_order_exhaustive():
    grades = [parse_grade(t) for t in ORDERED_TOKENS]
    assert len(grades) == 28
    assert all_grades() == grades
    for i, j in itertools.product(range(28), repeat=2):
        a, b = grades[i], grades[j]
        assert (a < b) == (i < j)
        assert (a == b) == (i == j)
        # antisymmetry
        assert not (a < b and b < a)
    # transitivity over all triples
    for i, j, k in itertools.combinations(range(28), 3):
        assert grades[i] < grades[j] < grades[k]


@given(st.sampled_from(domain.GRADE_MAJORS), st.integers(0, 3))
def test_parse_format_round_trip(major, sub):
    canonical = major if sub == 0 else f"{major}.{sub}"
    assert str(parse_grade(canonical)) == canonical
    # the explicit ".0" spelling parses to the same grade
    assert parse_grade(f"{major}.0") == parse_grade(major)


def test_binarize_brute_force():
    # oracle: position in the hand-written order relative to "3.2"
    cut = ORDERED_TOKENS.index("3.2")
    for i, token in enumerate(ORDERED_TOKENS):
        expected = ACTIVITY if i >= cut else REMISSION
        assert binarize(parse_grade(token)) == expected


def test_binarize_examples_and_upset():
    assert binarize(GeboesGrade("3", 1)) == REMISSION
    assert binarize(GeboesGrade("3", 2)) == ACTIVITY
    assert binarize(GeboesGrade("5", 0)) == ACTIVITY
    labels = [binarize(g) for g in all_grades()]
    assert REMISSION in labels and ACTIVITY in labels
    # ACTIVITY is an up-set: once active, everything above is active
    first_active = labels.index(ACTIVITY)
    assert all(lab == ACTIVITY for lab in labels[first_active:])


def _write_manifest(tmp_path, lines):
    p = tmp_path / "manifest.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


BASE_LINES = [
    '{"kind":"patient","patient_id":"p1","metadata":{"sex":"F"}}',
    '{"kind":"patient","patient_id":"p2","metadata":{}}',
    '{"kind":"segment","segment_id":"s1","patient_id":"p1","geboes":"2A"}',
    '{"kind":"segment","segment_id":"s2","patient_id":"p1","geboes":"3.2"}',
    '{"kind":"segment","segment_id":"s3","patient_id":"p2","geboes":"0"}',
    '{"kind":"image","image_id":"i1","segment_id":"s1","path":"a.png"}',
    '{"kind":"image","image_id":"i2","segment_id":"s1","path":"b.png"}',
    '{"kind":"image","image_id":"i3","segment_id":"s2","path":"c.png"}',
    '{"kind":"image","image_id":"i4","segment_id":"s2","path":"d.png"}',
    '{"kind":"image","image_id":"i5","segment_id":"s2","path":"e.png"}',
    '{"kind":"image","image_id":"i6","segment_id":"s3","path":"f.png"}',
    '{"kind":"image","image_id":"i7","segment_id":"s3","path":"g.png"}',
]


def test_load_manifest_counts(tmp_path):
    ds = domain.load_manifest(_write_manifest(tmp_path, BASE_LINES))
    assert len(ds.patients) == 2
    assert len(ds.segments) == 3
    assert len(ds.images) == 7
    assert ds.patients["p1"].segment_ids == ["s1", "s2"]
    assert ds.segments["s2"].label == ACTIVITY
    assert ds.segments["s1"].label == REMISSION
    assert ds.segments["s2"].image_ids == ["i3", "i4", "i5"]


def test_load_manifest_dangling_patient(tmp_path):
    lines = BASE_LINES + ['{"kind":"segment","segment_id":"s9","patient_id":"pX","geboes":"1"}',
                          '{"kind":"image","image_id":"i9","segment_id":"s9","path":"x.png"}']
    with pytest.raises(DanglingReference, match="pX"):
        domain.load_manifest(_write_manifest(tmp_path, lines))


def test_load_manifest_dangling_segment(tmp_path):
    lines = BASE_LINES + ['{"kind":"image","image_id":"i9","segment_id":"sX","path":"x.png"}']
    with pytest.raises(DanglingReference, match="sX"):
        domain.load_manifest(_write_manifest(tmp_path, lines))


def test_load_manifest_duplicate_id(tmp_path):
    lines = BASE_LINES + ['{"kind":"image","image_id":"i1","segment_id":"s1","path":"z.png"}']
    with pytest.raises(DuplicateId, match="line 13"):
        domain.load_manifest(_write_manifest(tmp_path, lines))


def test_load_manifest_missing_field(tmp_path):
    lines = ['{"kind":"patient","patient_id":"p1"}',
             '{"kind":"segment","segment_id":"s1","patient_id":"p1"}']
    with pytest.raises(MissingField, match="line 2"):
        domain.load_manifest(_write_manifest(tmp_path, lines))


def test_load_manifest_invalid_json_names_line(tmp_path):
    lines = BASE_LINES + ["{not json"]
    with pytest.raises(domain.ManifestError, match="line 13"):
        domain.load_manifest(_write_manifest(tmp_path, lines))


def test_load_manifest_synth_counts(clinic_scale_ds):
    assert len(clinic_scale_ds.dataset.segments) == 154
    assert len(clinic_scale_ds.dataset.images) == 154 * 5


def test_label_inheritance(small_ds):
    ds = small_ds.dataset
    for img in ds.images.values():
        seg = ds.segments[img.segment_id]
        assert seg.label == binarize(seg.grade)


def _fake_segments(n, patients=None):
    segs = {}
    for i in range(n):
        pid = patients[i] if patients else f"p{i}"
        sid = f"s{i:03d}"
        segs[sid] = domain.SegmentRecord(sid, pid, parse_grade("1"), REMISSION, ["x"])
    return segs


def test_make_split_exact_sizes():
    segs = _fake_segments(154)
    split = make_split(segs, (103, 16, 35), seed=7)
    assert (len(split.train), len(split.validation), len(split.test)) == (103, 16, 35)
    assert split.train | split.validation | split.test == frozenset(segs)
    assert not (split.train & split.validation or split.train & split.test
                or split.validation & split.test)


def test_make_split_deterministic():
    segs = _fake_segments(20)
    assert make_split(segs, (10, 5, 5), seed=3) == make_split(segs, (10, 5, 5), seed=3)
    assert make_split(segs, (10, 5, 5), seed=3) != make_split(segs, (10, 5, 5), seed=4)


def test_make_split_three_singletons():
    segs = _fake_segments(3)
    split = make_split(segs, (1, 1, 1), seed=0)
    for sid in segs:
        assert sum(sid in part for part in (split.train, split.validation, split.test)) == 1


def test_make_split_size_mismatch():
    with pytest.raises(SizeMismatch):
        make_split(_fake_segments(10), (5, 3, 3), seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_make_split_partition_property(n, seed):
    segs = _fake_segments(n)
    a = n // 3
    b = (n - a) // 2
    split = make_split(segs, (a, b, n - a - b), seed=seed)
    assert len(split.train) == a and len(split.validation) == b
    assert split.train | split.validation | split.test == frozenset(segs)
    assert len(split.train) + len(split.validation) + len(split.test) == n


def test_make_split_patient_mode_no_straddle():
    patients = [f"q{i % 5}" for i in range(20)]
    segs = _fake_segments(20, patients)
    split = make_split(segs, (3, 1, 1), seed=2, unit="patient")
    for part in (split.train, split.validation, split.test):
        pids = {segs[s].patient_id for s in part}
        for pid in pids:
            owned = {s for s, rec in segs.items() if rec.patient_id == pid}
            assert owned <= part


def test_split_manifest_round_trip():
    segs = _fake_segments(9)
    split = make_split(segs, (5, 2, 2), seed=1)
    text = "\n".join(domain.split_lines(split))
    assert text.splitlines()[0].startswith("train: ")
    assert domain.parse_split(text) == split
    # byte-stable: serializing twice gives identical text
    assert "\n".join(domain.split_lines(split)) == text


def test_split_manifest_round_trip_with_empty_section():
    segs = _fake_segments(2)
    split = make_split(segs, (0, 1, 1), seed=0)
    assert domain.parse_split("\n".join(domain.split_lines(split))) == split
