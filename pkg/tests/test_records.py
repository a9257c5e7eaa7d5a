"""Manifest schema, validation, and subject-level splitting."""

import dataclasses
import json

import numpy as np
import pytest

from eyelab.errors import (
    DanglingPath,
    DataError,
    DegenerateSplit,
    SchemaViolation,
    UnknownModality,
)
from eyelab.imaging import save_png
from eyelab.records import (
    DiseaseLabel,
    ImageRecord,
    LandmarkSet,
    LongitudinalPair,
    Manifest,
    Modality,
    load_manifest,
    load_record_image,
    load_record_mask,
    manifest_digest,
    panel_names,
    save_manifest,
    split_dataset,
)


def make_record(tmp_path, i, subject=None, modality=Modality.FUNDUS, label=0):
    img = ((np.arange(64).reshape(8, 8) + i) % 256).astype(np.uint8)
    path = f"img-{i}.png"
    save_png(img.astype(np.uint8), tmp_path / path)
    return ImageRecord(
        id=f"r{i}",
        subject_id=subject or f"s{i}",
        modality=modality,
        image_path=path,
        height=8,
        width=8,
        labels=DiseaseLabel(class_index=label, class_name=f"c{label}"),
    )


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        records = [make_record(tmp_path, i) for i in range(4)]
        m = Manifest(records=records, pairs=[], root_dir=tmp_path)
        save_manifest(m, tmp_path / "manifest.jsonl")
        back = load_manifest(tmp_path / "manifest.jsonl")
        assert [r.id for r in back.records] == [r.id for r in records]
        assert manifest_digest(back) == manifest_digest(m)

    def test_pairs_survive(self, tmp_path):
        records = [make_record(tmp_path, i) for i in range(2)]
        pair = LongitudinalPair(subject_id="s0", image_t0="r0",
                                delta_days=365.0, outcome=1)
        m = Manifest(records=records, pairs=[pair], root_dir=tmp_path)
        save_manifest(m, tmp_path / "manifest.jsonl")
        back = load_manifest(tmp_path / "manifest.jsonl")
        assert len(back.pairs) == 1
        assert back.pairs[0].delta_days == 365.0
        assert back.pairs[0].outcome == 1

    def test_landmarks_and_masks(self, tmp_path):
        rec = make_record(tmp_path, 0)
        save_png(np.zeros((8, 8), np.uint8), tmp_path / "m0.png")
        rec = dataclasses.replace(
            rec, mask_path="m0.png",
            landmarks=LandmarkSet(points=((1.0, 2.0), (3.0, 4.0), (5.0, 6.0))))
        m = Manifest(records=[rec], pairs=[], root_dir=tmp_path)
        save_manifest(m, tmp_path / "manifest.jsonl")
        back = load_manifest(tmp_path / "manifest.jsonl")
        assert back.records[0].landmarks.points[1] == (3.0, 4.0)
        mask = load_record_mask(back, back.records[0])
        assert mask.shape == (8, 8)


class TestValidation:
    def _write_lines(self, tmp_path, lines):
        path = tmp_path / "manifest.jsonl"
        path.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
        return path

    def _base_record_obj(self, tmp_path):
        save_png(np.zeros((8, 8), np.uint8), tmp_path / "a.png")
        return {
            "id": "r0", "subject_id": "s0", "modality": "FUNDUS",
            "image_path": "a.png", "height": 8, "width": 8,
        }

    def test_unknown_field_rejected(self, tmp_path):
        obj = self._base_record_obj(tmp_path)
        obj["surprise"] = 1
        path = self._write_lines(tmp_path, [{"version": "1"}, obj])
        with pytest.raises(SchemaViolation) as exc:
            load_manifest(path)
        assert "surprise" in str(exc.value)
        assert exc.value.line == 2

    def test_unknown_modality_rejected(self, tmp_path):
        obj = self._base_record_obj(tmp_path)
        obj["modality"] = "xray"
        path = self._write_lines(tmp_path, [{"version": "1"}, obj])
        with pytest.raises(UnknownModality):
            load_manifest(path)

    def test_duplicate_id_rejected(self, tmp_path):
        obj = self._base_record_obj(tmp_path)
        path = self._write_lines(tmp_path, [{"version": "1"}, obj, dict(obj)])
        with pytest.raises(DataError):
            load_manifest(path)

    def test_missing_image_rejected(self, tmp_path):
        obj = self._base_record_obj(tmp_path)
        obj["image_path"] = "gone.png"
        path = self._write_lines(tmp_path, [{"version": "1"}, obj])
        with pytest.raises(DanglingPath):
            load_manifest(path)

    def test_dimension_mismatch_rejected(self, tmp_path):
        obj = self._base_record_obj(tmp_path)
        obj["height"] = 16
        path = self._write_lines(tmp_path, [{"version": "1"}, obj])
        with pytest.raises(DataError):
            load_manifest(path)

    def test_check_files_off_skips_existence(self, tmp_path):
        obj = self._base_record_obj(tmp_path)
        obj["image_path"] = "gone.png"
        path = self._write_lines(tmp_path, [{"version": "1"}, obj])
        m = load_manifest(path, check_files=False)
        assert m.records[0].image_path == "gone.png"

    def test_landmarks_out_of_bounds_rejected(self, tmp_path):
        obj = self._base_record_obj(tmp_path)
        obj["landmarks"] = [[1.0, 1.0], [99.0, 1.0], [2.0, 2.0]]
        path = self._write_lines(tmp_path, [{"version": "1"}, obj])
        with pytest.raises(DataError):
            load_manifest(path)


class TestLoadImage:
    def test_float_range_and_shape(self, tmp_path):
        rec = make_record(tmp_path, 3)
        m = Manifest(records=[rec], pairs=[], root_dir=tmp_path)
        img = load_record_image(m, rec)
        assert img.shape == (8, 8, 1)
        assert img.dtype == np.float64
        assert 0.0 <= img.min() and img.max() <= 1.0


class TestBiomarkerPanel:
    def test_names_are_stable(self):
        names = panel_names()
        assert len(names) == 38
        assert names[:5] == ("HGB", "RBC", "UA", "MCHC", "TC")
        assert len(set(names)) == 38


class TestSplit:
    def _manifest(self, tmp_path, n_subjects, per_subject=2):
        records = []
        i = 0
        for s in range(n_subjects):
            for _ in range(per_subject):
                records.append(make_record(tmp_path, i, subject=f"s{s}"))
                i += 1
        return Manifest(records=records, pairs=[], root_dir=tmp_path)

    def test_no_subject_straddles_splits(self, tmp_path):
        m = self._manifest(tmp_path, 10)
        a, b, c = split_dataset(m, (0.5, 0.2, 0.3), seed=4)
        subs = [set(x.subjects()) for x in (a, b, c)]
        assert subs[0] & subs[1] == set()
        assert subs[0] & subs[2] == set()
        assert subs[1] & subs[2] == set()
        assert len(a.records) + len(b.records) + len(c.records) == len(m.records)

    def test_deterministic_in_seed(self, tmp_path):
        m = self._manifest(tmp_path, 8)
        a1, _, _ = split_dataset(m, (0.6, 0.0, 0.4), seed=9)
        a2, _, _ = split_dataset(m, (0.6, 0.0, 0.4), seed=9)
        assert [r.id for r in a1.records] == [r.id for r in a2.records]

    def test_different_seed_moves_subjects(self, tmp_path):
        m = self._manifest(tmp_path, 12)
        a1, _, _ = split_dataset(m, (0.5, 0.0, 0.5), seed=0)
        a2, _, _ = split_dataset(m, (0.5, 0.0, 0.5), seed=1)
        assert set(a1.subjects()) != set(a2.subjects())

    def test_apportionment_counts(self, tmp_path):
        m = self._manifest(tmp_path, 10, per_subject=1)
        a, b, c = split_dataset(m, (0.5, 0.2, 0.3), seed=0)
        assert (len(a.records), len(b.records), len(c.records)) == (5, 2, 3)

    def test_degenerate_split_raises(self, tmp_path):
        m = self._manifest(tmp_path, 3, per_subject=1)
        with pytest.raises(DegenerateSplit):
            split_dataset(m, (0.98, 0.01, 0.01), seed=0)

    def test_fractions_must_sum_to_one(self, tmp_path):
        m = self._manifest(tmp_path, 4)
        with pytest.raises(DataError):
            split_dataset(m, (0.5, 0.2, 0.2), seed=0)

    def test_pairs_follow_their_subject(self, tmp_path):
        records = [make_record(tmp_path, i, subject=f"s{i}") for i in range(6)]
        pairs = [LongitudinalPair(subject_id=f"s{i}", image_t0=f"r{i}",
                                  delta_days=100.0, outcome=i % 2)
                 for i in range(6)]
        m = Manifest(records=records, pairs=pairs, root_dir=tmp_path)
        a, _, c = split_dataset(m, (0.5, 0.0, 0.5), seed=2)
        for part in (a, c):
            ids = {r.id for r in part.records}
            for p in part.pairs:
                assert p.image_t0 in ids
