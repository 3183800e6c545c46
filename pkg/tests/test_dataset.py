import numpy as np
import pytest

from gage.dataset import (COLUMNS, Manifest, dataset_digest, generate_dataset, split_counts, split_dataset)
from gage.errors import ConfigurationError, FormatError
from gage.pgm import decode_pgm, encode_pgm, read_pgm, write_pgm
from gage.phantom import AGE_MAX, AGE_MIN, VIEWS

# frozen from the first generation of the 10-subject desk dataset, seed 7
GOLDEN_SEED7_SHA256 = "68e77d7fba0a778e5d95e82a0058d187aca90c3a4ee9be7eeb00cae6e2b184c8"


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    return generate_dataset(10, 7, root), root


def test_pgm_example_bytes():
    img = np.array([[0, 255], [128, 7]], np.uint8)
    assert encode_pgm(img) == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 7])


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(13, 7), dtype=np.uint8)
    write_pgm(img, tmp_path / "a.pgm")
    back = read_pgm(tmp_path / "a.pgm")
    assert back.dtype == np.uint8 and np.array_equal(back, img)
    assert encode_pgm(back) == (tmp_path / "a.pgm").read_bytes()


@pytest.mark.parametrize("buf,offset", [
    (b"P5\n2 2\n255\n\x00\x01\x02", "11"),
    (b"P6\n2 2\n255\n\x00\x01\x02\x03", "0"),
    (b"P5\n2 2\n65535\n" + bytes(8), "7"),
    (b"P5\n# c\n2 2\n255\n" + bytes(4), "3"),
    (b"P5\n2 2\n255\n" + bytes(5), "15"),
])
def test_pgm_errors_name_offsets(buf, offset):
    with pytest.raises(FormatError, match=f"offset {offset}"):
        decode_pgm(buf)


def test_split_counts_rule():
    assert split_counts(741, (0.7, 0.1, 0.2)) == (518, 74, 149)
    assert split_counts(300, (0.7, 0.1, 0.2)) == (210, 30, 60)
    with pytest.raises(ConfigurationError):
        split_counts(10, (0.5, 0.6, 0.1))


def test_golden_digest(small):
    _, root = small
    assert dataset_digest(root) == GOLDEN_SEED7_SHA256


def test_regenerate_is_identical(small, tmp_path):
    _, root = small
    generate_dataset(10, 7, tmp_path)
    assert dataset_digest(tmp_path) == dataset_digest(root)
    assert (tmp_path / "manifest.csv").read_bytes() == (root / "manifest.csv").read_bytes()


def test_manifest_contents(small):
    manifest, root = small
    text = (root / "manifest.csv").read_bytes()
    assert b"\r" not in text
    assert text.decode().splitlines()[0] == ",".join(COLUMNS)
    assert len(manifest) == 30
    for view in VIEWS:
        ids = [s.sample_id for s in manifest.select(view)]
        assert len(ids) == len(set(ids)) == 10
    for s in manifest.samples:
        assert (root / s.image_path).exists()
        assert AGE_MIN <= s.age_days <= AGE_MAX
        assert manifest.image(s).shape == (96, 96)


def test_read_back_equals_written(small):
    manifest, root = small
    assert Manifest.read(root).to_csv() == manifest.to_csv()


def test_subject_level_split_no_leakage(tmp_path):
    manifest = generate_dataset(40, 3, tmp_path)
    by_subject = {}
    for s in manifest.samples:
        by_subject.setdefault(s.sample_id, set()).add(s.split)
    assert all(len(v) == 1 for v in by_subject.values())
    counts = [sum(1 for v in by_subject.values() if split in v) for split in ("train", "val", "test")]
    assert counts == [28, 4, 8]
    same = split_dataset(manifest, (0.7, 0.1, 0.2), 3)
    assert [s.split for s in same.samples] == [s.split for s in manifest.samples]
    other = split_dataset(manifest, (0.7, 0.1, 0.2), 4)
    assert [s.split for s in other.samples] != [s.split for s in manifest.samples]


def test_views_share_age_but_not_pose(small):
    manifest, _ = small
    a, s = manifest.select("axial")[0], manifest.select("sagittal")[0]
    assert a.age_days == s.age_days and a.gt_box != s.gt_box


def test_bad_manifest_header(tmp_path):
    (tmp_path / "manifest.csv").write_text("id,view\n1,axial\n")
    with pytest.raises(FormatError):
        Manifest.read(tmp_path)


def test_unwritable_output_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        generate_dataset(1, 0, blocker / "sub")
