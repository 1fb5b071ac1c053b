import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtmdseg.data import (EXAM_MAGIC, AugmentationPolicy, AugmentDraw, ChecksumMismatchError,
                          MalformedHeaderError, TruncatedPayloadError, apply_augmentation, augment,
                          exams_to_slices, generate_dataset, generate_exam, load_dataset, load_exam,
                          normalize_slice, save_dataset, save_exam)


@pytest.fixture(scope="module")
def audit_exams():
    """One exam per domain for each of 50 seeds."""
    return {s: (generate_exam(s, 0, 0), generate_exam(s, 1, 0)) for s in range(50)}


def test_determinism():
    a, b = generate_exam(5, 1, 2), generate_exam(5, 1, 2)
    assert a[0].voxels.tobytes() == b[0].voxels.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    c = generate_exam(5, 1, 3)
    assert a[0].voxels.tobytes() != c[0].voxels.tobytes()


def test_label_sets_foreground_and_finiteness(audit_exams):
    for s, ((v0, l0), (v1, l1)) in audit_exams.items():
        assert set(np.unique(l0.labels)) == {0, 1, 2, 3}, s
        assert set(np.unique(l1.labels)) == {0, 1, 2}, s
        for v, l in ((v0, l0), (v1, l1)):
            frac = (l.labels > 0).mean()
            assert 0.02 <= frac <= 0.30, (s, frac)
            assert np.isfinite(v.voxels).all() and v.voxels.dtype == np.float32
            assert v.voxels.shape == (16, 64, 64)


def test_shoulder_domain_is_noisier(audit_exams):
    def background_sd(v, l):
        # noise estimate from first differences along x, away from structures
        d = np.diff(v.voxels, axis=2)[(l.labels[:, :, 1:] == 0) & (l.labels[:, :, :-1] == 0)]
        return np.median(np.abs(d))

    s0 = np.median([background_sd(*e[0]) for e in audit_exams.values()])
    s1 = np.median([background_sd(*e[1]) for e in audit_exams.values()])
    assert s1 > s0


def test_every_generated_slice_normalizes(audit_exams):
    for s in range(5):
        sl = exams_to_slices([audit_exams[s][0], audit_exams[s][1]])
        m = sl.images.astype(np.float64)
        assert np.abs(m.mean(axis=(1, 2))).max() < 1e-5  # float32 storage
        assert np.abs(m.std(axis=(1, 2)) - 1).max() < 1e-5
    for v, _ in audit_exams[0]:
        for z in range(v.voxels.shape[0]):
            n = normalize_slice(v.voxels[z])
            assert abs(n.mean()) < 1e-9 and abs(n.std() - 1) < 1e-9


def test_unpaired_domains(audit_exams):
    # matched exam indices share no geometry beyond the common layout
    a = np.stack([audit_exams[s][0][0].voxels.ravel() for s in range(20)]).astype(np.float64)
    b = np.stack([audit_exams[s][1][0].voxels.ravel() for s in range(20)]).astype(np.float64)
    a -= a.mean(axis=0)
    b -= b.mean(axis=0)
    corr = [np.corrcoef(x, y)[0, 1] for x, y in zip(a, b)]
    assert abs(np.mean(corr)) < 0.1


def test_generator_errors():
    with pytest.raises(ValueError):
        generate_dataset(0, 0, num_exams=2)
    with pytest.raises(ValueError):
        generate_exam(0, 0, 0, size=(16, 12, 12))
    with pytest.raises(ValueError):
        generate_exam(0, 5, 0)


# ---------------------------------------------------------------- normalization

def test_normalize_examples():
    np.testing.assert_array_equal(normalize_slice(np.array([[0.0, 2.0]])), [[-1.0, 1.0]])
    x = normalize_slice(np.random.default_rng(0).normal(3, 2, size=(8, 8)))
    np.testing.assert_allclose(normalize_slice(x), x, atol=1e-9)
    with pytest.raises(ValueError):
        normalize_slice(np.full((4, 4), 3.0))


# ---------------------------------------------------------------- augmentation

def _sample(seed=0):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(32, 32)).astype(np.float32)
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:14, 10:20] = 1
    mask[18:26, 5:12] = 2
    return img, mask


def test_identity_draw_is_noop():
    img, mask = _sample()
    a, b = apply_augmentation(img, mask, AugmentDraw())
    assert a.tobytes() == img.tobytes() and b.tobytes() == mask.tobytes()


def test_flip_is_an_involution():
    img, mask = _sample()
    d = AugmentDraw(flip_h=True)
    a, b = apply_augmentation(*apply_augmentation(img, mask, d), d)
    np.testing.assert_array_equal(a, img)
    np.testing.assert_array_equal(b, mask)
    a, _ = apply_augmentation(img, mask, d)
    np.testing.assert_array_equal(a, img[:, ::-1])


def test_rotation_keeps_labels_and_image_mask_alignment():
    img, mask = _sample()
    a, b = apply_augmentation(mask.astype(np.float32), mask, AugmentDraw(angle_deg=30.0))
    assert set(np.unique(b)) <= set(np.unique(mask))
    # rotating the mask itself as an image agrees with the nearest-neighbour mask where it is unambiguous
    sure = (a == np.round(a)) & (a > 0)
    np.testing.assert_array_equal(a[sure], b[sure])


def test_translation_fill_values():
    img, mask = _sample()
    a, b = apply_augmentation(img, mask, AugmentDraw(shift=(0.25, 0.0)))
    np.testing.assert_array_equal(a[:8], img.min())
    np.testing.assert_array_equal(b[:8], 0)
    np.testing.assert_allclose(a[8:], img[:-8], atol=1e-6)
    np.testing.assert_array_equal(b[8:], mask[:-8])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augmentation_never_adds_labels(seed):
    img, mask = _sample(seed % 7)
    a, b = augment(img, mask, AugmentationPolicy(), seed)
    assert set(np.unique(b)) <= set(np.unique(mask))
    assert a.shape == img.shape and b.dtype == mask.dtype
    assert a.min() >= img.min() - 1e-6 and a.max() <= img.max() + 1e-6


def test_augmentation_deterministic_and_policy_bounds():
    img, mask = _sample()
    a1, b1 = augment(img, mask, AugmentationPolicy(), 42)
    a2, b2 = augment(img, mask, AugmentationPolicy(), 42)
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()
    with pytest.raises(ValueError):
        AugmentationPolicy(max_translation_frac=1.5)
    with pytest.raises(ValueError):
        AugmentationPolicy(max_rotation_deg=200)
    with pytest.raises(ValueError):
        apply_augmentation(img, mask[:-1], AugmentDraw())


# ---------------------------------------------------------------- exam files

@pytest.fixture
def saved(tmp_path):
    vol, lab = generate_exam(1, 0, 0, size=(4, 48, 48))
    path = tmp_path / "e.mdseg"
    save_exam(path, vol, lab)
    return path, vol, lab


def test_exam_round_trip(saved):
    path, vol, lab = saved
    v, l = load_exam(path)
    assert v.voxels.tobytes() == vol.voxels.tobytes()
    assert l.labels.tobytes() == lab.labels.tobytes()
    assert (v.exam_id, v.domain, v.spacing) == (vol.exam_id, vol.domain, vol.spacing)


def _split(raw):
    (hlen,) = struct.unpack_from("<I", raw, len(EXAM_MAGIC))
    s = len(EXAM_MAGIC) + 4
    return json.loads(raw[s:s + hlen]), raw[s + hlen:]


def _rebuild(header, payload):
    hb = json.dumps(header).encode()
    return EXAM_MAGIC + struct.pack("<I", len(hb)) + hb + payload


def test_exam_layout(saved):
    path, vol, lab = saved
    header, payload = _split(path.read_bytes())
    assert header["shape"] == [4, 48, 48] and header["domain"] == 0
    n = vol.voxels.size
    assert len(payload) == 5 * n
    np.testing.assert_array_equal(np.frombuffer(payload[:4 * n], "<f4").reshape(4, 48, 48), vol.voxels)
    np.testing.assert_array_equal(np.frombuffer(payload[4 * n:], "u1").reshape(4, 48, 48), lab.labels)


def test_exam_errors_are_distinct(saved):
    path, _, _ = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        load_exam(path)
    header, payload = _split(raw)
    del header["domain"]
    path.write_bytes(_rebuild(header, payload))
    with pytest.raises(MalformedHeaderError, match="malformed header"):
        load_exam(path)
    header, payload = _split(raw)
    path.write_bytes(_rebuild(header, payload[:-1] + bytes([payload[-1] ^ 1])))
    with pytest.raises(ChecksumMismatchError):
        load_exam(path)
    path.write_bytes(b"XXXXXXX" + raw[7:])
    with pytest.raises(MalformedHeaderError):
        load_exam(path)


def test_dataset_round_trip(tmp_path):
    ds = {k: generate_dataset(2, k, 3, size=(4, 48, 48)) for k in (0, 1)}
    save_dataset(tmp_path, ds)
    back = load_dataset(tmp_path)
    assert sorted(back) == [0, 1]
    for k in ds:
        for (v, l), (v2, l2) in zip(ds[k], back[k]):
            assert v.voxels.tobytes() == v2.voxels.tobytes() and l.labels.tobytes() == l2.labels.tobytes()
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "empty")
