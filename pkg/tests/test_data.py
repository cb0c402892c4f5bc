from __future__ import annotations

import json

import numpy as np
import pytest

from samed import data
from samed.data import DataError, SegSample, SynthConfig, augment, flip, generate, rot90, rotate
from samed.nst import FormatError


class ScriptedRng:
    """Stand-in generator returning queued values, for exact augmentation draws."""

    def __init__(self, randoms, ints=(), uniforms=()):
        self._r, self._i, self._u = list(randoms), list(ints), list(uniforms)

    def random(self):
        return self._r.pop(0)

    def integers(self, *a, **k):
        return self._i.pop(0)

    def uniform(self, *a, **k):
        return self._u.pop(0)


@pytest.fixture(scope="module")
def small():
    return generate(SynthConfig(n_train=12, n_test=4, image_size=32, radius_range=[3, 7]))


def _counts(label, k=4):
    return np.bincount(label.ravel(), minlength=k)


def test_seeded_generation_bit_identical():
    cfg = SynthConfig(n_train=5, n_test=2)
    a, b = generate(cfg), generate(cfg)
    for split in ("train", "test"):
        for s, t in zip(a[split], b[split]):
            assert s.sample_id == t.sample_id
            assert s.image.tobytes() == t.image.tobytes() and s.label.tobytes() == t.label.tobytes()
    c = generate(SynthConfig(n_train=5, n_test=2, seed=8))
    assert a["train"][0].image.tobytes() != c["train"][0].image.tobytes()


def test_default_split_sizes_and_types():
    ds = generate(SynthConfig())
    assert len(ds["train"]) == 200 and len(ds["test"]) == 50
    s = ds["train"][0]
    assert s.image.shape == (64, 64, 1) and s.image.dtype == np.float32
    assert s.label.shape == (64, 64) and s.label.dtype == np.uint8
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    for split in ("train", "test"):
        present = set()
        for t in ds[split]:
            present |= set(np.unique(t.label).tolist())
        assert present == {0, 1, 2, 3}


@pytest.mark.parametrize("k", [2, 4])
def test_zero_noise_threshold_separability(k):
    cfg = SynthConfig(num_classes=k, n_train=10, n_test=2, noise_sigma=0.0)
    bands = cfg.intensity_bands
    cuts = [(bands[c][1] + bands[c + 1][0]) / 2 for c in range(k - 1)]
    for s in generate(cfg)["train"]:
        recon = np.digitize(s.image[..., 0], cuts)
        assert np.array_equal(recon, s.label)


def test_later_class_paints_over_earlier():
    # labels are one value per pixel by construction; check the painted intensity follows the label
    cfg = SynthConfig(n_train=20, n_test=1, noise_sigma=0.0)
    for s in generate(cfg)["train"]:
        for c in range(cfg.num_classes):
            vals = s.image[..., 0][s.label == c]
            if vals.size:
                lo, hi = cfg.intensity_bands[c]
                assert lo - 1e-6 <= vals.min() and vals.max() <= hi + 1e-6
                assert np.unique(vals).size == 1


def test_config_errors():
    with pytest.raises(DataError, match="cannot fit"):
        SynthConfig(image_size=20, radius_range=[6, 14])
    with pytest.raises(DataError):
        SynthConfig(num_classes=1)
    with pytest.raises(DataError):
        SynthConfig(shapes=["hexagon", "ellipse", "ellipse"])
    with pytest.raises(KeyError):
        SynthConfig.from_dict({"n_val": 3})


def test_identity_draw_leaves_sample_unchanged(small):
    s = small["train"][0]
    out = augment(s, ScriptedRng([0.9, 0.9]))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.label, s.label)


def test_half_turn_twice_is_identity(small):
    s = small["train"][1]
    back = rot90(rot90(s, 2), 2)
    assert back.image.tobytes() == s.image.tobytes() and back.label.tobytes() == s.label.tobytes()


@pytest.mark.parametrize("draw", [
    dict(randoms=[0.1, 0.9], ints=[0]),
    dict(randoms=[0.1, 0.9], ints=[1]),
    dict(randoms=[0.9, 0.1, 0.1], ints=[1]),
    dict(randoms=[0.9, 0.1, 0.1], ints=[2]),
    dict(randoms=[0.1, 0.1, 0.1], ints=[1, 3]),
])
def test_flips_and_quarter_turns_preserve_class_counts(small, draw):
    for s in small["train"]:
        out = augment(s, ScriptedRng(**draw))
        assert np.array_equal(_counts(out.label), _counts(s.label))
        assert np.array_equal(np.sort(out.image.ravel()), np.sort(s.image.ravel()))


def test_image_and_label_move_together():
    cfg = SynthConfig(n_train=3, n_test=1, noise_sigma=0.0, image_size=32, radius_range=[3, 7])
    t = generate(cfg)["train"][0]
    cuts = [(cfg.intensity_bands[c][1] + cfg.intensity_bands[c + 1][0]) / 2 for c in range(3)]
    for out in (flip(t, 0), flip(t, 1), rot90(t, 1), rotate(t, 11.0)):
        inside = out.image[..., 0] > 0  # rotation zero-fills outside the frame
        assert np.array_equal(np.digitize(out.image[..., 0], cuts)[inside], out.label[inside])


def test_small_rotation_keeps_labels_discrete(small):
    out = rotate(small["train"][0], -17.5)
    assert out.label.dtype == np.uint8
    assert set(np.unique(out.label)) <= {0, 1, 2, 3}


def test_save_load_roundtrip(tmp_path, small):
    data.save(small, tmp_path / "ds")
    back = data.load(tmp_path / "ds")
    assert back.class_names == small.class_names
    for split in ("train", "test"):
        assert [s.sample_id for s in back[split]] == [s.sample_id for s in small[split]]
        for a, b in zip(back[split], small[split]):
            assert a.image.tobytes() == b.image.tobytes() and a.label.tobytes() == b.label.tobytes()
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert set(manifest) == {"samples", "class_names"}
    assert set(manifest["samples"][0]) == {"id", "image_file", "label_file", "split"}


def test_missing_file_named(tmp_path, small):
    data.save(small, tmp_path / "ds")
    (tmp_path / "ds" / "labels" / "test_0002.nst").unlink()
    with pytest.raises(DataError, match="labels/test_0002.nst"):
        data.load(tmp_path / "ds")


def test_corrupt_file_reports_offset(tmp_path, small):
    data.save(small, tmp_path / "ds")
    p = tmp_path / "ds" / "images" / "train_0000.nst"
    p.write_bytes(p.read_bytes()[:50])
    with pytest.raises(FormatError, match="byte 50"):
        data.load(tmp_path / "ds")


def test_sample_is_plain_record():
    s = SegSample(np.zeros((2, 2, 1), np.float32), np.zeros((2, 2), np.uint8), "x")
    assert flip(s, 0).sample_id == "x"
