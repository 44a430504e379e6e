"""Manifest, split policy, synthetic generator, and weight container."""

import io
import struct
import zlib

import numpy as np
import pytest
from PIL import Image

from neurofuse import data as D
from neurofuse.layers import BatchNorm, Conv2d, Dense, Sequential


def make_manifest(counts, classes=None):
    classes = classes or tuple(f"c{i}" for i in range(len(counts)))
    entries = []
    for label, n in enumerate(counts):
        entries += [D.ManifestEntry(f"images/{classes[label]}/{i:03d}.png", label)
                    for i in range(n)]
    return D.DatasetManifest(classes=tuple(classes), entries=tuple(entries))


def png_bytes(size=4, value=128):
    buf = io.BytesIO()
    Image.fromarray(np.full((size, size), value, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# split policy
# ---------------------------------------------------------------------------

class TestSplit:
    def test_floor_policy_3064(self):
        m = D.split(make_manifest([3064]), seed=0)
        assert m.split_counts() == {"train": 2144, "val": 306, "test": 614}

    def test_floor_policy_10(self):
        m = D.split(make_manifest([10]), seed=3)
        assert m.split_counts() == {"train": 7, "val": 1, "test": 2}

    def test_same_seed_identical(self, tmp_path):
        m1 = D.split(make_manifest([57, 31, 44]), seed=9)
        m2 = D.split(make_manifest([57, 31, 44]), seed=9)
        assert m1 == m2
        p1 = D.save_manifest(m1, tmp_path / "a.txt")
        p2 = D.save_manifest(m2, tmp_path / "b.txt")
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seeds_differ(self):
        base = make_manifest([40, 40])
        a = D.split(base, seed=1)
        b = D.split(base, seed=2)
        assert a != b

    def test_invariants_over_many_draws(self):
        # disjoint + covering + per-class floor proportions for 1000 (n, seed)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            k = int(rng.integers(1, 4))
            counts = [int(rng.integers(1, 60)) for _ in range(k)]
            seed = int(rng.integers(0, 2**31))
            m = D.split(make_manifest(counts), seed=seed)
            assert all(e.split in D.SPLITS for e in m.entries)
            for label, n in enumerate(counts):
                per = [e.split for e in m.entries if e.label == label]
                assert len(per) == n
                assert per.count("train") == 7 * n // 10
                assert per.count("val") == n // 10
                assert per.count("test") == n - 7 * n // 10 - n // 10

    def test_stratified_not_global(self):
        m = D.split(make_manifest([10, 10]), seed=0)
        for label in (0, 1):
            per = [e.split for e in m.entries if e.label == label]
            assert per.count("train") == 7
            assert per.count("val") == 1
            assert per.count("test") == 2


# ---------------------------------------------------------------------------
# manifest text round trip
# ---------------------------------------------------------------------------

class TestManifestFile:
    def test_round_trip(self, tmp_path):
        m = D.split(make_manifest([12, 7], classes=("glioma", "pituitary")), seed=5)
        m = D.DatasetManifest(classes=m.classes, entries=m.entries, seed=m.seed,
                              skipped=("glioma/readme.txt",))
        path = D.save_manifest(m, tmp_path / "manifest.txt")
        assert D.load_manifest(path) == m

    def test_unsplit_round_trip(self, tmp_path):
        m = make_manifest([3])
        path = D.save_manifest(m, tmp_path / "m.txt")
        back = D.load_manifest(path)
        assert back == m
        assert all(e.split == D.UNSPLIT for e in back.entries)

    def test_rejects_non_manifest(self, tmp_path):
        p = tmp_path / "x.txt"
        p.write_text("hello\n")
        with pytest.raises(ValueError):
            D.load_manifest(p)

    def test_rejects_bad_label(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("format: manifest v1\nseed: -\nclasses:\ta\nimg.png\t4\ttrain\n")
        with pytest.raises(ValueError):
            D.load_manifest(p)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def build_tree(root, counts, bad_files=()):
    png = png_bytes()
    for cls, n in counts.items():
        d = root / cls
        d.mkdir(parents=True)
        for i in range(n):
            (d / f"{cls}_{i:04d}.png").write_bytes(png)
    for rel in bad_files:
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("not an image")
    return root


class TestIngest:
    def test_classes_sorted_lexicographically(self, tmp_path):
        build_tree(tmp_path, {"b": 2, "a": 3, "c": 1})
        m = D.ingest(tmp_path)
        assert m.classes == ("a", "b", "c")
        assert m.class_counts() == [3, 2, 1]

    def test_figshare_shaped_counts(self, tmp_path):
        build_tree(tmp_path, {"meningioma": 708, "glioma": 1426, "pituitary": 930})
        m = D.ingest(tmp_path)
        assert len(m.entries) == 3064
        assert len(m.classes) == 3
        assert m.class_counts() == [1426, 708, 930]  # lexicographic order

    def test_kaggle_shaped_counts(self, tmp_path):
        build_tree(tmp_path, {"yes": 155, "no": 98})
        m = D.ingest(tmp_path)
        assert len(m.entries) == 253
        assert m.classes == ("no", "yes")
        assert m.class_counts()[m.classes.index("no")] == 98

    def test_single_class_single_image(self, tmp_path):
        build_tree(tmp_path, {"only": 1})
        m = D.ingest(tmp_path)
        assert len(m.entries) == 1
        assert m.entries[0].label == 0

    def test_undecodable_files_listed_and_skipped(self, tmp_path):
        build_tree(tmp_path, {"a": 2}, bad_files=("a/notes.txt", "a/broken.png"))
        m = D.ingest(tmp_path)
        assert len(m.entries) == 2
        assert sorted(m.skipped) == ["a/broken.png", "a/notes.txt"]

    def test_rejects_empty(self, tmp_path):
        with pytest.raises(ValueError):
            D.ingest(tmp_path)  # no class dirs
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "junk.txt").write_text("x")
        with pytest.raises(ValueError):
            D.ingest(tmp_path)  # no decodable images

    def test_hidden_files_ignored(self, tmp_path):
        build_tree(tmp_path, {"a": 1})
        (tmp_path / "a" / ".DS_Store").write_text("x")
        m = D.ingest(tmp_path)
        assert len(m.entries) == 1
        assert m.skipped == ()


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

class TestSynth:
    def test_even_class_counts(self, tmp_path):
        spec = D.SynthSpec(n_images=600, image_size=32, seed=1)
        m = D.synth_generate(spec, tmp_path)
        assert m.class_counts() == [200, 200, 200]
        assert (tmp_path / "manifest.txt").exists()

    def test_remainder_goes_to_low_classes(self, tmp_path):
        spec = D.SynthSpec(n_images=31, image_size=32, seed=1)
        m = D.synth_generate(spec, tmp_path)
        assert m.class_counts() == [11, 10, 10]

    def test_same_seed_byte_identical(self, tmp_path):
        spec = D.SynthSpec(n_images=9, image_size=32, seed=7)
        m1 = D.synth_generate(spec, tmp_path / "a")
        m2 = D.synth_generate(spec, tmp_path / "b")
        assert m1 == m2
        for e in m1.entries:
            assert (tmp_path / "a" / e.path).read_bytes() == \
                   (tmp_path / "b" / e.path).read_bytes()

    def test_disjoint_radii_separable_by_area(self, tmp_path):
        spec = D.SynthSpec(n_images=36, image_size=64, noise=0.0, seed=3,
                           radius_fracs=((0.08, 0.12), (0.16, 0.22), (0.26, 0.32)))
        m = D.synth_generate(spec, tmp_path)
        areas = self._areas_by_class(m, tmp_path)
        assert max(areas[0]) < min(areas[1])
        assert max(areas[1]) < min(areas[2])

    def test_default_areas_overlap_across_classes(self, tmp_path):
        # size must not leak the label: each class's area band overlaps both others
        spec = D.SynthSpec(n_images=60, image_size=64, noise=0.0, seed=3)
        m = D.synth_generate(spec, tmp_path)
        areas = self._areas_by_class(m, tmp_path)
        for a in range(3):
            for b in range(a + 1, 3):
                assert min(areas[a]) < max(areas[b])
                assert min(areas[b]) < max(areas[a])

    @staticmethod
    def _areas_by_class(m, root):
        areas = {0: [], 1: [], 2: []}
        for e in m.entries:
            mask = D.load_image(D.mask_path_for(root / e.path))
            areas[e.label].append(int((mask > 0).sum()))
        return areas

    def test_masks_align_with_blobs(self, tmp_path):
        spec = D.SynthSpec(n_images=6, image_size=64, noise=0.0, seed=2)
        m = D.synth_generate(spec, tmp_path)
        for e in m.entries:
            img = D.load_image(tmp_path / e.path)
            mask = D.load_image(D.mask_path_for(tmp_path / e.path)) > 0
            assert np.all(img[mask] >= 100)
            assert np.all(img[~mask] == 30)

    def test_mask_path_mapping(self):
        assert D.mask_path_for("run/images/disc/disc_0001.png") == \
            D.Path("run/masks/disc/disc_0001.png")
        with pytest.raises(ValueError):
            D.mask_path_for("run/pictures/x.png")

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            D.SynthSpec(n_images=2)
        with pytest.raises(ValueError):
            D.SynthSpec(image_size=8)
        with pytest.raises(ValueError):
            D.SynthSpec(radius_fracs=((0.1, 0.2),))
        with pytest.raises(ValueError, match="fit inside"):
            D.SynthSpec(image_size=16)  # default 0.41 band needs > 22 px
        with pytest.raises(ValueError, match="0 < lo <= hi"):
            D.SynthSpec(radius_fracs=((0.2, 0.1), (0.1, 0.2), (0.1, 0.2)))

    def test_load_split_arrays(self, tmp_path):
        spec = D.SynthSpec(n_images=12, image_size=32, seed=0)
        m = D.synth_generate(spec, tmp_path)
        images, labels = D.load_split_arrays(m, tmp_path, "test")
        assert len(images) == labels.shape[0] == m.split_counts()["test"]
        assert all(img.shape == (32, 32) for img in images)


# ---------------------------------------------------------------------------
# weight container
# ---------------------------------------------------------------------------

def random_records(rng, n=12):
    records = []
    for i in range(n):
        rank = int(rng.integers(0, 5))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
        if rng.random() < 0.5:
            values = rng.standard_normal(shape).astype(np.float32)
            records.append(D.TensorRecord(f"t{i}", values))
        else:
            values = rng.integers(-127, 128, size=shape).astype(np.int8)
            if rank > 0 and rng.random() < 0.5:
                axis = int(rng.integers(0, rank))
                scale = rng.random(shape[axis]).astype(np.float32) + 0.01
            else:
                axis = -1
                scale = rng.random(1).astype(np.float32) + 0.01
            records.append(D.TensorRecord(f"t{i}", values, scale=scale, axis=axis))
    return records


class TestWeightContainer:
    def test_property_round_trip(self, tmp_path, rng):
        for trial in range(100):
            records = random_records(rng)
            path = tmp_path / f"w{trial}.btwf"
            D.write_weight_records(path, records)
            back = D.read_weight_records(path)
            assert len(back) == len(records)
            for a, b in zip(records, back):
                assert a.name == b.name
                assert a.values.dtype == b.values.dtype
                assert a.values.shape == b.values.shape
                assert np.array_equal(a.values, b.values)
                assert a.axis == b.axis or a.scale is None
                if a.scale is None:
                    assert b.scale is None
                else:
                    assert np.array_equal(a.scale, b.scale)

    def test_f32_file_size_is_payload_plus_overhead(self, tmp_path):
        records = [D.TensorRecord("w", np.zeros((3, 4), np.float32)),
                   D.TensorRecord("b", np.zeros((4,), np.float32))]
        n = D.write_weight_records(tmp_path / "w.btwf", records)
        payload = 4 * (12 + 4)
        overhead = 4 + 8 + sum(2 + len(r.name) + 2 + 4 * r.values.ndim + 4
                               for r in records) + 4
        assert n == payload + overhead
        assert (tmp_path / "w.btwf").stat().st_size == n

    def test_quantized_payload_is_quarter(self, tmp_path):
        shape = (64, 64)
        f32 = [D.TensorRecord("w", np.zeros(shape, np.float32))]
        q = [D.TensorRecord("w", np.zeros(shape, np.int8),
                            scale=np.ones(64, np.float32), axis=1)]
        nf = D.write_weight_records(tmp_path / "f.btwf", f32)
        nq = D.write_weight_records(tmp_path / "q.btwf", q)
        # 16384 f32 payload bytes vs 4096 int8 + 256 scale bytes
        assert nq < nf / 3

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "w.btwf"
        D.write_weight_records(path, [D.TensorRecord("w", np.ones(10, np.float32))])
        blob = path.read_bytes()
        path.write_bytes(blob[:-9])
        with pytest.raises(ValueError, match="checksum|truncated"):
            D.read_weight_records(path)

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "w.btwf"
        D.write_weight_records(path, [D.TensorRecord("w", np.ones(10, np.float32))])
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="checksum"):
            D.read_weight_records(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "w.btwf"
        D.write_weight_records(path, [D.TensorRecord("w", np.ones(4, np.float32))])
        body = b"XXXX" + path.read_bytes()[4:-4]
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(ValueError, match="magic"):
            D.read_weight_records(path)

    def test_duplicate_names_rejected(self, tmp_path):
        recs = [D.TensorRecord("w", np.ones(2, np.float32)),
                D.TensorRecord("w", np.ones(3, np.float32))]
        with pytest.raises(ValueError, match="unique"):
            D.write_weight_records(tmp_path / "w.btwf", recs)

    def test_dequantize_per_channel(self):
        values = np.array([[1, 2], [3, 4]], dtype=np.int8)
        rec = D.TensorRecord("w", values, scale=np.array([0.5, 2.0], np.float32), axis=1)
        want = np.array([[0.5, 4.0], [1.5, 8.0]], np.float32)
        assert np.array_equal(rec.dequantize(), want)
        rec = D.TensorRecord("w", values, scale=np.array([0.5], np.float32), axis=-1)
        assert np.array_equal(rec.dequantize(), values * 0.5)


def small_module(seed=0):
    rng = np.random.default_rng(seed)
    return Sequential(
        Conv2d(3, 3, 1, 4, rng=rng),
        BatchNorm(4),
        Dense(4, 2, rng=rng),
    )


class TestModuleWeights:
    def test_network_round_trip(self, tmp_path):
        net = small_module(seed=1)
        # make the running stats non-trivial so buffers are exercised
        net.l1.running_mean += 0.5
        D.write_weights(tmp_path / "net.btwf", net)
        other = small_module(seed=2)
        D.load_state_into(tmp_path / "net.btwf", other)
        for (na, a), (nb, b) in zip(sorted(net.state_dict().items()),
                                    sorted(other.state_dict().items())):
            assert na == nb
            assert np.array_equal(a, b)

    def test_shape_mismatch_reported_by_name(self, tmp_path):
        D.write_weights(tmp_path / "net.btwf", small_module())
        wrong = Sequential(Conv2d(3, 3, 1, 8, rng=np.random.default_rng(0)),
                           BatchNorm(8), Dense(8, 2, rng=np.random.default_rng(0)))
        with pytest.raises(ValueError, match="l0.w"):
            D.load_state_into(tmp_path / "net.btwf", wrong)


# ---------------------------------------------------------------------------
# config text
# ---------------------------------------------------------------------------

class TestConfigText:
    def test_round_trip(self, tmp_path):
        values = {"preset": "tiny", "epochs": 50, "lr": 0.001, "note": "a b c"}
        p = D.write_config_text(tmp_path / "config.txt", values)
        back = D.read_config_text(p)
        assert back == {"preset": "tiny", "epochs": "50", "lr": "0.001", "note": "a b c"}

    def test_comments_and_blanks_skipped(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# comment\n\nkey=value\n")
        assert D.read_config_text(p) == {"key": "value"}

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("just words\n")
        with pytest.raises(ValueError):
            D.read_config_text(p)
