"""Dataset I/O, the content digest, and the synthetic generator.

The generator's whole point is the background shift: base-split textures
follow the class, novel-split textures are drawn independently.  The
mutual-information test quantifies that directly from the recorded
texture ids.
"""
import numpy as np
import pytest

from fewcorr.data import (Dataset, SynthSpec, dataset_digest, export_attention,
                          generate_synthetic, load_dataset, load_synth_spec,
                          parse_synth_spec, read_attention_csv, read_image,
                          save_dataset, write_image)
from fewcorr.errors import ConfigError, DataError


def mutual_information_bits(x, y):
    """Plug-in MI estimate between two integer label arrays."""
    x, y = np.asarray(x), np.asarray(y)
    n = x.size
    mi = 0.0
    for vx in np.unique(x):
        px = np.mean(x == vx)
        for vy in np.unique(y):
            pxy = np.mean((x == vx) & (y == vy))
            if pxy > 0:
                py = np.mean(y == vy)
                mi += pxy * np.log2(pxy / (px * py))
    return mi


class TestImageFiles:
    def test_roundtrip_is_exact_for_f32(self, tmp_path, rng):
        img = rng.uniform(size=(8, 6, 3)).astype("<f4").astype(np.float64)
        p = tmp_path / "img.bin"
        write_image(p, img)
        np.testing.assert_array_equal(read_image(p), img)

    def test_truncated_payload_rejected(self, tmp_path, rng):
        p = tmp_path / "img.bin"
        write_image(p, rng.uniform(size=(4, 4, 3)))
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(DataError):
            read_image(p)

    def test_bad_magic_rejected(self, tmp_path, rng):
        p = tmp_path / "img.bin"
        write_image(p, rng.uniform(size=(4, 4, 3)))
        blob = bytearray(p.read_bytes())
        blob[:4] = b"JUNK"
        p.write_bytes(bytes(blob))
        with pytest.raises(DataError):
            read_image(p)


class TestDatasetRoundtrip:
    def test_save_load_preserves_everything(self, tmp_path, tiny_ds):
        manifest = save_dataset(tiny_ds, tmp_path / "d")
        loaded = load_dataset(manifest)
        np.testing.assert_array_equal(loaded.images, tiny_ds.images)
        np.testing.assert_array_equal(loaded.labels, tiny_ds.labels)
        np.testing.assert_array_equal(loaded.splits, tiny_ds.splits)
        assert dataset_digest(loaded) == dataset_digest(tiny_ds)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope" / "manifest.txt")

    def test_corrupt_record_names_its_line(self, tmp_path, tiny_ds):
        manifest = save_dataset(tiny_ds, tmp_path / "d")
        lines = manifest.read_text().splitlines()
        lines[3] = "file=img.bin label=oops split=base"
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="line 4"):
            load_dataset(manifest)

    def test_unknown_split_rejected(self, tmp_path, tiny_ds):
        manifest = save_dataset(tiny_ds, tmp_path / "d")
        text = manifest.read_text().replace("split=novel", "split=middle", 1)
        manifest.write_text(text)
        with pytest.raises(DataError, match="middle"):
            load_dataset(manifest)

    def test_overlapping_class_splits_rejected(self, rng):
        images = rng.uniform(size=(4, 8, 8, 3))
        labels = np.array([0, 0, 1, 1])
        splits = np.array(["base", "novel", "base", "base"])
        with pytest.raises(DataError, match="both"):
            Dataset(images, labels, splits)


class TestDigest:
    def test_order_independent(self, tiny_ds):
        perm = np.random.default_rng(0).permutation(len(tiny_ds.images))
        shuffled = Dataset(tiny_ds.images[perm], tiny_ds.labels[perm],
                           tiny_ds.splits[perm])
        assert dataset_digest(shuffled) == dataset_digest(tiny_ds)

    def test_pixel_change_changes_digest(self, tiny_ds):
        images = tiny_ds.images.copy()
        images[0, 0, 0, 0] = 1.0 - images[0, 0, 0, 0]
        altered = Dataset(images, tiny_ds.labels.copy(), tiny_ds.splits.copy())
        assert dataset_digest(altered) != dataset_digest(tiny_ds)

    def test_label_change_changes_digest(self, tiny_ds):
        labels = tiny_ds.labels.copy()
        base_classes = tiny_ds.classes("base")
        swap = {base_classes[0]: base_classes[1],
                base_classes[1]: base_classes[0]}
        labels = np.array([swap.get(int(l), int(l)) for l in labels])
        altered = Dataset(tiny_ds.images.copy(), labels, tiny_ds.splits.copy())
        assert dataset_digest(altered) != dataset_digest(tiny_ds)


class TestGenerator:
    def test_deterministic_per_spec(self):
        spec = SynthSpec(base_classes=3, novel_classes=2, images_per_class=6,
                         seed=5)
        assert (dataset_digest(generate_synthetic(spec))
                == dataset_digest(generate_synthetic(spec)))

    def test_seed_changes_content(self):
        a = SynthSpec(base_classes=3, novel_classes=2, images_per_class=6, seed=5)
        b = SynthSpec(base_classes=3, novel_classes=2, images_per_class=6, seed=6)
        assert (dataset_digest(generate_synthetic(a))
                != dataset_digest(generate_synthetic(b)))

    def test_counts_and_ranges(self):
        spec = SynthSpec(base_classes=4, novel_classes=2, images_per_class=7,
                         size=16)
        ds = generate_synthetic(spec)
        assert ds.images.shape == (42, 16, 16, 3)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert len(ds.classes("base")) == 4 and len(ds.classes("novel")) == 2
        for c, idx in ds.indices_by_class("base").items():
            assert len(idx) == 7

    def test_images_are_float32_exact(self):
        ds = generate_synthetic(SynthSpec(base_classes=2, novel_classes=1,
                                          images_per_class=3))
        np.testing.assert_array_equal(ds.images,
                                      ds.images.astype("<f4").astype(np.float64))

    def test_correlated_backgrounds_follow_the_class(self):
        spec = SynthSpec(base_classes=4, novel_classes=0, images_per_class=10,
                         base_background="correlated")
        ds = generate_synthetic(spec)
        for c, idx in ds.indices_by_class("base").items():
            assert len(set(ds.texture_ids[idx].tolist())) == 1

    def test_shuffled_backgrounds_carry_no_class_signal(self):
        spec = SynthSpec(base_classes=8, novel_classes=0, images_per_class=250,
                         base_background="shuffled", seed=2)
        ds = generate_synthetic(spec)
        mi = mutual_information_bits(ds.labels, ds.texture_ids)
        assert mi < 0.05, f"texture leaks {mi:.3f} bits about the class"

    def test_correlated_backgrounds_fully_identify_the_class(self):
        spec = SynthSpec(base_classes=8, novel_classes=0, images_per_class=50,
                         base_background="correlated", seed=2)
        ds = generate_synthetic(spec)
        mi = mutual_information_bits(ds.labels, ds.texture_ids)
        assert mi == pytest.approx(3.0, abs=1e-9)  # log2(8)

    def test_none_background_is_black_without_noise(self):
        spec = SynthSpec(base_classes=2, novel_classes=0, images_per_class=4,
                         base_background="none", noise=0.0)
        ds = generate_synthetic(spec)
        assert np.all(ds.texture_ids == -1)
        corners = ds.images[:, 0, 0, :]
        np.testing.assert_array_equal(corners, np.zeros_like(corners))

    def test_classes_draw_distinct_foregrounds(self):
        spec = SynthSpec(base_classes=3, novel_classes=0, images_per_class=2,
                         base_background="none", noise=0.0)
        ds = generate_synthetic(spec)
        a = ds.images[ds.labels == 0]
        b = ds.images[ds.labels == 2]
        assert not np.allclose(a[0], b[0])

    def test_validation(self):
        with pytest.raises(ConfigError):
            SynthSpec(base_classes=0)
        with pytest.raises(ConfigError):
            SynthSpec(images_per_class=0)
        with pytest.raises(ConfigError):
            SynthSpec(base_background="plaid")
        with pytest.raises(ConfigError):
            SynthSpec(noise=0.9)


class TestSpecParsing:
    def test_parse_known_keys(self):
        spec = parse_synth_spec(
            "synth.base_classes = 6\nsynth.noise = 0.05\nsynth.seed = 3\n")
        assert spec.base_classes == 6
        assert spec.noise == pytest.approx(0.05)
        assert spec.seed == 3

    def test_background_mode_shorthand(self):
        spec = parse_synth_spec("synth.background_mode = none\n")
        assert spec.base_background == "none"
        assert spec.novel_background == "none"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_synth_spec("synth.flavor = vanilla\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_synth_spec("synth.seed = 1\nsynth.size = tall\n")

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "spec.txt"
        p.write_text("synth.images_per_class = 9\n")
        assert load_synth_spec(p).images_per_class == 9


class TestAttentionExport:
    def test_roundtrip(self, tmp_path, rng):
        grid = rng.uniform(size=(5, 5))
        index = export_attention([(3, "sc", grid)], episode_id=7,
                                 out_dir=tmp_path)
        line = index.read_text().splitlines()[0]
        assert "episode=7" in line and "image=3" in line and "branch=sc" in line
        csv_path = tmp_path / line.split()[0].split("=", 1)[1]
        np.testing.assert_array_equal(read_attention_csv(csv_path), grid)

    def test_appends_to_existing_index(self, tmp_path, rng):
        export_attention([(0, "sc", rng.uniform(size=(3, 3)))], 0, tmp_path)
        export_attention([(1, "cc_query", rng.uniform(size=(3, 3)))], 1,
                         tmp_path)
        lines = (tmp_path / "attention_index.txt").read_text().splitlines()
        assert len(lines) == 2
