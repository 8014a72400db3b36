import numpy as np
import pytest

from msfuse import dataio
from msfuse.illumination import key_estimate
from msfuse.synth import SceneConfig, generate_dataset, generate_pair


class TestSceneConfig:
    def test_rejects_bad_probabilities(self):
        with pytest.raises(ValueError):
            SceneConfig(night_fraction=1.5)
        with pytest.raises(ValueError):
            SceneConfig(occlusion_probability=-0.1)

    def test_rejects_oversized_pedestrians(self):
        with pytest.raises(ValueError):
            SceneConfig(image_size=32, height_range=(20.0, 40.0))


class TestGeneratePair:
    def test_deterministic(self):
        cfg = SceneConfig()
        p1, e1, c1 = generate_pair(cfg, np.random.default_rng(11))
        p2, e2, c2 = generate_pair(cfg, np.random.default_rng(11))
        assert c1 == c2
        assert np.array_equal(p1.color.data, p2.color.data)
        assert np.array_equal(p1.thermal.data, p2.thermal.data)
        assert e1 == e2

    def test_shapes_and_condition(self):
        cfg = SceneConfig(image_size=48, height_range=(30.0, 44.0))
        pair, _, condition = generate_pair(cfg, np.random.default_rng(0))
        assert pair.color.data.shape == (48, 48, 3)
        assert pair.thermal.data.shape == (48, 48, 1)
        assert condition in ("day", "night")
        assert pair.condition == condition

    def test_annotations_inside_image(self):
        cfg = SceneConfig()
        for seed in range(50):
            pair, entries, _ = generate_pair(cfg, np.random.default_rng(seed))
            for e in entries:
                assert e.bbox.x >= 0 and e.bbox.y >= 0
                assert e.bbox.x2 <= cfg.image_size + 1e-9
                assert e.bbox.y2 <= cfg.image_size + 1e-9

    def test_day_night_keys_separable(self):
        cfg = SceneConfig()
        day_keys, night_keys = [], []
        for seed in range(40):
            rng = np.random.default_rng(seed)
            condition = "day" if seed % 2 == 0 else "night"
            pair, _, _ = generate_pair(cfg, rng, condition=condition)
            (day_keys if condition == "day" else night_keys).append(
                key_estimate(pair.color)
            )
        assert min(day_keys) > max(night_keys)

    def test_night_color_carries_no_pedestrian_signal(self):
        # at night the color frame is background + noise; a pedestrian's
        # footprint must not be brighter than the rest of the frame
        cfg = SceneConfig(color_noise=0.0, night_color_noise=0.0, pedestrians_mean=30.0)
        for seed in range(20):
            pair, entries, _ = generate_pair(cfg, np.random.default_rng(seed),
                                             condition="night")
            persons = [e for e in entries if e.label == "person"]
            if not persons:
                continue
            gray = pair.color.data.mean(axis=2)
            b = persons[0].bbox
            inside = gray[int(b.y) + 2 : int(b.y2) - 2, int(b.x) + 2 : int(b.x2) - 2]
            assert abs(inside.mean() - gray.mean()) < 2.0
            return
        pytest.fail("no pedestrian generated in 20 night frames")

    def test_thermal_pedestrians_hot_in_both_conditions(self):
        # thermal background tops out at 60, pedestrians start at 180
        cfg = SceneConfig(thermal_noise=0.0)
        for condition in ("day", "night"):
            for seed in range(20):
                pair, entries, _ = generate_pair(cfg, np.random.default_rng(seed),
                                                 condition=condition)
                persons = [e for e in entries if e.label == "person"]
                if not persons:
                    continue
                t = pair.thermal.data[:, :, 0].astype(float)
                b = persons[0].bbox
                inside = t[int(b.y) + 4 : int(b.y2) - 4, int(b.x) + 4 : int(b.x2) - 4]
                assert inside.mean() > 150.0
                break
            else:
                pytest.fail(f"no pedestrian generated for {condition}")

    def test_occlusion_tags_appear(self):
        cfg = SceneConfig(occlusion_probability=1.0, pedestrians_mean=3.0)
        for seed in range(10):
            _, entries, _ = generate_pair(cfg, np.random.default_rng(seed))
            persons = [e for e in entries if e.label == "person"]
            if persons:
                assert all(e.occlusion == "partial" for e in persons)
                return
        pytest.fail("no pedestrian generated")


class TestGenerateDataset:
    def test_layout_and_manifest(self, tmp_path):
        cfg = SceneConfig(seed=3)
        manifest = generate_dataset(cfg, n_train=4, n_test=2, out_dir=tmp_path)
        assert len(manifest) == 6
        assert sum(e.split == "train" for e in manifest) == 4
        on_disk = dataio.read_manifest(tmp_path / "manifest.txt")
        assert on_disk == manifest
        for entry in manifest:
            pair, gts = dataio.load_frame(tmp_path, entry)
            assert pair.condition == entry.condition
            assert pair.color.data.shape == (64, 64, 3)
            assert all(g.bbox.x2 <= 64 + 1e-9 for g in gts)

    def test_bit_identical_regeneration(self, tmp_path):
        cfg = SceneConfig(seed=9)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_dataset(cfg, 3, 1, d1)
        generate_dataset(cfg, 3, 1, d2)
        for rel in sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file()):
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel

    def test_frames_independent_of_total_count(self, tmp_path):
        # frame k is derived from (seed, k), so extending the dataset must
        # not change earlier frames
        cfg = SceneConfig(seed=4)
        d1, d2 = tmp_path / "short", tmp_path / "long"
        generate_dataset(cfg, 2, 0, d1)
        generate_dataset(cfg, 4, 0, d2)
        for k in range(2):
            name = f"images/train/train_{k:05d}_color.ppm"
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
