import json

import numpy as np
import pytest

from babylearn.core import BoundingBox
from babylearn.simulator import (CLASS_TABLE, ClassSpec, CorpusError, Pose, WorldConfig, dedup_boxes, derive_rng,
                                 generate_proposals, generate_world, read_corpus, render_frame, shape_mask,
                                 write_corpus)

TINY = WorldConfig(n_classes=2, n_learned_classes=1, videos_per_class=5, frames_per_video=6, test_frames=4,
                   background_frames=2, learned_instances_per_class=2, seed_pool_per_class=2, rng_seed=11)


@pytest.fixture(scope="module")
def tiny():
    return generate_world(TINY)


class TestWorld:
    def test_noisy_count_rounds(self):
        for frac, expected in ((0.3, 30), (0.0, 0), (1.0, 100), (0.255, 26)):
            w = generate_world(WorldConfig(n_classes=1, n_learned_classes=0, videos_per_class=100,
                                           noisy_fraction=frac, test_frames=0, background_frames=0,
                                           seed_pool_per_class=0))
            assert w.noisy_count == expected

    def test_all_noisy_has_no_targets(self):
        w = generate_world(WorldConfig(n_classes=1, n_learned_classes=1, videos_per_class=3,
                                       frames_per_video=4, noisy_fraction=1.0, test_frames=0,
                                       background_frames=0, learned_instances_per_class=0,
                                       seed_pool_per_class=0))
        for v in w.videos:
            assert all(g.class_id != v.target_class for f in v.clip().frames for g in f.annotations)

    def test_deterministic(self, tiny):
        again = generate_world(TINY)
        assert again.manifest() == tiny.manifest()
        for a, b in zip(tiny.videos, again.videos):
            for fa, fb in zip(a.clip().frames, b.clip().frames):
                assert np.array_equal(fa.image, fb.image)
                assert fa.proposals == fb.proposals and fa.annotations == fb.annotations
        for a, b in zip(tiny.test_images, again.test_images):
            assert np.array_equal(a.image, b.image)

    def test_seed_changes_world(self, tiny):
        other = generate_world(WorldConfig(**{**TINY.__dict__, "rng_seed": 12}))
        assert not np.array_equal(other.test_images[0].image, tiny.test_images[0].image)

    def test_presence_and_bounds(self, tiny):
        for v in tiny.videos:
            frames = v.clip().frames
            if not v.noisy:
                present = sum(any(g.class_id == v.target_class for g in f.annotations) for f in frames)
                assert present >= 0.8 * len(frames)
            for f in frames:
                for g in f.annotations:
                    b = g.box
                    assert b.cx - b.w / 2 >= 0 and b.cx + b.w / 2 <= TINY.width
                    assert b.cy - b.h / 2 >= 0 and b.cy + b.h / 2 <= TINY.height

    def test_images_are_8bit(self, tiny):
        img = tiny.test_images[0].image
        np.testing.assert_array_equal(np.round(img * 255) / 255, img)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            WorldConfig(noisy_fraction=1.5)
        with pytest.raises(ValueError):
            WorldConfig(videos_per_class=0)
        with pytest.raises(ValueError):
            WorldConfig(n_classes=5, n_learned_classes=5)

    def test_streams_independent_of_order(self):
        a = derive_rng(3, "video", 7).normal(size=4)
        derive_rng(3, "video", 8).normal(size=100)
        np.testing.assert_array_equal(a, derive_rng(3, "video", 7).normal(size=4))


class TestRender:
    def spec(self, shape="square"):
        return ClassSpec(0, shape, (0.9, 0.5, 0.2), "plain", 0.0)

    def test_empty_scene_is_background(self):
        bg = np.random.default_rng(0).uniform(size=(32, 32, 3))
        img, boxes = render_frame(bg, [])
        np.testing.assert_array_equal(img, np.round(bg * 255) / 255)
        assert boxes == []

    @pytest.mark.parametrize("shape", sorted({row[0] for row in CLASS_TABLE}))
    def test_box_matches_pixel_scan(self, shape):
        bg = np.zeros((48, 48, 3))
        img, (box,) = render_frame(bg, [(self.spec(shape), np.array([0.9, 0.5, 0.2]), Pose(23.3, 25.8, 12.0, 0.4))])
        rows = np.flatnonzero(img.any(axis=(1, 2)))
        cols = np.flatnonzero(img.any(axis=(0, 2)))
        scan = BoundingBox.from_corners(cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)
        np.testing.assert_allclose(box.as_array(), scan.as_array(), atol=1.0)

    def test_painter_order(self):
        bg = np.zeros((40, 40, 3))
        red, blue = np.array([0.8, 0.0, 0.0]), np.array([0.0, 0.0, 0.8])
        pose = Pose(20, 20, 10, 0.0)
        img, _ = render_frame(bg, [(self.spec(), red, pose), (self.spec(), blue, pose)])
        np.testing.assert_allclose(img[20, 20], np.round(blue * 255) / 255)

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            shape_mask("blob", np.zeros(2), np.zeros(2))


class TestProposals:
    def test_counting_without_ground_truth(self):
        cfg = WorldConfig(n_random_proposals=10, grid_positions=3, grid_scales=(0.25, 0.35, 0.5), dedup_iou=1.0)
        props = generate_proposals(np.random.default_rng(0), 96, 96, [], cfg)
        assert len(props) == 10 + 27

    def test_zero_jitter_contains_ground_truth(self):
        gt = BoundingBox(40, 30, 20, 16)
        cfg = WorldConfig(jitter_std=0.0)
        props = generate_proposals(np.random.default_rng(1), 96, 96, [gt], cfg)
        assert gt in props

    def test_test_frames_do_not_use_ground_truth(self):
        gt = BoundingBox(40.3, 30.7, 20.1, 16.9)
        cfg = WorldConfig(jitter_std=0.0)
        props = generate_proposals(np.random.default_rng(2), 96, 96, [gt], cfg, use_gt=False)
        assert gt not in props

    def test_dedup(self):
        arr = np.array([[10, 10, 8, 8], [10, 10, 8, 8.1], [30, 30, 8, 8]], dtype=float)
        np.testing.assert_array_equal(dedup_boxes(arr, 0.95), arr[[0, 2]])


class TestCorpusIO:
    def test_round_trip(self, tiny, tmp_path):
        manifest = write_corpus(tiny, tmp_path / "c")
        disk = read_corpus(tmp_path / "c")
        assert disk.noisy_count == tiny.noisy_count == manifest["noisy_count"]
        assert [v.video_id for v in disk.videos] == [v.video_id for v in tiny.videos]
        for mem, dsk in zip(tiny.videos, disk.videos):
            for fa, fb in zip(mem.clip().frames, dsk.clip().frames):
                assert fa.frame_id == fb.frame_id
                np.testing.assert_array_equal(fa.image, fb.image)
                assert fa.annotations == fb.annotations and fa.proposals == fb.proposals
        for a, b in zip(tiny.test_images, disk.test_images):
            np.testing.assert_array_equal(a.image, b.image)
            assert a.gts == b.gts and a.proposals == b.proposals
        assert sorted(disk.seed_images) == sorted(tiny.seed_images)

    def test_layout(self, tiny, tmp_path):
        write_corpus(tiny, tmp_path / "c")
        vid = tiny.videos[0].video_id
        files = sorted(p.name for p in (tmp_path / "c" / "videos" / vid).iterdir())
        assert files[0] == "000000.png" and "annotations.csv" in files and "proposals.csv" in files
        head = (tmp_path / "c" / "videos" / vid / "annotations.csv").read_text().splitlines()[0]
        assert head == "frame_id,class_id,cx,cy,w,h"

    def test_bad_manifest(self, tiny, tmp_path):
        root = tmp_path / "c"
        write_corpus(tiny, root)
        data = json.loads((root / "manifest.json").read_text())
        data["version"] = 42
        (root / "manifest.json").write_text(json.dumps(data))
        with pytest.raises(CorpusError):
            read_corpus(root)

    def test_missing_corpus(self, tmp_path):
        with pytest.raises(CorpusError):
            read_corpus(tmp_path / "nothing")
