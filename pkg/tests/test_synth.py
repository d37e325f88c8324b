import numpy as np
import pytest
from scipy import ndimage

from src.config import DatasetRef, SceneConfig
from src.errors import ArgumentError, FormatError, GenerationError
from src.numcore import RngStream
from src.synth import (
    LABELED, SENTINEL_INVALID, UNLABELED, apply_strong, apply_weak, build_dataset, encode_dataset, generate_scene,
    load_dataset, make_splits, save_dataset, strong_augment, weak_augment,
)
from src.utils.codec import write_container


@pytest.mark.unit
class TestGenerateScene:

    def test_deterministic(self, small_scene_cfg):
        """Same stream, same scene"""
        a = generate_scene(small_scene_cfg, RngStream(1).child(4))
        b = generate_scene(small_scene_cfg, RngStream(1).child(4))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.pixel_instance_id, b.pixel_instance_id)

    def test_instances_match_id_map(self, small_scene_cfg):
        """Every mask is exactly its id in the pixel map, with a gap between instances"""
        for i in range(10):
            scene = generate_scene(small_scene_cfg, RngStream(2).child(i))
            assert small_scene_cfg.min_instances <= len(scene.instances) <= small_scene_cfg.max_instances
            for k, inst in enumerate(scene.instances, start=1):
                np.testing.assert_array_equal(scene.pixel_instance_id == k, inst.mask)
                assert 1 <= inst.class_id <= small_scene_cfg.num_classes
            for k, inst in enumerate(scene.instances, start=1):
                grown = ndimage.binary_dilation(inst.mask, np.ones((3, 3), dtype=bool))
                others = (scene.pixel_instance_id > 0) & (scene.pixel_instance_id != k)
                assert not np.any(grown & others)

    def test_image_range(self, small_scene):
        """Pixels are RGB in [0, 1]"""
        assert small_scene.image.shape == (3, 16, 16)
        assert small_scene.image.min() >= 0.0 and small_scene.image.max() <= 1.0

    def test_impossible_packing(self):
        """Bounded retries end in a generation error"""
        cfg = SceneConfig(height=16, width=16, min_instances=6, max_instances=6, min_size=14, max_size=16, max_retries=3,
                          shapes=['rectangle'])
        with pytest.raises(GenerationError):
            generate_scene(cfg, RngStream(0))

    def test_shared_class_pairs(self):
        """The first two instances share a class in most scenes"""
        assert SceneConfig().shared_class_prob >= 0.5
        cfg = SceneConfig(height=32, width=32, min_instances=2, max_instances=2, num_classes=4, min_size=4, max_size=8)
        scenes = [generate_scene(cfg, RngStream(9).child(i)) for i in range(400)]
        shared = np.mean([s.instances[0].class_id == s.instances[1].class_id for s in scenes])
        # 0.6 forced plus 0.4 * 1/4 by chance
        assert shared >= 0.6

    def test_cell_keys_distinguish_scenes(self, small_scene_cfg):
        """Equal instance ids in different scenes get different keys"""
        a = generate_scene(small_scene_cfg, RngStream(2).child(0))
        b = generate_scene(small_scene_cfg, RngStream(2).child(1))
        keys_a, keys_b = a.cell_instance_keys(2), b.cell_instance_keys(2)
        assert np.all((keys_a == 0) == (a.cell_instance_ids(2) == 0))
        assert not set(keys_a[keys_a > 0]) & set(keys_b[keys_b > 0])


@pytest.mark.unit
class TestSplits:

    def test_exact_labeled_count(self):
        """200 scenes at 10 percent gives 20 labeled"""
        splits = make_splits(200, 0.1, RngStream(0))
        assert splits.count(LABELED) == 20
        assert splits.count(UNLABELED) == 180

    @pytest.mark.parametrize('fraction', [0.0, -0.1, 1.5])
    def test_bad_fraction(self, fraction):
        """Fractions outside (0, 1] are argument errors"""
        with pytest.raises(ArgumentError):
            make_splits(10, fraction, RngStream(0))


@pytest.mark.unit
class TestViews:

    def test_identity_weak_view(self, small_scene):
        """No flip at scale 1 maps every pixel onto itself"""
        view = apply_weak(small_scene, flip=False, scale=1.0)
        np.testing.assert_array_equal(view.image, small_scene.image)
        grid = np.stack(np.meshgrid(np.arange(16), np.arange(16), indexing='ij'), axis=-1)
        np.testing.assert_array_equal(view.correspondence, grid)
        index, valid = view.feature_index(2)
        np.testing.assert_array_equal(index, np.arange(64))
        assert valid.all()

    def test_flip(self, small_scene):
        """A flipped view mirrors columns both ways"""
        view = apply_weak(small_scene, flip=True, scale=1.0)
        np.testing.assert_array_equal(view.image, small_scene.image[:, :, ::-1])
        assert tuple(view.correspondence[3, 0]) == (3, 15)

    def test_weak_resize_shape(self, small_scene):
        """Resized views snap to the stride"""
        view = apply_weak(small_scene, flip=False, scale=1.2, stride=4)
        assert view.image.shape[1] % 4 == 0 and view.image.shape[2] % 4 == 0
        assert view.valid_fraction == 1.0

    def test_crop_correspondence_is_sound(self, small_scene):
        """Following a source pixel into the view and back lands within one pixel"""
        view = apply_strong(small_scene, (4, 2, 9, 11))
        corr = view.correspondence
        valid = corr[..., 0] != SENTINEL_INVALID
        assert valid.sum() == 9 * 11
        assert view.valid_fraction == pytest.approx(99 / 256)
        ys, xs = np.nonzero(valid)
        back = view.source_coords[corr[ys, xs, 0], corr[ys, xs, 1]]
        assert np.max(np.abs(back - np.stack([ys, xs], axis=-1))) <= 1

    def test_crop_keeps_instance_identity(self, small_scene):
        """View pixels carry the instance id of the source pixel they came from"""
        view = apply_strong(small_scene, (2, 2, 12, 12))
        src = view.source_coords
        ids = small_scene.pixel_instance_id[src[..., 0], src[..., 1]]
        assert ids.shape == (16, 16)
        assert set(np.unique(ids)) <= set(np.unique(small_scene.pixel_instance_id))

    def test_grayscale_channels_equal(self, small_scene):
        """Grayscale leaves three identical channels, also after jitter and blur"""
        ops = {'jitter': [1.2, 0.8, 1.3], 'grayscale': True, 'blur': 1.0}
        view = apply_strong(small_scene, (2, 1, 12, 13), ops)
        np.testing.assert_allclose(view.image[0], view.image[1], atol=1e-12)
        np.testing.assert_allclose(view.image[1], view.image[2], atol=1e-12)
        assert not np.allclose(apply_strong(small_scene, (2, 1, 12, 13)).image[0],
                               apply_strong(small_scene, (2, 1, 12, 13)).image[1])

    def test_valid_fraction_tracks_crop_area(self, small_scene):
        """The share of source pixels seen by a random strong view is its crop area"""
        height, width = small_scene.shape
        for i in range(20):
            view = strong_augment(small_scene, RngStream(6).child(i), stride=2)
            _, _, crop_h, crop_w = view.params['crop']
            assert view.valid_fraction == pytest.approx(crop_h * crop_w / (height * width))
            assert 0.4 <= view.valid_fraction <= 1.0

    def test_bad_crop(self, small_scene):
        """Crops must fit inside the scene"""
        with pytest.raises(ArgumentError):
            apply_strong(small_scene, (10, 0, 8, 4))

    def test_augment_deterministic(self, small_scene):
        """Views depend only on their stream"""
        a = strong_augment(small_scene, RngStream(4), stride=2)
        b = strong_augment(small_scene, RngStream(4), stride=2)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.params == b.params
        assert weak_augment(small_scene, RngStream(4)).params == weak_augment(small_scene, RngStream(4)).params


@pytest.mark.unit
class TestDataset:

    def test_split_sizes(self, small_dataset):
        """Labeled pool follows the rounded label fraction"""
        assert len(small_dataset) == 6
        assert len(small_dataset.labeled) == 3
        assert len(small_dataset.unlabeled) == 3
        assert len(small_dataset.eval_scenes) == 2

    def test_rebuild_same_bytes(self, small_dataset_ref, small_dataset):
        """Same config and seed give identical encoded bytes"""
        assert encode_dataset(build_dataset(small_dataset_ref)) == encode_dataset(small_dataset)

    def test_save_load(self, tmp_path, small_dataset):
        """A saved dataset reloads with the same fingerprint"""
        path = save_dataset(str(tmp_path / 'd.pxds'), small_dataset)
        loaded = load_dataset(path)
        assert loaded.fingerprint() == small_dataset.fingerprint()
        assert [s.split for s in loaded.train] == [s.split for s in small_dataset.train]
        assert loaded.train[0].cell_instance_keys(2).tolist() == small_dataset.train[0].cell_instance_keys(2).tolist()

    def test_manifest(self, small_dataset):
        """The manifest lists every scene with its stream id"""
        manifest = small_dataset.manifest()
        assert manifest['n_labeled'] == 3
        assert len(manifest['scenes']) == 6
        assert all(isinstance(s['stream_id'], str) for s in manifest['scenes'])
        assert manifest['sha256'] == small_dataset.fingerprint()

    def test_wrong_kind(self, tmp_path):
        """A container that is not a dataset is rejected"""
        path = write_container(str(tmp_path / 'x.pxds'), b'PXDS', {'kind': 'other'}, [])
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_label_fraction_must_be_positive(self):
        """A zero label fraction is refused by the dataset config"""
        with pytest.raises(ValueError):
            DatasetRef(label_fraction=0.0)
