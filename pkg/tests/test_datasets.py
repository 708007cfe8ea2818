import numpy as np
import pytest

from diffvicl.benchmark.datasets import (
    CityscapesAdapter,
    ColorizationAdapter,
    EdgeMapAdapter,
    KeypointAdapter,
    Pascal5iAdapter,
    build_episodes,
    convert_deepfashion_landmarks,
    make_adapter,
    prepare_edge_maps,
)
from diffvicl.core import VICLConfig
from diffvicl.errors import IngestionError
from diffvicl.retrieval import DownsampleEncoder
from diffvicl.tasks import BBox, BinaryMask, ClassMap, EdgeMap, KeypointSet

from synthetic import (
    make_cityscapes_tree,
    make_color_tree,
    make_edge_tree,
    make_keypoint_tree,
    make_pascal_tree,
)


@pytest.fixture
def pascal_root(tmp_path):
    root = tmp_path / "voc"
    make_pascal_tree(root)
    return root


class TestPascal5i:
    def test_episode_index_counts_image_class_pairs(self, pascal_root):
        adapter = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        # one class blob per synthetic validation image
        assert len(adapter.query_ids()) == 3

    def test_pools_are_same_class_training_images(self, pascal_root):
        adapter = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        qid = adapter.query_ids()[0]
        cls = int(qid.rsplit("#", 1)[1])
        pool = adapter.pool_ids(qid)
        assert pool
        assert all(int(p.rsplit("#", 1)[1]) == cls for p in pool)
        assert all(p.startswith("train_") for p in pool)

    def test_query_loads_image_and_mask(self, pascal_root):
        adapter = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        img, ann = adapter.load_query(adapter.query_ids()[0])
        assert img.pixels.shape == (128, 128, 3)
        assert isinstance(ann, BinaryMask) and ann.mask.any()

    def test_prompt_target_is_rendered_mask(self, pascal_root):
        adapter = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        pid = adapter.pool_ids(adapter.query_ids()[0])[0]
        img, target = adapter.load_prompt(pid)
        assert set(np.unique(target.pixels)) <= {0.0, 1.0}

    def test_detection_excludes_multi_instance_images(self, pascal_root):
        seg = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        det = Pascal5iAdapter(pascal_root, split_id=0, task="object_detection", image_size=128)
        assert len(det.query_ids()) == len(seg.query_ids()) - 1  # two-instance val image dropped
        _, ann = det.load_query(det.query_ids()[0])
        assert isinstance(ann, BBox)

    def test_split_classes(self, pascal_root):
        assert Pascal5iAdapter(pascal_root, split_id=0).classes == (1, 2, 3, 4, 5)
        assert Pascal5iAdapter(pascal_root, split_id=3).classes == (16, 17, 18, 19, 20)

    def test_missing_root_is_ingestion_error_with_path(self, tmp_path):
        with pytest.raises(IngestionError) as err:
            Pascal5iAdapter(tmp_path / "missing", split_id=0)
        assert "missing" in str(err.value)


class TestCityscapes:
    def test_label_ids_map_to_train_ids(self, tmp_path):
        make_cityscapes_tree(tmp_path)
        adapter = CityscapesAdapter(tmp_path, image_size=128)
        _, ann = adapter.load_query(adapter.query_ids()[0])
        assert isinstance(ann, ClassMap)
        present = set(np.unique(ann.ids))
        assert present <= {0, 10, 13, 255}  # road, sky, car, void
        assert adapter.num_classes == 19

    def test_queries_val_pool_train(self, tmp_path):
        make_cityscapes_tree(tmp_path)
        adapter = CityscapesAdapter(tmp_path, image_size=128)
        assert len(adapter.query_ids()) == 2
        assert len(adapter.pool_ids(adapter.query_ids()[0])) == 3


class TestKeypointAdapter:
    def test_points_follow_preprocessing(self, tmp_path):
        make_keypoint_tree(tmp_path)
        adapter = KeypointAdapter(tmp_path, image_size=128)
        _, ann = adapter.load_query(adapter.query_ids()[0])
        assert isinstance(ann, KeypointSet)
        assert len(ann) == 2  # the invisible point is dropped
        for p in ann.points:
            assert 0 <= p.x < 128 and 0 <= p.y < 128

    def test_prompt_target_is_heatmap(self, tmp_path):
        make_keypoint_tree(tmp_path)
        adapter = KeypointAdapter(tmp_path, image_size=128)
        _, target = adapter.load_prompt(adapter.pool_ids(adapter.query_ids()[0])[0])
        # transformed centers land off-grid, so the discrete peak dips below 1
        assert target.pixels[:, :, 1].max() >= 0.95
        assert np.all(target.pixels[:, :, 2] == 0)


class TestEdgeAdapter:
    def test_pairs_and_annotation(self, tmp_path):
        make_edge_tree(tmp_path)
        adapter = EdgeMapAdapter(tmp_path, image_size=128)
        assert len(adapter.query_ids()) == 2
        _, ann = adapter.load_query(adapter.query_ids()[0])
        assert isinstance(ann, EdgeMap) and ann.values.max() > 0.5

    def test_missing_edge_map_is_ingestion_error(self, tmp_path):
        make_edge_tree(tmp_path)
        extra = tmp_path / "val" / "images" / "orphan.png"
        extra.write_bytes((tmp_path / "val" / "images" / "val_0.png").read_bytes())
        with pytest.raises(IngestionError):
            EdgeMapAdapter(tmp_path, image_size=128)

    def test_prepare_edge_maps_provider(self, tmp_path):
        make_edge_tree(tmp_path)
        out_dir = tmp_path / "generated"
        written = prepare_edge_maps(tmp_path / "val" / "images", out_dir, provider=lambda img: img.pixels.mean(axis=2))
        assert written == 2
        assert sorted(p.name for p in out_dir.iterdir()) == ["val_0.png", "val_1.png"]


class TestColorizationAdapter:
    def test_query_is_grayscale_gt_is_color(self, tmp_path):
        make_color_tree(tmp_path)
        adapter = ColorizationAdapter(tmp_path, image_size=128)
        query, gt = adapter.load_query(adapter.query_ids()[0])
        assert np.allclose(query.pixels[:, :, 0], query.pixels[:, :, 1])
        assert not np.allclose(gt.pixels[:, :, 0], gt.pixels[:, :, 1])


class TestBuildEpisodes:
    def test_deterministic_for_seed(self, pascal_root):
        adapter = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        cfg = VICLConfig(n_prompts=2)
        a = build_episodes(adapter, cfg, seed=5)
        b = build_episodes(adapter, cfg, seed=5)
        assert a == b
        c = build_episodes(adapter, cfg, seed=6)
        assert any(x.prompt_ids != y.prompt_ids for x, y in zip(a, c)) or a == c

    def test_subsample_is_seeded_and_stable(self, tmp_path):
        root = tmp_path / "voc"
        make_pascal_tree(root, n_val=6, two_instance_val=False)
        adapter = Pascal5iAdapter(root, split_id=0, image_size=128)
        cfg = VICLConfig(n_prompts=1)
        a = build_episodes(adapter, cfg, seed=3, subsample=3)
        b = build_episodes(adapter, cfg, seed=3, subsample=3)
        assert [e.query_id for e in a] == [e.query_id for e in b]
        assert len(a) == 3

    def test_retrieval_orders_prompts_by_similarity(self, pascal_root, tmp_path):
        adapter = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        cfg = VICLConfig(n_prompts=2)
        eps = build_episodes(
            adapter, cfg, retrieval=DownsampleEncoder(), seed=0, cache_path=tmp_path / "emb.npz"
        )
        assert all(len(e.prompt_ids) >= 1 for e in eps)
        assert (tmp_path / "emb.npz").exists()
        again = build_episodes(
            adapter, cfg, retrieval=DownsampleEncoder(), seed=0, cache_path=tmp_path / "emb.npz"
        )
        assert eps == again

    def test_prompt_count_saturates_at_pool_size(self, pascal_root):
        adapter = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        eps = build_episodes(adapter, VICLConfig(n_prompts=50), seed=0)
        for e in eps:
            assert len(e.prompt_ids) == len(adapter.pool_ids(e.query_id))
            assert e.config.n_prompts == len(e.prompt_ids)

    def test_specs_carry_reproducibility_fields(self, pascal_root):
        adapter = Pascal5iAdapter(pascal_root, split_id=0, image_size=128)
        (spec,) = build_episodes(adapter, VICLConfig(n_prompts=1), seed=0)[:1]
        assert spec.dataset_id == "pascal5i"
        assert spec.split_id == "0"
        assert spec.content_key() == spec.content_key()


class TestFactoryAndConverter:
    def test_make_adapter_names(self, pascal_root):
        adapter = make_adapter("pascal5i", pascal_root, "foreground_segmentation", 0, image_size=128)
        assert adapter.dataset_id == "pascal5i"
        with pytest.raises(IngestionError):
            make_adapter("webvision", pascal_root, "colorization", None)

    def test_deepfashion_conversion(self, tmp_path):
        landmarks = tmp_path / "list_landmarks_inshop.txt"
        landmarks.write_text(
            "3\n"
            "image_name clothes_type variation_type landmarks\n"
            "img/a.jpg 1 1 0 050 060 1 070 080\n"
            "img/b.jpg 1 2 0 010 020\n"
            "img/c.jpg 3 1 2 000 000 0 030 040\n"
        )
        partition = tmp_path / "list_eval_partition.txt"
        partition.write_text(
            "3\n"
            "image_name item_id evaluation_status\n"
            "img/a.jpg id_1 train\n"
            "img/b.jpg id_2 query\n"
            "img/c.jpg id_3 gallery\n"
        )
        out = tmp_path / "converted"
        n_train, n_val = convert_deepfashion_landmarks(landmarks, partition, out)
        assert (n_train, n_val) == (1, 2)
        import json

        rows = [json.loads(line) for line in (out / "keypoints_val.jsonl").read_text().splitlines()]
        assert rows[0]["image_id"] == "img/b.jpg"
        assert rows[0]["points"] == [[10.0, 20.0, True, "body"]]
        assert rows[1]["points"][0][2] is False  # visibility flag 2 maps to hidden
