import numpy as np
import pytest

from lsla import harness
from lsla.harness import Dataset, DatasetError, SizeMismatchError, TrainConfig, TrainingDiverged
from lsla.model import ModelConfig, init_model, load_checkpoint


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    tr, ev = harness.synth_dataset(root, 4, 8, 56, seed=3)
    return harness.ingest(tr), harness.ingest(ev)


def write_fixture(root, images, labels, extra_lines=()):
    root.mkdir(parents=True, exist_ok=True)
    lines = ["file,label"]
    for i, (img, lab) in enumerate(zip(images, labels)):
        harness.write_tensor(root / f"s{i}.lslt", img)
        lines.append(f"s{i}.lslt,{lab}")
    lines += list(extra_lines)
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        arr = rng.standard_normal((3, 5, 2))
        harness.write_tensor(tmp_path / "t.lslt", arr)
        back = harness.read_tensor(tmp_path / "t.lslt")
        assert back.dtype == np.float64 and np.array_equal(back, arr)

    def test_layout(self):
        blob = harness.tensor_bytes(np.zeros((2, 3)))
        assert blob[:4] == b"LSLT"
        assert len(blob) == 4 + 4 + 4 + 2 * 8 + 6 * 8 + 4

    def test_corruption(self, tmp_path):
        p = tmp_path / "t.lslt"
        blob = bytearray(harness.tensor_bytes(np.ones(4)))
        blob[-8] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(DatasetError, match="checksum"):
            harness.read_tensor(p)


class TestIngest:
    def test_fixture(self, tmp_path, rng):
        write_fixture(tmp_path, rng.random((4, 8, 8, 3)), [0, 1, 1, 0])
        ds = harness.ingest(tmp_path)
        assert len(ds) == 4 and ds.num_classes == 2 and ds.image_size == 8
        assert ds.labels.tolist() == [0, 1, 1, 0]

    def test_missing_file_named(self, tmp_path, rng):
        write_fixture(tmp_path, rng.random((2, 8, 8, 3)), [0, 1], ["ghost.lslt,1"])
        with pytest.raises(DatasetError, match="ghost.lslt"):
            harness.ingest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            harness.ingest(tmp_path)

    def test_label_out_of_range(self, tmp_path, rng):
        write_fixture(tmp_path, rng.random((2, 8, 8, 3)), [0, 5])
        with pytest.raises(DatasetError, match="range"):
            harness.ingest(tmp_path, num_classes=4)

    def test_pixel_range(self, tmp_path):
        write_fixture(tmp_path, np.full((1, 4, 4, 3), 1.5), [0])
        with pytest.raises(DatasetError, match=r"\[0, 1\]"):
            harness.ingest(tmp_path)

    def test_shape_mismatch(self, tmp_path, rng):
        write_fixture(tmp_path, [rng.random((8, 8, 3)), rng.random((4, 4, 3))], [0, 1])
        with pytest.raises(DatasetError):
            harness.ingest(tmp_path)


class TestSynth:
    def test_counts(self, tmp_path):
        tr, ev = harness.synth_dataset(tmp_path, 4, 64, 56)
        train = harness.ingest(tr)
        assert len(train) == 256
        assert np.bincount(train.labels).tolist() == [64] * 4
        assert len(harness.ingest(ev)) == 64

    def test_same_seed_byte_identical(self, tmp_path):
        harness.synth_dataset(tmp_path / "a", 3, 4, 16, seed=7)
        harness.synth_dataset(tmp_path / "b", 3, 4, 16, seed=7)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_different_seed_differs(self):
        a = harness.synth_arrays(2, 4, 16, seed=1)["train"][0]
        b = harness.synth_arrays(2, 4, 16, seed=2)["train"][0]
        assert not np.array_equal(a, b)

    def test_ingest_round_trip(self, tmp_path):
        tr, _ = harness.synth_dataset(tmp_path, 4, 6, 24, seed=11)
        images, labels = harness.synth_arrays(4, 6, 24, seed=11)["train"]
        ds = harness.ingest(tr)
        assert np.array_equal(ds.images, images) and np.array_equal(ds.labels, labels)

    def test_pixels_in_unit_range(self):
        images, _ = harness.synth_arrays(4, 4, 32)["eval"]
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_centroid_baseline_is_weak(self, small_data):
        # A pixel-space centroid classifier should do little better than chance,
        # leaving room for the learned model to double it.
        acc = harness.nearest_centroid_accuracy(*small_data)
        assert acc <= 0.45


class TestSchedule:
    def test_warmup_then_cosine(self):
        t = TrainConfig(epochs=10, base_lr=1.0)
        lrs = [harness.lr_at(t, s, 1) for s in range(10)]
        assert lrs[0] == 1.0  # one warmup epoch
        assert all(a > b for a, b in zip(lrs[1:], lrs[2:]))
        assert lrs[1] == 1.0 and lrs[-1] > 0.0

    def test_linear_warmup(self):
        t = TrainConfig(epochs=10, base_lr=2.0, warmup_epochs=2)
        assert [harness.lr_at(t, s, 2) for s in range(4)] == [0.5, 1.0, 1.5, 2.0]

    def test_no_decay_names(self):
        cfg = ModelConfig(image_size=28, stem_mid_channels=4, stages=((1, 8, 1),), num_classes=2)
        skip = set(harness.no_decay_names(init_model(cfg, 0)))
        assert "stages.0.blocks.0.attn.dynamic_scale" in skip
        assert "stages.0.blocks.0.attn.outer_bias" in skip
        assert "head.fc.bias" in skip
        assert "head.fc.weight" not in skip and "stem.conv1.weight" not in skip


class TestTrain:
    def test_zero_lr_leaves_parameters(self, tiny_cfg, small_data):
        tcfg = TrainConfig(epochs=1, base_lr=0.0, seed=5)
        res = harness.train(tiny_cfg, tcfg, *small_data)
        init_seq = np.random.SeedSequence(5).spawn(3)[0]
        init = init_model(tiny_cfg, np.random.default_rng(init_seq))
        for k, v in res.params.items():
            assert np.array_equal(v.data, init[k].data), k

    def test_one_epoch_outputs(self, tiny_cfg, small_data, tmp_path):
        res = harness.train(
            tiny_cfg, TrainConfig(epochs=1), *small_data, checkpoint_path=tmp_path / "m.ckpt", log_path=tmp_path / "log.csv"
        )
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,eval_top1,lr" and len(lines) == 2
        assert np.isfinite(res.rows[0][1])
        assert harness.evaluate(tmp_path / "m.ckpt", small_data[1]) == res.rows[-1][2]
        cfg, _ = load_checkpoint(tmp_path / "m.ckpt")
        assert cfg == tiny_cfg

    def test_nan_input_aborts(self, tiny_cfg, small_data):
        train_ds, eval_ds = small_data
        bad = Dataset(train_ds.root, train_ds.files, train_ds.labels, np.full_like(train_ds.images, np.nan), 4)
        with pytest.raises(TrainingDiverged, match="epoch 1"):
            harness.train(tiny_cfg, TrainConfig(epochs=1), bad, eval_ds)

    def test_size_mismatch(self, small_data):
        cfg = ModelConfig(image_size=28, stem_mid_channels=4, stages=((1, 8, 1),), num_classes=4)
        with pytest.raises(SizeMismatchError):
            harness.train(cfg, TrainConfig(epochs=1), *small_data)

    def test_epochs_to(self):
        res = harness.TrainResult(None, {}, [(1, 1.0, 0.5, 0.1), (2, 0.5, 0.92, 0.1), (3, 0.4, 0.95, 0.1)])
        assert res.epochs_to(0.9) == 2
        assert res.epochs_to(0.99) == float("inf")

    def test_augment_keeps_shape_and_is_seeded(self, rng):
        imgs = rng.random((3, 8, 8, 3))
        t = TrainConfig()
        a = harness.augment(imgs, t, np.random.default_rng(0))
        b = harness.augment(imgs, t, np.random.default_rng(0))
        assert a.shape == imgs.shape and np.array_equal(a, b)


class TestEvaluate:
    def constant_model(self, cfg, cls):
        params = init_model(cfg, 0)
        params["head.fc.weight"].data[...] = 0.0
        params["head.fc.bias"].data[...] = 0.0
        params["head.fc.bias"].data[cls] = 1.0
        return params

    def test_constant_predictor(self, tiny_cfg, small_data):
        _, eval_ds = small_data
        for cls in range(4):
            assert harness.evaluate((tiny_cfg, self.constant_model(tiny_cfg, cls)), eval_ds) == 0.25

    def test_permutation_invariant(self, tiny_cfg, small_data):
        _, eval_ds = small_data
        params = init_model(tiny_cfg, 9)
        order = np.random.default_rng(0).permutation(len(eval_ds))
        a = harness.evaluate((tiny_cfg, params), eval_ds)
        assert harness.evaluate((tiny_cfg, params), eval_ds.subset(order)) == a

    def test_size_mismatch(self, small_data):
        cfg = ModelConfig(image_size=28, stem_mid_channels=4, stages=((1, 8, 1),), num_classes=4)
        with pytest.raises(SizeMismatchError):
            harness.evaluate((cfg, init_model(cfg, 0)), small_data[1])
