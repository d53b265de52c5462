"""Trainer: step decomposition, determinism, checkpoint/resume, inference."""

import os

import numpy as np
import pytest

from inkgan import tensor as ts
from inkgan import trainer as tr
from inkgan.checkpoint import load_checkpoint, save_checkpoint
from inkgan.data import Batch, Dataset, prepare
from inkgan.errors import CheckpointError, ConfigError, TrainingError
from inkgan.metrics import read_metric_records
from inkgan.trainer import (
    TrainConfig,
    build_networks,
    build_optimizers,
    cyclegan_step,
    infer,
    load_generator,
    pix2pix_step,
    read_loss_history,
    train,
)

from _synth import write_raw_dataset


def tiny_config(**overrides):
    kwargs = dict(
        objective="pix2pix",
        epochs=2,
        batch_size=4,
        image_size=16,
        seed=3,
        depth=2,
        base_filters=4,
        disc_layers=1,
        dropout_stages=1,
        checkpoint_every=2,
        sample_size=2,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def random_batch(cfg, seed=0, n=4):
    rng = np.random.default_rng(seed)
    return Batch(
        sketch=ts.Tensor(
            rng.uniform(-1, 1, size=(n, cfg.sketch_channels, cfg.image_size, cfg.image_size)).astype(
                np.float32
            )
        ),
        color=ts.Tensor(
            rng.uniform(-1, 1, size=(n, 3, cfg.image_size, cfg.image_size)).astype(np.float32)
        ),
        ids=[f"b{i}" for i in range(n)],
    )


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    raw = tmp_path_factory.mktemp("raw")
    root = tmp_path_factory.mktemp("prepared")
    write_raw_dataset(raw, 12, seed=5, height=16)
    prepare(str(raw), str(root), size=16, val_fraction=0.25, seed=1)
    return Dataset(str(root))


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            tiny_config(objective="vae")
        with pytest.raises(ConfigError):
            tiny_config(epochs=0)
        with pytest.raises(ConfigError):
            tiny_config(image_size=20, depth=3)

    def test_dict_roundtrip(self):
        cfg = tiny_config()
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            TrainConfig.from_dict({"objective": "pix2pix", "turbo": True})

    def test_full_scale_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 150
        assert cfg.batch_size == 32
        assert cfg.image_size == 256
        assert (cfg.alpha, cfg.beta1, cfg.beta2, cfg.epsilon) == (2e-4, 0.5, 0.999, 1e-7)
        assert (cfg.lambda_l1, cfg.lambda_tv, cfg.lambda_cyc) == (100.0, 0.0001, 10.0)
        assert cfg.sample_size == 100


class TestBuildNetworks:
    def test_pix2pix_pair(self):
        nets = build_networks(tiny_config())
        assert set(nets) == {"G", "D"}
        assert nets["G"].config.in_channels == 3
        assert nets["D"].config.in_channels == 6  # sketch + candidate color

    def test_cyclegan_quartet(self):
        nets = build_networks(tiny_config(objective="cyclegan"))
        assert set(nets) == {"G", "F", "DX", "DY"}
        assert nets["F"].config.in_channels == 3
        assert nets["DX"].config.in_channels == 3
        assert nets["DY"].config.in_channels == 3

    def test_grayscale_sketch_channels(self):
        nets = build_networks(tiny_config(grayscale_sketch=True))
        assert nets["G"].config.in_channels == 1
        assert nets["D"].config.in_channels == 4

    def test_network_seeds_differ(self):
        nets = build_networks(tiny_config())
        g_first = next(iter(nets["G"].params.values())).data
        d_first = next(iter(nets["D"].params.values())).data
        assert g_first.shape != d_first.shape or not np.array_equal(g_first, d_first)


class TestPix2pixStep:
    def test_total_decomposes_with_recipe_weights(self):
        cfg = tiny_config(objective="pix2pix_tv")
        nets = build_networks(cfg)
        opts = build_optimizers(cfg, nets)
        batch = random_batch(cfg)
        out = pix2pix_step(
            batch, nets["G"], nets["D"], opts["G"], opts["D"], cfg.loss_config(), 0
        )
        recon = out["g_adv"] + 100.0 * out["l1"] + 0.0001 * out["tv"]
        assert out["g_total"] == pytest.approx(recon, rel=1e-5)
        assert out["tv"] > 0

    def test_zero_learning_rate_keeps_parameters(self):
        cfg = tiny_config(alpha=0.0)
        nets = build_networks(cfg)
        opts = build_optimizers(cfg, nets)
        before = {n: p.data.copy() for n, p in nets["G"].params.items()}
        out = pix2pix_step(
            random_batch(cfg), nets["G"], nets["D"], opts["G"], opts["D"], cfg.loss_config(), 0
        )
        for name, p in nets["G"].params.items():
            np.testing.assert_array_equal(before[name], p.data)
        assert all(np.isfinite(v) for v in out.values())

    def test_bitwise_deterministic_across_fresh_runs(self):
        def run():
            cfg = tiny_config()
            nets = build_networks(cfg)
            opts = build_optimizers(cfg, nets)
            out = []
            for i in range(3):
                out.append(
                    pix2pix_step(
                        random_batch(cfg, seed=i),
                        nets["G"],
                        nets["D"],
                        opts["G"],
                        opts["D"],
                        cfg.loss_config(),
                        step_seed=i,
                    )
                )
            return out

        assert run() == run()

    def test_parameters_move_every_step(self):
        cfg = tiny_config()
        nets = build_networks(cfg)
        opts = build_optimizers(cfg, nets)
        hashes = []
        for i in range(3):
            pix2pix_step(
                random_batch(cfg, seed=i), nets["G"], nets["D"], opts["G"], opts["D"],
                cfg.loss_config(), i,
            )
            hashes.append(
                tuple(hash(p.data.tobytes()) for p in nets["G"].params.values())
            )
        assert len(set(hashes)) == 3

    def test_non_finite_loss_aborts(self):
        cfg = tiny_config()
        nets = build_networks(cfg)
        opts = build_optimizers(cfg, nets)
        next(iter(nets["G"].params.values())).data[0] = np.nan
        with np.errstate(invalid="ignore"), pytest.raises(TrainingError, match="non-finite"):
            pix2pix_step(
                random_batch(cfg), nets["G"], nets["D"], opts["G"], opts["D"],
                cfg.loss_config(), 0,
            )


class TestCycleganStep:
    def test_total_decomposes_with_cycle_weight(self):
        cfg = tiny_config(objective="cyclegan")
        nets = build_networks(cfg)
        opts = build_optimizers(cfg, nets)
        out = cyclegan_step(random_batch(cfg), nets, opts, cfg.loss_config(), 0)
        recon = out["g_adv_x"] + out["g_adv_y"] + 10.0 * out["cycle"]
        assert out["g_total"] == pytest.approx(recon, rel=1e-5)

    def test_cycle_term_shrinks_with_training(self):
        cfg = tiny_config(objective="cyclegan", alpha=2e-3)
        nets = build_networks(cfg)
        opts = build_optimizers(cfg, nets)
        batch = random_batch(cfg)
        first = cyclegan_step(batch, nets, opts, cfg.loss_config(), 0)["cycle"]
        last = None
        for i in range(1, 40):
            last = cyclegan_step(batch, nets, opts, cfg.loss_config(), i)["cycle"]
        assert last < first

    def test_deterministic_by_seed(self):
        def run():
            cfg = tiny_config(objective="cyclegan")
            nets = build_networks(cfg)
            opts = build_optimizers(cfg, nets)
            return cyclegan_step(random_batch(cfg), nets, opts, cfg.loss_config(), 7)

        assert run() == run()


class TestTrainLoop:
    def test_artifacts_and_row_counts(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        result = train(cfg, tiny_dataset, str(tmp_path / "run"))
        records = read_metric_records(os.path.join(result.run_dir, "metrics.csv"))
        assert len(records) == cfg.epochs
        assert [r.epoch for r in records] == [1, 2]
        assert all(r.sample_size == 2 for r in records)
        history = read_loss_history(os.path.join(result.run_dir, "losses.csv"))
        assert len(history) == cfg.epochs
        assert {"epoch", "d_loss", "g_adv", "l1", "tv", "g_total", "val_l1"} <= set(history[0])
        assert os.path.exists(os.path.join(result.run_dir, "samples", "epoch_1.png"))
        assert os.path.exists(os.path.join(result.run_dir, "samples", "epoch_2.png"))
        from inkgan.data import load_png

        grid = load_png(os.path.join(result.run_dir, "samples", "epoch_2.png"))
        assert grid.shape == (2 * 16, 3 * 16, 3)  # sample rows x [sketch|truth|generated]
        assert result.checkpoints == [
            os.path.join(result.run_dir, "checkpoints", "epoch_0002.ckpt")
        ]

    def test_loss_sequence_is_bitwise_reproducible(self, tiny_dataset, tmp_path):
        a = train(tiny_config(), tiny_dataset, str(tmp_path / "a"))
        b = train(tiny_config(), tiny_dataset, str(tmp_path / "b"))
        assert a.losses == b.losses
        assert [r.fid for r in a.records] == [r.fid for r in b.records]

    def test_resume_matches_uninterrupted_run(self, tiny_dataset, tmp_path):
        full = train(tiny_config(epochs=3), tiny_dataset, str(tmp_path / "full"))
        head = train(tiny_config(epochs=2), tiny_dataset, str(tmp_path / "head"))
        resumed = train(
            tiny_config(epochs=3),
            tiny_dataset,
            str(tmp_path / "resumed"),
            resume_from=head.checkpoints[-1],
        )
        assert len(resumed.losses) == 1
        assert resumed.losses[0] == full.losses[2]
        assert resumed.records[0].fid == full.records[2].fid

    def test_sample_size_exceeding_val_rejected(self, tiny_dataset, tmp_path):
        with pytest.raises(ConfigError, match="sample_size"):
            train(tiny_config(sample_size=50), tiny_dataset, str(tmp_path / "r"))

    def test_resume_config_mismatch_rejected(self, tiny_dataset, tmp_path):
        head = train(tiny_config(epochs=2), tiny_dataset, str(tmp_path / "h"))
        with pytest.raises(ConfigError, match="resume config mismatch"):
            train(
                tiny_config(epochs=3, seed=99),
                tiny_dataset,
                str(tmp_path / "bad"),
                resume_from=head.checkpoints[-1],
            )

    def test_step_errors_carry_epoch_and_batch_context(self, tiny_dataset, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise TrainingError("non-finite discriminator loss: nan")

        monkeypatch.setattr(tr, "pix2pix_step", explode)
        with pytest.raises(TrainingError, match=r"epoch 1, batch 0"):
            train(tiny_config(), tiny_dataset, str(tmp_path / "x"))

    def test_grayscale_sketch_pipeline(self, tiny_dataset, tmp_path):
        from inkgan.data import Dataset

        gray = Dataset(tiny_dataset.root, grayscale_sketch=True)
        cfg = tiny_config(epochs=1, grayscale_sketch=True, checkpoint_every=1)
        result = train(cfg, gray, str(tmp_path / "gray"))
        assert len(result.records) == 1
        out = infer(result.checkpoints[-1], [np.full((16, 16, 3), 200, dtype=np.uint8)])
        assert out[0].shape == (16, 16, 3)

    def test_cyclegan_smoke(self, tiny_dataset, tmp_path):
        cfg = tiny_config(objective="cyclegan", epochs=1, checkpoint_every=1)
        result = train(cfg, tiny_dataset, str(tmp_path / "cg"))
        assert all(np.isfinite(list(result.losses[0].values())).all() for _ in [0])
        ckpt = load_checkpoint(result.checkpoints[-1])
        names = {k.split("/")[1] for k in ckpt.tensors if k.startswith("param/")}
        assert names == {"G", "F", "DX", "DY"}


class TestCheckpointFormat:
    def _saved(self, tmp_path, cfg=None):
        cfg = cfg or tiny_config()
        nets = build_networks(cfg)
        opts = build_optimizers(cfg, nets)
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(path, cfg.to_dict(), 4, cfg.seed, nets, opts)
        return path, cfg, nets, opts

    def test_save_load_save_is_byte_identical(self, tmp_path):
        path, cfg, nets, opts = self._saved(tmp_path)
        first = open(path, "rb").read()
        ckpt = load_checkpoint(path)
        nets2 = build_networks(TrainConfig.from_dict(ckpt.config))
        opts2 = build_optimizers(TrainConfig.from_dict(ckpt.config), nets2)
        tr._restore_from_checkpoint(ckpt, TrainConfig.from_dict(ckpt.config), nets2, opts2)
        path2 = str(tmp_path / "y.ckpt")
        save_checkpoint(path2, ckpt.config, ckpt.epoch, ckpt.seed, nets2, opts2)
        assert open(path2, "rb").read() == first

    def test_magic_and_version_enforced(self, tmp_path):
        path, *_ = self._saved(tmp_path)
        raw = bytearray(open(path, "rb").read())
        raw[:4] = b"NOPE"
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(str(bad))

    def test_truncation_detected(self, tmp_path):
        path, *_ = self._saved(tmp_path)
        raw = open(path, "rb").read()
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(cut))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(str(tmp_path / "ghost.ckpt"))

    def test_config_snapshot_is_self_describing(self, tmp_path):
        path, cfg, _, _ = self._saved(tmp_path)
        ckpt = load_checkpoint(path)
        assert TrainConfig.from_dict(ckpt.config) == cfg
        assert ckpt.epoch == 4


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    result = train(tiny_config(), tiny_dataset, str(run))
    return result.checkpoints[-1], tiny_dataset


class TestInference:
    def test_output_shape_and_range(self, trained):
        ckpt_path, dataset = trained
        sketch = np.full((20, 20, 3), 240, dtype=np.uint8)
        (out,) = infer(ckpt_path, [sketch])
        assert out.shape == (16, 16, 3)
        assert out.dtype == np.uint8

    def test_identical_input_gives_identical_bytes(self, trained):
        ckpt_path, _ = trained
        sketch = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        a = infer(ckpt_path, [sketch])[0]
        b = infer(ckpt_path, [sketch])[0]
        np.testing.assert_array_equal(a, b)

    def test_batch_preserves_order(self, trained):
        ckpt_path, _ = trained
        rng = np.random.default_rng(1)
        sketches = [rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8) for _ in range(3)]
        outs = infer(ckpt_path, sketches)
        assert len(outs) == 3
        singles = [infer(ckpt_path, [s])[0] for s in sketches]
        for got, want in zip(outs, singles):
            np.testing.assert_array_equal(got, want)

    def test_generator_only_loading(self, trained):
        ckpt_path, _ = trained
        g_net, cfg = load_generator(ckpt_path)
        assert g_net.mode == "eval"
        assert cfg.image_size == 16
