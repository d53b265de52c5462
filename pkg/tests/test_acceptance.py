"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -v -s tests/test_acceptance.py` to see the per-criterion
lines. Criteria 4 and 5 share six desk-scale training runs (two objectives,
three paired seeds) built once per session.
"""

import math
import time
from contextlib import contextmanager
from statistics import median

import numpy as np
import pytest

from inkgan import tensor as ts
from inkgan.checkpoint import load_checkpoint, save_checkpoint
from inkgan.data import (
    Dataset,
    ImagePair,
    augment,
    batches,
    denormalize,
    normalize,
    prepare,
    split_pair,
)
from inkgan.losses import tv_loss
from inkgan.metrics import GaussianStats, SsimConfig, frechet_distance, ssim
from inkgan.nets import forward
from inkgan.trainer import (
    TrainConfig,
    build_networks,
    build_optimizers,
    cyclegan_step,
    load_generator,
    pix2pix_step,
    train,
)

from _checks import (
    GRADIENT_CASES,
    grid_image,
    loss_gradient_cases,
    run_gradient_sweep,
    run_loss_gradient_sweep,
    ssim_bruteforce,
    tv_oracle,
)
from _synth import write_raw_dataset


@contextmanager
def criterion(number, description):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} FAIL - {description}", flush=True)
        raise
    print(f"ACCEPTANCE {number} PASS - {description}", flush=True)


# ---------------------------------------------------------------------------
# shared desk-scale runs (criteria 4 and 5)

DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    raw = tmp_path_factory.mktemp("desk_raw")
    root = tmp_path_factory.mktemp("desk_data")
    write_raw_dataset(raw, 240, seed=100, height=64)
    prepare(str(raw), str(root), size=64, val_fraction=1 / 6, seed=100)
    dataset = Dataset(str(root))
    assert len(dataset.ids("train")) == 200
    assert len(dataset.ids("val")) == 40
    return dataset


def _desk_config(objective, seed):
    return TrainConfig(
        objective=objective,
        epochs=30,
        batch_size=8,
        image_size=64,
        seed=seed,
        depth=4,
        base_filters=16,
        checkpoint_every=30,
        sample_size=40,
    )


def _held_out_mean_tv(ckpt_path, dataset):
    """Mean per-pixel TV of eval-mode outputs on the validation sketches."""
    g_net, _ = load_generator(ckpt_path)
    values = []
    for pair_id in dataset.ids("val"):
        sketch = dataset.load_pair(pair_id).sketch.data[None]
        out = forward(g_net, ts.Tensor(sketch), mode="eval")
        values.append(tv_loss(out, mean=True).item())
    return float(np.mean(values))


@pytest.fixture(scope="session")
def desk_runs(desk_dataset, tmp_path_factory):
    """(objective, seed) -> dict with the run's results and derived stats."""
    runs = {}
    base = tmp_path_factory.mktemp("desk_runs")
    for objective in ("pix2pix", "pix2pix_tv"):
        for seed in DESK_SEEDS:
            cfg = _desk_config(objective, seed)
            run_dir = str(base / f"{objective}-s{seed}")
            started = time.monotonic()
            result = train(cfg, desk_dataset, run_dir)
            elapsed = time.monotonic() - started
            runs[(objective, seed)] = {
                "result": result,
                "elapsed": elapsed,
                "mean_tv": _held_out_mean_tv(result.checkpoints[-1], desk_dataset),
            }
            record = result.records[-1]
            print(
                f"desk run {objective} seed {seed}: {elapsed / 60:.1f} min, "
                f"final fid={record.fid:.3f} ssim_mean={record.ssim_mean:.4f} "
                f"mean_tv={runs[(objective, seed)]['mean_tv']:.5f}",
                flush=True,
            )
    return runs


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_gradient_suite():
    with criterion(1, "finite-difference suite over every op and loss (<2 min)"):
        started = time.monotonic()
        for name in sorted(GRADIENT_CASES):
            run_gradient_sweep(name, instances=20, rel_tol=1e-3)
        for name in sorted(loss_gradient_cases()):
            run_loss_gradient_sweep(name, instances=20, rel_tol=1e-3)
        elapsed = time.monotonic() - started
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


def test_criterion_2_oracle_equivalence():
    with criterion(2, "SSIM, Frechet and TV agree with independent oracles"):
        # SSIM vs brute-force windows, 20 random 32x32 pairs, 1e-6
        rng = np.random.default_rng(201)
        cfg = SsimConfig()
        for _ in range(20):
            a = rng.uniform(0, 1, size=(3, 32, 32))
            b = rng.uniform(0, 1, size=(3, 32, 32))
            assert abs(ssim(a, b, cfg) - ssim_bruteforce(a, b, cfg)) < 1e-6

        # Frechet vs closed forms: (dmu)^2 + (sigma_p - sigma_q)^2 structure
        p = GaussianStats(mu=[0.0], sigma=[[1.0]])
        q = GaussianStats(mu=[3.0], sigma=[[1.0]])
        assert abs(frechet_distance(p, q) - 9.0) < 1e-6
        p2 = GaussianStats(mu=[0.0, 0.0], sigma=np.diag([1.0, 4.0]))
        q2 = GaussianStats(mu=[0.0, 0.0], sigma=np.diag([4.0, 1.0]))
        assert abs(frechet_distance(p2, q2) - 2.0) < 1e-6
        for _ in range(10):
            d = int(rng.integers(1, 6))
            mu_p, mu_q = rng.normal(size=d), rng.normal(size=d)
            var_p, var_q = rng.uniform(0.1, 3.0, d), rng.uniform(0.1, 3.0, d)
            got = frechet_distance(
                GaussianStats(mu=mu_p, sigma=np.diag(var_p)),
                GaussianStats(mu=mu_q, sigma=np.diag(var_q)),
            )
            closed = float(
                np.sum((mu_p - mu_q) ** 2) + np.sum((np.sqrt(var_p) - np.sqrt(var_q)) ** 2)
            )
            assert abs(got - closed) < 1e-6

        # TV vs nested loops, exact, 100 random images up to 8x8 (grid values
        # make every summation order exact, so equality is literal)
        rng = np.random.default_rng(202)
        for _ in range(100):
            shape = (
                int(rng.integers(1, 3)),
                int(rng.integers(1, 4)),
                int(rng.integers(1, 9)),
                int(rng.integers(1, 9)),
            )
            img = grid_image(rng, shape)
            assert tv_loss(ts.Tensor(img)).item() == tv_oracle(img)


def test_criterion_3_loss_weight_fidelity():
    with criterion(3, "reported totals decompose with lambda 100 / 0.0001 / 10"):
        cfg = TrainConfig(
            objective="pix2pix_tv", epochs=1, batch_size=4, image_size=16,
            seed=5, depth=2, base_filters=4, disc_layers=1, sample_size=1,
        )
        assert (cfg.lambda_l1, cfg.lambda_tv, cfg.lambda_cyc) == (100.0, 0.0001, 10.0)
        nets = build_networks(cfg)
        opts = build_optimizers(cfg, nets)
        rng = np.random.default_rng(3)
        from inkgan.data import Batch

        batch = Batch(
            sketch=ts.Tensor(rng.uniform(-1, 1, size=(4, 3, 16, 16)).astype(np.float32)),
            color=ts.Tensor(rng.uniform(-1, 1, size=(4, 3, 16, 16)).astype(np.float32)),
            ids=["a", "b", "c", "d"],
        )
        out = pix2pix_step(
            batch, nets["G"], nets["D"], opts["G"], opts["D"], cfg.loss_config(), 0
        )
        recon = out["g_adv"] + 100.0 * out["l1"] + 0.0001 * out["tv"]
        assert abs(out["g_total"] - recon) / abs(recon) < 1e-5

        cg_cfg = TrainConfig(
            objective="cyclegan", epochs=1, batch_size=4, image_size=16,
            seed=5, depth=2, base_filters=4, disc_layers=1, sample_size=1,
        )
        cg_nets = build_networks(cg_cfg)
        cg_opts = build_optimizers(cg_cfg, cg_nets)
        cg = cyclegan_step(batch, cg_nets, cg_opts, cg_cfg.loss_config(), 0)
        cg_recon = cg["g_adv_x"] + cg["g_adv_y"] + 10.0 * cg["cycle"]
        assert abs(cg["g_total"] - cg_recon) / abs(cg_recon) < 1e-5


def test_criterion_4_desk_scale_pix2pix(desk_runs):
    with criterion(4, "desk-scale run: held-out L1 and SSIM improve as required"):
        run = desk_runs[("pix2pix", 0)]
        assert run["elapsed"] < 45 * 60, f"run took {run['elapsed'] / 60:.1f} min"
        l1_curve = [row["val_l1"] for row in run["result"].losses]
        ssim_curve = [r.ssim_mean for r in run["result"].records]
        assert len(l1_curve) == 30
        best_l1, first_l1 = min(l1_curve), l1_curve[0]
        best_ssim, first_ssim = max(ssim_curve), ssim_curve[0]
        print(
            f"criterion 4: l1 first={first_l1:.4f} best={best_l1:.4f} "
            f"ratio={best_l1 / first_l1:.3f}; ssim first={first_ssim:.4f} "
            f"best={best_ssim:.4f} delta={best_ssim - first_ssim:.4f}",
            flush=True,
        )
        assert best_l1 <= 0.60 * first_l1
        assert best_ssim - first_ssim >= 0.05


def test_criterion_5_tv_regularization_direction(desk_runs):
    with criterion(5, "median held-out TV: pix2pix_tv <= pix2pix over 3 paired seeds"):
        plain = [desk_runs[("pix2pix", s)]["mean_tv"] for s in DESK_SEEDS]
        smoothed = [desk_runs[("pix2pix_tv", s)]["mean_tv"] for s in DESK_SEEDS]
        for s in DESK_SEEDS:
            p = desk_runs[("pix2pix", s)]["result"].records[-1]
            t = desk_runs[("pix2pix_tv", s)]["result"].records[-1]
            print(
                f"criterion 5 seed {s}: pix2pix tv={plain[s]:.5f} fid={p.fid:.3f} "
                f"ssim={p.ssim_mean:.4f} | pix2pix_tv tv={smoothed[s]:.5f} "
                f"fid={t.fid:.3f} ssim={t.ssim_mean:.4f}",
                flush=True,
            )
        assert median(smoothed) <= median(plain)


def test_criterion_6_determinism_and_checkpointing(tmp_path_factory):
    with criterion(6, "bitwise-reproducible loss sequence and resume parity"):
        raw = tmp_path_factory.mktemp("det_raw")
        root = tmp_path_factory.mktemp("det_data")
        write_raw_dataset(raw, 24, seed=55, height=32)
        prepare(str(raw), str(root), size=32, val_fraction=0.25, seed=55)
        dataset = Dataset(str(root))

        def config(epochs=3):
            return TrainConfig(
                objective="pix2pix", epochs=epochs, batch_size=6, image_size=32,
                seed=9, depth=3, base_filters=8, disc_layers=2,
                checkpoint_every=2, sample_size=6,
            )

        runs = tmp_path_factory.mktemp("det_runs")
        a = train(config(), dataset, str(runs / "a"))
        b = train(config(), dataset, str(runs / "b"))
        assert a.losses == b.losses  # bitwise: dict floats compared exactly
        assert [(r.fid, r.ssim_mean, r.ssim_std) for r in a.records] == [
            (r.fid, r.ssim_mean, r.ssim_std) for r in b.records
        ]

        head = train(config(epochs=2), dataset, str(runs / "head"))
        resumed = train(
            config(epochs=3), dataset, str(runs / "resumed"),
            resume_from=head.checkpoints[-1],
        )
        assert resumed.losses == [a.losses[2]]
        assert resumed.records[0].fid == a.records[2].fid


def test_criterion_7_pipeline_exactness():
    with criterion(7, "roundtrips, shared-transform augmentation, batch partition"):
        # normalize/denormalize across all 256 byte values
        img = np.arange(256, dtype=np.uint8).reshape(16, 16)
        np.testing.assert_array_equal(denormalize(normalize(img))[:, :, 0], img)

        # split/rejoin bitwise
        rng = np.random.default_rng(71)
        raw = rng.integers(0, 256, size=(32, 64, 3), dtype=np.uint8)
        color, sketch = split_pair(raw)
        np.testing.assert_array_equal(np.concatenate([color, sketch], axis=1), raw)

        # augmentation marker consistency over 100 seeds
        size = 32
        for seed in range(100):
            base_s = np.full((1, size, size), -0.8, dtype=np.float32)
            base_c = np.full((3, size, size), -0.8, dtype=np.float32)
            base_s[:, size // 2, size // 2] = 0.9
            base_c[:, size // 2, size // 2] = 0.9
            pair = ImagePair(sketch=ts.Tensor(base_s), color=ts.Tensor(base_c), id="m")
            out = augment(pair, seed)
            s_idx = np.unravel_index(np.argmax(out.sketch.data[0]), (size, size))
            c_idx = np.unravel_index(np.argmax(out.color.data[0]), (size, size))
            assert s_idx == c_idx
            assert out.sketch.data.shape == (1, size, size)

        # per-epoch batch partition over 50 random dataset sizes
        class FakeDataset:
            def __init__(self, n):
                self.n = n

            def ids(self, split):
                return [f"x{i}" for i in range(self.n)]

            def load_pair(self, pair_id):
                zero_s = np.zeros((1, 4, 4), dtype=np.float32)
                zero_c = np.zeros((3, 4, 4), dtype=np.float32)
                return ImagePair(sketch=ts.Tensor(zero_s), color=ts.Tensor(zero_c), id=pair_id)

        rng = np.random.default_rng(72)
        for _ in range(50):
            n = int(rng.integers(1, 101))
            batch_size = int(rng.integers(1, 17))
            epoch = int(rng.integers(0, 5))
            out = list(batches(FakeDataset(n), batch_size, seed=3, epoch=epoch, augmented=False))
            ids = [i for b in out for i in b.ids]
            assert sorted(ids) == sorted(f"x{i}" for i in range(n))
            assert all(len(b) == batch_size for b in out[:-1])
            assert 1 <= len(out[-1]) <= batch_size


def test_criterion_8_cyclegan_smoke(tmp_path_factory):
    with criterion(8, "CycleGAN 2-epoch smoke run with four-network checkpoint"):
        raw = tmp_path_factory.mktemp("cg_raw")
        root = tmp_path_factory.mktemp("cg_data")
        write_raw_dataset(raw, 50, seed=88, height=32)
        prepare(str(raw), str(root), size=32, val_fraction=0.2, seed=88)
        dataset = Dataset(str(root))
        cfg = TrainConfig(
            objective="cyclegan", epochs=2, batch_size=8, image_size=32,
            seed=2, depth=3, base_filters=8, disc_layers=2,
            checkpoint_every=2, sample_size=10,
        )
        run_dir = str(tmp_path_factory.mktemp("cg_run") / "run")
        result = train(cfg, dataset, run_dir)
        for row in result.losses:
            assert all(math.isfinite(v) for v in row.values())
        ckpt_path = result.checkpoints[-1]
        ckpt = load_checkpoint(ckpt_path)
        nets_in_ckpt = {k.split("/")[1] for k in ckpt.tensors if k.startswith("param/")}
        assert nets_in_ckpt == {"G", "F", "DX", "DY"}

        # checkpoint roundtrip: restore and re-save byte-identically
        cfg2 = TrainConfig.from_dict(ckpt.config)
        nets2 = build_networks(cfg2)
        opts2 = build_optimizers(cfg2, nets2)
        from inkgan.trainer import _restore_from_checkpoint

        _restore_from_checkpoint(ckpt, cfg2, nets2, opts2)
        resaved = ckpt_path + ".resaved"
        save_checkpoint(resaved, ckpt.config, ckpt.epoch, ckpt.seed, nets2, opts2)
        assert open(resaved, "rb").read() == open(ckpt_path, "rb").read()
