"""Training loops for the paired and cycle objectives, evaluation, inference.

Each batch performs one (configurable) discriminator update on real pairs
and detached fakes, then one generator update; per-epoch evaluation runs the
generator in eval mode over a fixed validation sample (the first sample_size
ids of the val manifest) so metric curves are comparable across epochs.
Every random draw derives from (seed, epoch, position), which makes the
loss sequence a pure function of (config, manifest, seed) and lets resume
reproduce an uninterrupted run bitwise.
"""

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as ts
from .checkpoint import load_checkpoint, save_checkpoint
from .data import batches, denormalize, normalize, resize, save_png, to_unit
from .errors import CheckpointError, ConfigError, TrainingError
from .losses import LossConfig, OBJECTIVES, cycle_loss, d_loss, g_adv_loss, pix2pix_objective
from .metrics import FeatureExtractor, SsimConfig, append_metric_record, evaluate_sample
from .nets import PatchGANConfig, UNetConfig, build_patchgan, build_unet, forward
from .optim import AdamState, adam_step, zero_grads

_NET_SEED_INDEX = {"G": 0, "D": 1, "F": 2, "DX": 3, "DY": 4}


def _derived_seed(*entropy):
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class TrainConfig:
    """Fully resolved training recipe; serialized into every checkpoint."""

    objective: str = "pix2pix"
    epochs: int = 150
    batch_size: int = 32
    image_size: int = 256
    seed: int = 0
    # networks
    depth: int = 8
    base_filters: int = 64
    disc_layers: int = 3
    dropout_stages: int = 3
    norm: str = "batch"
    grayscale_sketch: bool = False
    # optimizer
    alpha: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-7
    # losses
    lambda_l1: float = 100.0
    lambda_tv: float = 0.0001
    lambda_cyc: float = 10.0
    tv_mean: bool = False
    # loop bookkeeping
    d_updates: int = 1
    augment: bool = True
    checkpoint_every: int = 10
    sample_size: int = 100
    extractor_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.image_size % (2**self.depth):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^depth={2**self.depth}"
            )
        if self.checkpoint_every < 1 or self.sample_size < 1 or self.d_updates < 1:
            raise ConfigError("checkpoint_every, sample_size and d_updates must be >= 1")

    def loss_config(self):
        return LossConfig.for_objective(
            self.objective,
            lambda_l1=self.lambda_l1,
            lambda_tv=self.lambda_tv,
            lambda_cyc=self.lambda_cyc,
            tv_mean=self.tv_mean,
        )

    @property
    def sketch_channels(self):
        return 1 if self.grayscale_sketch else 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def build_networks(cfg):
    """Instantiate the networks the objective needs, with per-net seeds."""
    sk = cfg.sketch_channels

    def seed_for(name):
        return _derived_seed(cfg.seed, _NET_SEED_INDEX[name])

    def unet(name, in_ch, out_ch):
        return build_unet(
            UNetConfig(
                in_channels=in_ch,
                out_channels=out_ch,
                base_filters=cfg.base_filters,
                depth=cfg.depth,
                # the default of 3 suits full-scale depth-8 nets; shallow nets cap at depth
                dropout_stages=min(cfg.dropout_stages, cfg.depth),
                norm=cfg.norm,
            ),
            seed=seed_for(name),
            name=name,
        )

    def patchgan(name, in_ch):
        return build_patchgan(
            PatchGANConfig(
                in_channels=in_ch,
                base_filters=cfg.base_filters,
                n_layers=cfg.disc_layers,
                norm=cfg.norm,
            ),
            seed=seed_for(name),
            name=name,
        )

    if cfg.objective in ("pix2pix", "pix2pix_tv"):
        # conditional D sees the sketch concatenated with the candidate image
        return {"G": unet("G", sk, 3), "D": patchgan("D", sk + 3)}
    return {
        "G": unet("G", sk, 3),
        "F": unet("F", 3, sk),
        "DX": patchgan("DX", sk),
        "DY": patchgan("DY", 3),
    }


def build_optimizers(cfg, networks):
    return {
        name: AdamState(
            net.params, alpha=cfg.alpha, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.epsilon
        )
        for name, net in networks.items()
    }


def _require_finite(value, what):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what}: {value}")
    return value


def pix2pix_step(batch, g_net, d_net, opt_g, opt_d, loss_cfg, step_seed, d_updates=1):
    """One D update (real pair vs detached fake pair) then one G update.

    Returns the step's loss components as plain floats.
    """
    x, y = batch.sketch, batch.color
    fake = forward(g_net, x, "train", seed=_derived_seed(step_seed, 0))

    d_value = 0.0
    for _ in range(d_updates):
        real_logits = forward(d_net, ts.concat([x, y], axis=1), "train")
        fake_logits = forward(d_net, ts.concat([x, fake.detach()], axis=1), "train")
        d_total = d_loss(real_logits, fake_logits)
        d_value = _require_finite(d_total.item(), "discriminator loss")
        ts.backward(d_total)
        adam_step(d_net.params, opt_d)

    g_logits = forward(d_net, ts.concat([x, fake], axis=1), "train")
    total, parts = pix2pix_objective(g_logits, y, fake, loss_cfg)
    g_value = _require_finite(total.item(), "generator loss")
    ts.backward(total)
    adam_step(g_net.params, opt_g)
    zero_grads(d_net.params)  # spillover from the generator pass

    return {
        "d_loss": d_value,
        "g_adv": parts["g_adv"],
        "l1": parts["l1"],
        "tv": parts["tv"],
        "g_total": g_value,
    }


def cyclegan_step(batch, nets, opts, loss_cfg, step_seed, d_updates=1):
    """Update D_X and D_Y, then G and F jointly with the cycle term.

    Unpaired usage: the objective never compares G(x) against the paired y.
    """
    x, y = batch.sketch, batch.color
    g_net, f_net, dx_net, dy_net = nets["G"], nets["F"], nets["DX"], nets["DY"]

    fake_y = forward(g_net, x, "train", seed=_derived_seed(step_seed, 0))
    fake_x = forward(f_net, y, "train", seed=_derived_seed(step_seed, 1))

    d_values = {}
    for _ in range(d_updates):
        d_y = d_loss(
            forward(dy_net, y, "train"), forward(dy_net, fake_y.detach(), "train")
        )
        d_values["d_y"] = _require_finite(d_y.item(), "D_Y loss")
        ts.backward(d_y)
        adam_step(dy_net.params, opts["DY"])

        d_x = d_loss(
            forward(dx_net, x, "train"), forward(dx_net, fake_x.detach(), "train")
        )
        d_values["d_x"] = _require_finite(d_x.item(), "D_X loss")
        ts.backward(d_x)
        adam_step(dx_net.params, opts["DX"])

    adv_y = g_adv_loss(forward(dy_net, fake_y, "train"))
    adv_x = g_adv_loss(forward(dx_net, fake_x, "train"))
    rec_x = forward(f_net, fake_y, "train", seed=_derived_seed(step_seed, 2))
    rec_y = forward(g_net, fake_x, "train", seed=_derived_seed(step_seed, 3))
    cyc = cycle_loss(x, rec_x, y, rec_y)
    total = ts.add(ts.add(adv_y, adv_x), ts.scalar_mul(cyc, loss_cfg.lambda_cyc))
    g_value = _require_finite(total.item(), "generator total loss")
    ts.backward(total)
    adam_step(g_net.params, opts["G"])
    adam_step(f_net.params, opts["F"])
    zero_grads(dx_net.params)
    zero_grads(dy_net.params)

    return {
        "d_x": d_values["d_x"],
        "d_y": d_values["d_y"],
        "g_adv_x": adv_x.item(),
        "g_adv_y": adv_y.item(),
        "cycle": cyc.item(),
        "g_total": g_value,
    }


# ---------------------------------------------------------------------------
# the epoch loop


@dataclass
class TrainResult:
    run_dir: str
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # one dict per epoch
    checkpoints: list = field(default_factory=list)


def _set_mode(networks, mode):
    for net in networks.values():
        net.set_mode(mode)


def _generate_eval(g_net, dataset, ids, batch_size):
    """Eval-mode generator outputs for the given validation ids."""
    outputs = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        sketch = np.stack([dataset.load_pair(i).sketch.data for i in chunk])
        fake = forward(g_net, ts.Tensor(sketch), mode="eval")
        outputs.extend(fake.data[i] for i in range(len(chunk)))
    return outputs


def _sample_grid(dataset, ids, generated):
    """[sketch | truth | generated] rows as one uint8 image."""
    rows = []
    for pair_id, fake in zip(ids, generated):
        pair = dataset.load_pair(pair_id)
        sketch = denormalize(ts.Tensor(pair.sketch.data))
        if sketch.shape[2] == 1:
            sketch = np.repeat(sketch, 3, axis=2)
        truth = denormalize(ts.Tensor(pair.color.data))
        fake_img = denormalize(ts.Tensor(fake))
        rows.append(np.concatenate([sketch, truth, fake_img], axis=1))
    return np.concatenate(rows, axis=0)


def _write_loss_row(path, epoch, losses, val_l1):
    keys = sorted(losses)
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["epoch", *keys, "val_l1"])
        writer.writerow([epoch, *(repr(losses[k]) for k in keys), repr(val_l1)])


def read_loss_history(path):
    """losses.csv rows as dicts of floats keyed by column."""
    history = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            history.append({k: float(v) for k, v in row.items()})
    return history


def _restore_from_checkpoint(ckpt, cfg, networks, optimizers):
    saved_cfg = ckpt.config
    current = cfg.to_dict()
    differing = {
        k for k in current
        if k != "epochs" and saved_cfg.get(k) != current[k]
    }
    if differing:
        raise ConfigError(
            f"resume config mismatch on {sorted(differing)}; "
            "only 'epochs' may change on resume"
        )

    def tensor_for(key, shape):
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        if ckpt.tensors[key].shape != shape:
            raise CheckpointError(
                f"tensor {key!r} has shape {ckpt.tensors[key].shape}, expected {shape}"
            )
        return ckpt.tensors[key]

    for net_name, net in networks.items():
        for pname, p in net.params.items():
            p.data[...] = tensor_for(f"param/{net_name}/{pname}", p.data.shape)
        for bname, buf in net.buffers.items():
            buf[...] = tensor_for(f"buffer/{net_name}/{bname}", buf.shape)
    for opt_name, state in optimizers.items():
        state.t = int(ckpt.meta["optim"][opt_name]["t"])
        for pname in state.m:
            state.m[pname][...] = tensor_for(f"adam/{opt_name}/m/{pname}", state.m[pname].shape)
            state.v[pname][...] = tensor_for(f"adam/{opt_name}/v/{pname}", state.v[pname].shape)


def train(cfg, dataset, run_dir, resume_from=None, log=None):
    """Run the configured objective over the dataset; returns a TrainResult.

    Artifacts in run_dir: metrics.csv, losses.csv, samples/epoch_<k>.png and
    checkpoints/epoch_<k>.ckpt (cadence plus the final epoch, always).
    """
    say = log or (lambda msg: None)
    val_ids = dataset.ids("val")
    if cfg.sample_size > len(val_ids):
        raise ConfigError(
            f"sample_size {cfg.sample_size} exceeds validation set of {len(val_ids)}"
        )
    sample_ids = val_ids[: cfg.sample_size]

    networks = build_networks(cfg)
    optimizers = build_optimizers(cfg, networks)
    start_epoch = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        _restore_from_checkpoint(ckpt, cfg, networks, optimizers)
        start_epoch = ckpt.epoch + 1
        say(f"resumed from {resume_from} at epoch {ckpt.epoch}")

    os.makedirs(run_dir, exist_ok=True)
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "samples"), exist_ok=True)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    losses_path = os.path.join(run_dir, "losses.csv")

    loss_cfg = cfg.loss_config()
    extractor = FeatureExtractor(seed=cfg.extractor_seed)
    ssim_cfg = SsimConfig()
    references = [to_unit(dataset.load_pair(i).color) for i in sample_ids]

    result = TrainResult(run_dir=run_dir)
    for epoch in range(start_epoch, cfg.epochs + 1):
        _set_mode(networks, "train")
        epoch_losses = {}
        n_batches = 0
        for b_idx, batch in enumerate(
            batches(
                dataset, cfg.batch_size, cfg.seed, epoch, split="train", augmented=cfg.augment
            )
        ):
            step_seed = _derived_seed(cfg.seed, epoch, b_idx)
            try:
                if cfg.objective in ("pix2pix", "pix2pix_tv"):
                    step_losses = pix2pix_step(
                        batch,
                        networks["G"],
                        networks["D"],
                        optimizers["G"],
                        optimizers["D"],
                        loss_cfg,
                        step_seed,
                        d_updates=cfg.d_updates,
                    )
                else:
                    step_losses = cyclegan_step(
                        batch, networks, optimizers, loss_cfg, step_seed, d_updates=cfg.d_updates
                    )
            except TrainingError as exc:
                raise TrainingError(
                    f"epoch {epoch}, batch {b_idx} (ids {batch.ids[:3]}): {exc}"
                ) from exc
            for key, value in step_losses.items():
                epoch_losses[key] = epoch_losses.get(key, 0.0) + value
            n_batches += 1
        mean_losses = {k: v / n_batches for k, v in epoch_losses.items()}

        _set_mode(networks, "eval")
        generated_norm = _generate_eval(networks["G"], dataset, sample_ids, cfg.batch_size)
        generated = [to_unit(g) for g in generated_norm]
        record = evaluate_sample(
            generated,
            references,
            extractor,
            ssim_cfg,
            generated_ids=sample_ids,
            reference_ids=sample_ids,
            epoch=epoch,
        )
        val_l1 = float(
            np.mean(
                [
                    np.mean(np.abs(g - dataset.load_pair(i).color.data))
                    for g, i in zip(generated_norm, sample_ids)
                ]
            )
        )
        append_metric_record(metrics_path, record)
        _write_loss_row(losses_path, epoch, mean_losses, val_l1)
        grid = _sample_grid(dataset, sample_ids[: min(4, len(sample_ids))], generated_norm)
        save_png(grid, os.path.join(run_dir, "samples", f"epoch_{epoch}.png"))

        result.records.append(record)
        result.losses.append({"epoch": epoch, **mean_losses, "val_l1": val_l1})
        say(
            f"epoch {epoch}/{cfg.epochs}: "
            + " ".join(f"{k}={v:.4f}" for k, v in sorted(mean_losses.items()))
            + f" val_l1={val_l1:.4f} fid={record.fid:.3f} ssim={record.ssim_mean:.4f}"
        )

        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            ckpt_path = os.path.join(run_dir, "checkpoints", f"epoch_{epoch:04d}.ckpt")
            save_checkpoint(ckpt_path, cfg.to_dict(), epoch, cfg.seed, networks, optimizers)
            result.checkpoints.append(ckpt_path)

    return result


# ---------------------------------------------------------------------------
# inference


def load_generator(checkpoint_path):
    """Rebuild the sketch->color generator (eval mode) from a checkpoint."""
    ckpt = load_checkpoint(checkpoint_path)
    cfg = TrainConfig.from_dict(ckpt.config)
    networks = build_networks(cfg)
    optimizers = build_optimizers(cfg, networks)
    _restore_from_checkpoint(ckpt, cfg, networks, optimizers)
    g_net = networks["G"]
    g_net.set_mode("eval")
    return g_net, cfg


def infer(checkpoint_path, images):
    """Colorize uint8 HWC sketch images; returns uint8 HWC arrays.

    Inputs go through the training pipeline: resize to the checkpoint's
    image size, optional grayscale collapse, [-1, 1] normalization.
    """
    g_net, cfg = load_generator(checkpoint_path)
    outputs = []
    for img in images:
        arr = np.asarray(img)
        resized = resize(arr, cfg.image_size)
        if cfg.grayscale_sketch and resized.ndim == 3:
            resized = 0.299 * resized[:, :, 0] + 0.587 * resized[:, :, 1] + 0.114 * resized[:, :, 2]
        sketch = normalize(resized)
        if sketch.data.shape[0] != cfg.sketch_channels:
            raise ConfigError(
                f"input has {sketch.data.shape[0]} channels, generator expects "
                f"{cfg.sketch_channels}"
            )
        fake = forward(g_net, ts.Tensor(sketch.data[None]), mode="eval")
        outputs.append(denormalize(ts.Tensor(fake.data[0])))
    return outputs
