"""Training loop, batched prediction and dataset evaluation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import DataError, Sample, SynthConfig, generate_synthetic, load_dataset, stack
from .losses import batch_loss
from .metrics import cc, nss
from .model import DilationRates, DimVariant, ModelGraph, build_model
from .optim import AdamState, adam_step, step_decay

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "lr", "train_loss", "val_loss", "val_cc", "val_nss")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: ModelGraph
    log_rows: list[dict]
    train_ids: list[str]
    val_ids: list[str]

    def log_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in self.log_rows:
            w.writerow([row["epoch"], f"{row['lr']:.3e}"] + [f"{row[k]:.6f}" for k in LOG_HEADER[2:]])
        return buf.getvalue()


def synth_config(cfg: RunConfig) -> SynthConfig:
    lo, hi = (int(v) for v in cfg.synth_blobs.split(","))
    return SynthConfig(
        image_size=(cfg.synth_size, cfg.synth_size),
        n_blobs=(lo, hi),
        blob_sigma=cfg.synth_blob_sigma,
        fixations_per_blob=cfg.synth_fixations_per_blob,
        center_bias_weight=cfg.synth_center_bias,
        popout=cfg.synth_popout,
        distractor_fixation_ratio=cfg.synth_distractor_ratio,
        seed=cfg.seed,
    )


def resolve_samples(cfg: RunConfig) -> list[Sample]:
    if cfg.data_dir:
        samples = load_dataset(cfg.data_dir)
        if not samples:
            raise DataError(f"{cfg.data_dir}: no samples found")
        return samples
    return generate_synthetic(synth_config(cfg), cfg.synth_samples)


def split(samples: list[Sample], val_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    order = np.random.default_rng([seed, 1]).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def model_for(cfg: RunConfig) -> ModelGraph:
    return build_model(
        DimVariant(cfg.variant, cfg.fusion),
        DilationRates.parse(cfg.rates),
        backbone_channels=cfg.backbone_channels,
        branch_channels=cfg.branch_channels,
        decoder_layers=cfg.decoder_layers,
        decoder_width=cfg.decoder_width,
        output_stride=cfg.output_stride,
        widths=tuple(int(v) for v in cfg.widths.split(",")),
        aux_linear_decoder=cfg.aux_linear_decoder,
        seed=cfg.seed,
        dtype=np.dtype(cfg.dtype),
    )


def predict_maps(model: ModelGraph, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """N x 3 x H x W images -> N x H x W saliency maps (float64)."""
    out = []
    dtype = model.dtype
    for i in range(0, len(images), batch_size):
        out.append(model(images[i: i + batch_size].astype(dtype)).data[:, 0].astype(np.float64))
    return np.concatenate(out)


def validation_scores(model: ModelGraph, samples: list[Sample], cfg: RunConfig) -> tuple[float, float, float]:
    if not samples:
        return float("nan"), float("nan"), float("nan")
    images, dens, fix = stack(samples)
    pred = predict_maps(model, images, cfg.batch_size)
    loss, _ = batch_loss(pred[:, None], dens, cfg.loss, cfg.norm)
    ccs, nsss = [], []
    for p, g, q in zip(pred, dens[:, 0], fix[:, 0]):
        ccs.append(cc(p, g) if p.std() > 0 else 0.0)
        nsss.append(nss(p, q))
    return loss, float(np.mean(ccs)), float(np.mean(nsss))


def train(cfg: RunConfig, samples: list[Sample] | None = None, on_epoch=None) -> TrainResult:
    """Adam training with step-decayed learning rate; deterministic for a fixed seed."""
    if samples is None:
        samples = resolve_samples(cfg)
    train_set, val_set = split(samples, cfg.val_fraction, cfg.seed)
    if not train_set:
        raise DataError("training split is empty")
    model = model_for(cfg)
    dtype = np.dtype(cfg.dtype)
    params = model.parameters()
    state = AdamState()
    images, dens, _ = stack(train_set, dtype)
    rng = np.random.default_rng([cfg.seed, 2])
    rows = []
    for epoch in range(cfg.epochs):
        lr = step_decay(cfg.lr, epoch, cfg.lr_decay_factor, cfg.lr_decay_every_epochs)
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start: start + cfg.batch_size]
            x, g = images[idx], dens[idx]
            out = model.forward(x, with_aux=True)
            main, aux = out if isinstance(out, tuple) else (out, None)
            loss, grad = batch_loss(main.data, g, cfg.loss, cfg.norm)
            if aux is not None:
                aux_sig = T.sigmoid(aux)
                aux_loss, aux_grad = batch_loss(aux_sig.data, g, cfg.loss, cfg.norm)
                loss += aux_loss
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            main.backward(grad.astype(dtype))
            if aux is not None:
                aux_sig.backward(aux_grad.astype(dtype))
            grads = {}
            for name, t in params.items():
                grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
                t.grad = None
            try:
                adam_step({k: t.data for k, t in params.items()}, grads, state, lr,
                          (cfg.beta1, cfg.beta2), cfg.adam_eps)
            except FloatingPointError as exc:
                raise NumericalError(f"{exc} at epoch {epoch + 1}, batch {b}") from None
            losses.append(loss)
        val_loss, val_cc, val_nss = validation_scores(model, val_set, cfg)
        row = dict(epoch=epoch + 1, lr=lr, train_loss=float(np.mean(losses)),
                   val_loss=val_loss, val_cc=val_cc, val_nss=val_nss)
        rows.append(row)
        log.info("epoch %d lr %.1e train %.4f val %.4f cc %.3f nss %.3f", epoch + 1, lr,
                 row["train_loss"], val_loss, val_cc, val_nss)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(model, rows, [s.id for s in train_set], [s.id for s in val_set])
