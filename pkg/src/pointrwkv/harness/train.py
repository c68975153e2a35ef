"""Desk-scale masked-reconstruction pretraining and classification training."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..model import Batch, ModelConfig, PointRWKV, collate, make_pyramid, prepare_batch
from ..numerics import Tensor, backward, first_nonfinite, load_module, no_grad, ops, precision, save_module
from ..pointops import ScalePyramid, apply_multiscale_mask
from .config import RunConfig
from .data import SyntheticDataset
from .optim import AdamW, cosine_lr


log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def make_dataset(cfg: RunConfig) -> SyntheticDataset:
    d = cfg.data
    return SyntheticDataset(
        classes=d.classes, n_points=d.n_points, per_class_train=d.per_class_train,
        per_class_test=d.per_class_test, jitter=d.jitter, seed=d.seed,
    )


@dataclass
class SampleInputs:
    """Unmasked pyramid and single-sample encoder inputs of one cloud."""

    pyramid: ScalePyramid
    batch: Batch


def prepare_inputs(dataset: SyntheticDataset, cfg: ModelConfig) -> dict[int, SampleInputs]:
    """Geometry for every cloud of ``dataset``; reusable across runs sharing ``cfg``'s geometry."""
    out = {}
    for i, cloud in enumerate(dataset.clouds):
        pyr = make_pyramid(cloud, cfg)
        out[i] = SampleInputs(pyr, prepare_batch([pyr], cfg))
    return out


def _draw_augmentation(rng: np.random.Generator, cfg: RunConfig) -> tuple[float, np.ndarray]:
    lo, hi = cfg.train.scale_range
    return float(rng.uniform(lo, hi)), rng.uniform(-cfg.train.translate, cfg.train.translate, size=3)


def _check_finite(loss: Tensor, where: str) -> None:
    if np.all(np.isfinite(loss.data)):
        return
    bad = first_nonfinite(loss)
    desc = "unknown" if bad is None else f"op={bad.op or 'leaf'} name={bad.name} shape={bad.shape}"
    raise TrainingError(f"non-finite loss at {where}; first non-finite tensor: {desc}")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_meta(path: Path, meta: dict) -> None:
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


@dataclass
class PretrainResult:
    losses: list[float]
    checkpoint: Path | None
    model: PointRWKV


def pretrain(
    cfg: RunConfig,
    dataset: SyntheticDataset | None = None,
    seed: int = 0,
    out: str | Path | None = None,
    inputs: dict[int, SampleInputs] | None = None,
) -> PretrainResult:
    """Masked point reconstruction over the training split; one Chamfer loss row per epoch.

    Visible counts differ between masked samples, so each sample runs its own
    forward pass and gradients accumulate over a minibatch.
    """
    dataset = dataset if dataset is not None else make_dataset(cfg)
    mc, tc = cfg.model, cfg.train
    out = Path(out) if out is not None else None
    rng = np.random.default_rng(seed)
    with precision(tc.precision):
        model = PointRWKV(mc, seed=seed)
        opt = AdamW(model.parameters(), tc.lr, tc.betas, tc.eps, tc.weight_decay)
        train_idx = dataset.indices(train=True)
        inputs = inputs if inputs is not None else prepare_inputs(dataset, mc)
        steps_per_epoch = math.ceil(len(train_idx) / tc.batch_size)
        total = steps_per_epoch * tc.epochs
        warmup = int(round(tc.warmup_epochs * steps_per_epoch))
        losses: list[float] = []
        step = 0
        for epoch in range(tc.epochs):
            order = train_idx if tc.fixed_batches else rng.permutation(train_idx)
            epoch_loss = 0.0
            for lo in range(0, len(order), tc.batch_size):
                chunk = order[lo : lo + tc.batch_size]
                opt.lr = cosine_lr(step, total, tc.lr, warmup, min(tc.min_lr, tc.lr))
                opt.zero_grad()
                for i in chunk:
                    fresh = not tc.fixed_batches
                    mask_seed = int(rng.integers(2**31)) if fresh else int(i)
                    batch = prepare_batch([apply_multiscale_mask(inputs[i].pyramid, mc.mask_ratio, mask_seed)], mc)
                    if fresh and tc.augment:
                        a, d = _draw_augmentation(rng, cfg)
                        batch = collate([batch], [a], [d])
                    loss = model.reconstruction_loss(batch)
                    _check_finite(loss, f"epoch {epoch + 1} sample {int(i)}")
                    backward(loss / len(chunk))
                    epoch_loss += float(loss.item())
                opt.step()
                step += 1
            losses.append(epoch_loss / len(order))
            log.info("pretrain epoch %d loss %.6f", epoch + 1, losses[-1])
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "loss.csv", ["epoch", "loss"], [[e + 1, repr(v)] for e, v in enumerate(losses)])
        ckpt = out / "model.ckpt"
        save_module(ckpt, model)
        _write_meta(out / "run.json", {
            "command": "pretrain", "seed": seed, "mask_ratio": mc.mask_ratio,
            "epochs": tc.epochs, "config": cfg.as_dict(),
        })
    return PretrainResult(losses, ckpt, model)


@dataclass
class ClsResult:
    train_acc: list[float]
    test_acc: list[float]
    epochs_to_target: int | None  # epoch whose train accuracy first reached ``stop_at_acc``
    model: PointRWKV


def evaluate(model: PointRWKV, dataset: SyntheticDataset, train: bool = False, batch_size: int = 64,
             prepared: list | None = None) -> float:
    """Overall accuracy on a split, unaugmented and unmasked."""
    idx = dataset.indices(train=train)
    if len(idx) == 0:
        return float("nan")
    mc = model.cfg
    if prepared is None:
        prepared = [prepare_batch([make_pyramid(dataset.clouds[i], mc) for i in idx[lo : lo + batch_size]], mc)
                    for lo in range(0, len(idx), batch_size)]
    return _accuracy(model, dataset, idx, prepared)


def train_cls(
    cfg: RunConfig,
    dataset: SyntheticDataset | None = None,
    init_checkpoint: str | Path | None = None,
    seed: int = 0,
    out: str | Path | None = None,
    inputs: dict[int, SampleInputs] | None = None,
) -> ClsResult:
    """Cross-entropy training.

    After every epoch both splits are scored in a clean pass (no augmentation);
    the running accuracy over augmented minibatches goes to the run metadata.
    """
    dataset = dataset if dataset is not None else make_dataset(cfg)
    mc, tc = cfg.model, cfg.train
    if mc.num_classes != dataset.num_classes:
        mc = replace(mc, num_classes=dataset.num_classes)
    out = Path(out) if out is not None else None
    rng = np.random.default_rng(seed)
    with precision(tc.precision):
        model = PointRWKV(mc, seed=seed)
        if init_checkpoint is not None:
            load_module(init_checkpoint, model.encoder, strict=True, prefix="encoder.")
        params = model.parameters()
        if tc.freeze_encoder:
            frozen = {id(p) for p in model.encoder.parameters()}
            params = [p for p in params if id(p) not in frozen]
        opt = AdamW(params, tc.lr, tc.betas, tc.eps, tc.weight_decay)
        train_idx = dataset.indices(train=True)
        test_idx = dataset.indices(train=False)
        # augmentation rescales the cached stage inputs without rebuilding graphs
        inputs = inputs if inputs is not None else prepare_inputs(dataset, mc)
        singles = {i: inputs[i].batch for i in np.r_[train_idx, test_idx]}

        def eval_batches(idx):
            return [collate([singles[i] for i in idx[lo : lo + tc.eval_batch]]) for lo in range(0, len(idx), tc.eval_batch)]

        train_batches, test_batches = eval_batches(train_idx), eval_batches(test_idx)
        steps_per_epoch = math.ceil(len(train_idx) / tc.batch_size)
        total = steps_per_epoch * tc.epochs
        warmup = int(round(tc.warmup_epochs * steps_per_epoch))
        train_acc: list[float] = []
        test_acc: list[float] = []
        running: list[float] = []
        hit = None
        step = 0
        for epoch in range(tc.epochs):
            order = train_idx if tc.fixed_batches else rng.permutation(train_idx)
            correct = 0
            for b, lo in enumerate(range(0, len(order), tc.batch_size)):
                chunk = order[lo : lo + tc.batch_size]
                if tc.augment and not tc.fixed_batches:
                    draws = [_draw_augmentation(rng, cfg) for _ in chunk]
                    batch = collate([singles[i] for i in chunk], [a for a, _ in draws], [d for _, d in draws])
                else:
                    batch = collate([singles[i] for i in chunk])
                labels = dataset.labels[chunk]
                opt.lr = cosine_lr(step, total, tc.lr, warmup, min(tc.min_lr, tc.lr))
                opt.zero_grad()
                logits = model.logits(batch)
                loss = ops.cross_entropy(logits, labels)
                _check_finite(loss, f"epoch {epoch + 1} step {b + 1}")
                backward(loss)
                opt.step()
                step += 1
                correct += int(np.sum(np.argmax(logits.data, axis=-1) == labels))
            running.append(correct / len(order))
            train_acc.append(_accuracy(model, dataset, train_idx, train_batches))
            test_acc.append(_accuracy(model, dataset, test_idx, test_batches))
            log.info("cls epoch %d train_acc %.4f test_acc %.4f", epoch + 1, train_acc[-1], test_acc[-1])
            if tc.stop_at_acc > 0 and train_acc[-1] >= tc.stop_at_acc:
                hit = epoch + 1
                break
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "acc.csv", ["epoch", "train_acc", "test_acc"],
                   [[e + 1, repr(a), repr(t)] for e, (a, t) in enumerate(zip(train_acc, test_acc))])
        save_module(out / "model.ckpt", model)
        _write_meta(out / "run.json", {
            "command": "train-cls", "seed": seed, "epochs": tc.epochs, "epochs_run": len(train_acc),
            "epochs_to_target": hit, "running_train_acc": running, "init_checkpoint": None if init_checkpoint is None else str(init_checkpoint),
            "config": cfg.as_dict(),
        })
    return ClsResult(train_acc, test_acc, hit, model)


def _accuracy(model: PointRWKV, dataset: SyntheticDataset, idx: np.ndarray, batches: list) -> float:
    if len(idx) == 0:
        return float("nan")
    correct = 0
    pos = 0
    with no_grad():
        for batch in batches:
            pred = np.argmax(model.logits(batch).data, axis=-1)
            correct += int(np.sum(pred == dataset.labels[idx[pos : pos + batch.size]]))
            pos += batch.size
    return correct / len(idx)
