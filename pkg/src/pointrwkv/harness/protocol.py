"""Paired pretrained-versus-scratch classification runs over several seeds."""

from __future__ import annotations

import logging
import statistics
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import RunConfig, cls_defaults, paired_pretrain_config
from .train import make_dataset, prepare_inputs, pretrain, train_cls

log = logging.getLogger(__name__)


@dataclass
class PairedOutcome:
    seed: int
    pretrain_losses: list[float]
    epochs_scratch: int | None
    epochs_pretrained: int | None


@dataclass
class PairedReport:
    threshold: float
    outcomes: list[PairedOutcome] = field(default_factory=list)

    @staticmethod
    def _median(values: list[int | None], cap: int) -> float:
        # a run that never reaches the threshold counts as one epoch past the cap
        return statistics.median(cap + 1 if v is None else v for v in values)

    def medians(self, cap: int) -> tuple[float, float]:
        return (
            self._median([o.epochs_scratch for o in self.outcomes], cap),
            self._median([o.epochs_pretrained for o in self.outcomes], cap),
        )


def moving_average(values: list[float], window: int = 5) -> list[float]:
    return [sum(values[i : i + window]) / window for i in range(len(values) - window + 1)]


def paired_runs(
    seeds: list[int],
    cls_cfg: RunConfig | None = None,
    pre_cfg: RunConfig | None = None,
    threshold: float = 0.9,
    workdir: str | Path | None = None,
) -> PairedReport:
    """For each seed: pretrain, then train from that checkpoint and from scratch until ``threshold``."""
    cls_cfg = cls_cfg if cls_cfg is not None else cls_defaults()
    cls_cfg = replace(cls_cfg, train=replace(cls_cfg.train, stop_at_acc=threshold))
    pre_cfg = pre_cfg if pre_cfg is not None else paired_pretrain_config(cls_cfg)
    data = make_dataset(cls_cfg)
    inputs = prepare_inputs(data, cls_cfg.model)
    corpus = make_dataset(pre_cfg)
    corpus_inputs = prepare_inputs(corpus, pre_cfg.model)
    report = PairedReport(threshold)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(workdir) if workdir is not None else Path(tmp)
        for seed in seeds:
            pre = pretrain(pre_cfg, corpus, seed=seed, out=root / f"pretrain_{seed}", inputs=corpus_inputs)
            warm = train_cls(cls_cfg, data, init_checkpoint=pre.checkpoint, seed=seed, inputs=inputs)
            cold = train_cls(cls_cfg, data, seed=seed, inputs=inputs)
            outcome = PairedOutcome(seed, pre.losses, cold.epochs_to_target, warm.epochs_to_target)
            log.info("seed %d: scratch %s, pretrained %s", seed, outcome.epochs_scratch, outcome.epochs_pretrained)
            report.outcomes.append(outcome)
    return report
