"""Desk-scale cross-resolution experiment on procedural faces.

Pipeline: render a training and a disjoint evaluation set, pre-train the toy
backbone as a classifier on full-resolution images only, evaluate
cross-resolution verification, fine-tune with the octuplet loss, evaluate
again. The ablation grid repeats the fine-tune/evaluate cycle from the same
pre-trained weights for every term mask.
"""
import copy
import csv
import dataclasses
import io
import logging
from dataclasses import dataclass

import torch

from .evaluation import EmbeddingCache, evaluate_cross_resolution, generate_pairs
from .octuplet import ABLATION_MASKS, TERMS, TermMask
from .synthetic import make_dataset
from .training import FineTuneConfig, fine_tune, pretrain_classifier, toy_backbone

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    train_identities: int = 300
    train_images: int = 6
    eval_identities: int = 40
    eval_images: int = 10
    genuine: int = 900
    imposter: int = 900
    folds: int = 10
    embedding_dim: int = 64
    width: int = 16
    pretrain_epochs: int = 15
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 64
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


def desk_finetune_config(seed=0, **overrides):
    """Two AdaGrad epochs at m = 25, euclidean, no normalisation, B = 32."""
    kw = dict(preset="adagrad-default", epochs=2, batch_size=32, margin=25.0,
              metric="euclidean", normalize=False, seed=seed, val_per_epoch=0)
    kw.update(overrides)
    return FineTuneConfig(**kw)


@dataclass
class DeskData:
    pool: object
    store: object
    eval_pool: object
    eval_store: object
    protocol: object


def make_desk_data(cfg):
    """Training set, disjoint evaluation set and its pair protocol, all from ``cfg.seed``."""
    pool, store = make_dataset(cfg.train_identities, cfg.train_images, seed=[cfg.seed, 0], prefix="tr")
    epool, estore = make_dataset(cfg.eval_identities, cfg.eval_images, seed=[cfg.seed, 1], prefix="ev")
    protocol = generate_pairs(epool, cfg.genuine, cfg.imposter, cfg.folds, seed=cfg.seed,
                              name=f"desk-eval-{cfg.seed}")
    return DeskData(pool, store, epool, estore, protocol)


def pretrained_backbone(cfg, data):
    model = toy_backbone(cfg.embedding_dim, seed=cfg.seed, width=cfg.width,
                         n_classes=len(data.pool.identities))
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        stats = pretrain_classifier(model, data.pool, data.store, epochs=cfg.pretrain_epochs,
                                    lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch, seed=cfg.seed)
    finally:
        torch.random.set_rng_state(gen_state)
    log.info("pre-training: final loss %.4f, accuracy %.4f", stats[-1]["loss"], stats[-1]["accuracy"])
    return model, stats


def _evaluate(model, data, resolutions):
    cache = EmbeddingCache(model, data.eval_store, data.protocol.refs).check()
    return evaluate_cross_resolution(model, data.protocol, data.eval_store, resolutions, cache=cache)


@dataclass
class CellResult:
    mask: str
    before: object
    after: object
    history: object

    def gain(self, r):
        return self.after.accuracy(r) - self.before.accuracy(r)


def run_cell(base_model, data, ft_config, resolutions=(7, 112), before=None):
    """Fine-tune a copy of ``base_model`` and evaluate it before and after."""
    if before is None:
        before = _evaluate(base_model, data, resolutions)
    model = copy.deepcopy(base_model)
    model, history = fine_tune(model, data.pool, data.store, ft_config)
    after = _evaluate(model, data, resolutions)
    return CellResult(ft_config.mask, before, after, history)


def run_desk_experiment(seed=0, resolutions=(7, 112), desk=None, **ft_overrides):
    """Criterion-style run: pre-train, evaluate, fine-tune with the full mask, evaluate."""
    desk = desk or DeskConfig(seed=seed)
    data = make_desk_data(desk)
    model, _ = pretrained_backbone(desk, data)
    cell = run_cell(model, data, desk_finetune_config(seed, **ft_overrides), resolutions)
    return cell, model, data


def run_ablation(seed=0, masks=ABLATION_MASKS, resolutions=(7, 112), desk=None, model=None,
                 data=None, **ft_overrides):
    """One fine-tune/evaluate cycle per term mask from shared pre-trained weights."""
    desk = desk or DeskConfig(seed=seed)
    if data is None:
        data = make_desk_data(desk)
    if model is None:
        model, _ = pretrained_backbone(desk, data)
    before = _evaluate(model, data, resolutions)
    cells = []
    for mask in masks:
        cfg = desk_finetune_config(seed, mask=str(TermMask.parse(mask)), **ft_overrides)
        log.info("ablation cell %s", cfg.mask)
        cells.append(run_cell(model, data, cfg, resolutions, before=before))
    return cells


def comparison_table(cells, resolutions=(7, 112)):
    """Rows of mask flags, accuracy after fine-tuning and change per resolution."""
    rows = []
    for c in cells:
        mask = TermMask.parse(c.mask)
        row = {t: int(getattr(mask, t)) for t in TERMS}
        for r in resolutions:
            row[f"acc_{r}"] = c.after.accuracy(r)
            row[f"delta_{r}"] = c.gain(r)
        rows.append(row)
    return rows


def table_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()
