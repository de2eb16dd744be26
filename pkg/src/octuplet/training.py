"""Octuplet fine-tuning of a torch feature extractor.

One step: draw a two-per-identity batch, augment every image, degrade the
augmented views into the low-resolution half, embed all ``2B`` images with the
same network in one forward pass, and apply the masked octuplet loss.
"""
import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .batching import build_epoch_batches
from .coremath import DistanceMetric
from .degrade import EVAL_RESOLUTIONS, KERNEL_DESCRIPTION, TRAIN_RESOLUTIONS, ResolutionSampler, degrade_pixels
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_cross_resolution
from .octuplet import TERMS, TermMask
from .torch_loss import octuplet_loss_torch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# feature extractor
# ---------------------------------------------------------------------------

class ToyBackbone(nn.Module):
    """Small conv net mapping 112 x 112 x 3 images to ``d``-dim embeddings.

    Five stride-2 convolutions (112 -> 4), flatten, linear bottleneck and a
    non-affine batch norm that keeps the embedding centred, as in common face
    backbones. An optional linear classification head on the embedding serves
    pre-training.
    """

    def __init__(self, d=128, width=16, n_classes=0):
        super().__init__()
        c = width
        chans = [3, c, 2 * c, 4 * c, 4 * c, 4 * c]
        layers = []
        for i in range(5):
            k = 5 if i == 0 else 3
            layers += [nn.Conv2d(chans[i], chans[i + 1], k, stride=2, padding=k // 2), nn.ReLU()]
        self.features = nn.Sequential(*layers)
        self.embedding = nn.Linear(chans[-1] * 4 * 4, d)
        self.bn = nn.BatchNorm1d(d, affine=False)
        self.head = nn.Linear(d, n_classes) if n_classes else None
        self.d = d
        self.width = width

    def forward(self, x):
        """``x``: ``(n, 112, 112, 3)`` float tensor in ``[0, 1]``."""
        x = (x.permute(0, 3, 1, 2) - 0.5) / 0.25
        return self.bn(self.embedding(self.features(x).flatten(1)))

    def logits(self, x):
        return self.head(self.forward(x))

    @torch.no_grad()
    def embed(self, images, chunk=64):
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        out = []
        for start in range(0, len(images), chunk):
            x = torch.as_tensor(np.asarray(images[start:start + chunk]), dtype=dtype)
            out.append(self.forward(x).double().numpy())
        self.train(was_training)
        return np.concatenate(out)

    def arch(self):
        return {"name": "toy", "d": self.d, "width": self.width,
                "n_classes": self.head.out_features if self.head is not None else 0}


def toy_backbone(d=128, seed=0, width=16, n_classes=0):
    """Seeded :class:`ToyBackbone`; same seed, same initial weights."""
    if d < 2:
        raise ConfigError("embedding dimension must be at least 2")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ToyBackbone(d, width, n_classes)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def embedding_parameters(model):
    """Parameters that take part in the embedding (classification head excluded)."""
    head = set()
    if getattr(model, "head", None) is not None:
        head = {id(p) for p in model.head.parameters()}
    return [p for p in model.parameters() if id(p) not in head]


def pretrain_classifier(model, pool, store, epochs=6, lr=1e-3, batch_size=64, seed=0,
                        labels=None):
    """Softmax pre-training of ``model`` through its classification head.

    Returns the per-epoch mean loss and training accuracy.
    """
    if model.head is None:
        raise ConfigError("pre-training needs a backbone with a classification head")
    labels = labels or {ident: i for i, ident in enumerate(pool.identities)}
    refs = [r for ident in pool.identities for r in pool.images[ident]]
    y_all = np.array([labels[ident] for ident in pool.identities for _ in pool.images[ident]])
    x_all = np.stack([store[r] for r in refs])
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    dtype = next(model.parameters()).dtype
    stats = []
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(refs))
        tot, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x = torch.as_tensor(x_all[idx], dtype=dtype)
            y = torch.as_tensor(y_all[idx])
            logits = model.logits(x)
            loss = nn.functional.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        stats.append({"loss": tot / len(refs), "accuracy": correct / len(refs)})
    model.eval()
    return stats


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def augment(img, rng, flip_prob=0.5, brightness=(0.8, 1.2), saturation=(0.8, 1.2)):
    """Random horizontal flip, brightness and saturation jitter, clamped to [0, 1].

    Brightness multiplies all channels; saturation blends towards the luma
    image. Random numbers are always drawn in the same order, so a seeded
    ``rng`` reproduces the output exactly.
    """
    x = np.asarray(img, dtype=np.float32)
    flip = rng.random() < flip_prob
    b = np.float32(rng.uniform(*brightness))
    s = np.float32(rng.uniform(*saturation))
    if flip:
        x = x[:, ::-1, :]
    x = x * b
    gray = (x @ _LUMA)[..., None]
    x = gray + s * (x - gray)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def hflip(img):
    return np.ascontiguousarray(np.asarray(img)[:, ::-1, :])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerPreset:
    name: str
    optimizer: str
    lr: float
    eps: float
    epochs: int
    decay_epochs: tuple = ()


# No weight decay, momentum or gradient clipping in any preset.
PRESETS = {
    "adagrad-default": OptimizerPreset("adagrad-default", "adagrad", 0.01, 1.0, 6, (2, 4, 5)),
    "sgd-magface": OptimizerPreset("sgd-magface", "sgd", 0.001, 0.0, 1, ()),
    "adamw-transformer": OptimizerPreset("adamw-transformer", "adamw", 0.0005, 1e-8, 1, ()),
}


@dataclass
class FineTuneConfig:
    preset: str = "adagrad-default"
    lr: float = None
    decay_epochs: tuple = None
    epochs: int = None
    batch_size: int = 64
    margin: float = 25.0
    metric: str = "euclidean"
    normalize: bool = False
    mask: str = "hh,hl,lh,ll"
    resolutions: tuple = TRAIN_RESOLUTIONS
    seed: int = 0
    brightness: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)
    flip_prob: float = 0.5
    val_per_epoch: int = 4
    val_resolutions: tuple = EVAL_RESOLUTIONS

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[self.preset]
        if self.lr is None:
            self.lr = p.lr
        if self.decay_epochs is None:
            self.decay_epochs = p.decay_epochs
        if self.epochs is None:
            self.epochs = p.epochs
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.val_resolutions = tuple(int(r) for r in self.val_resolutions)
        self.brightness = tuple(float(v) for v in self.brightness)
        self.saturation = tuple(float(v) for v in self.saturation)
        try:
            self.metric = DistanceMetric.parse(self.metric).value
            self.mask = str(TermMask.parse(self.mask))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ConfigError("batch size must be an even number >= 4")
        if self.margin < 0:
            raise ConfigError("margin must be nonnegative")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay epochs must be strictly increasing")
        if any(not 2 <= r <= 112 for r in self.resolutions):
            raise ConfigError("training resolutions must lie in [2, 112]")

    @property
    def optimizer_preset(self):
        return PRESETS[self.preset]

    @property
    def term_mask(self):
        return TermMask.parse(self.mask)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown fine-tune config keys: {sorted(unknown)}")
        return cls(**data)


def learning_rate(base_lr, epoch, decay_epochs):
    """Rate in (1-based) ``epoch``: divided by 10 after each decay epoch passed."""
    k = sum(1 for e in decay_epochs if epoch > e)
    return base_lr / 10 ** k


def make_optimizer(params, config):
    p = config.optimizer_preset
    if p.optimizer == "adagrad":
        return torch.optim.Adagrad(params, lr=config.lr, eps=p.eps)
    if p.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr)
    if p.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.lr, eps=p.eps, weight_decay=0.0)
    raise ConfigError(f"unknown optimizer {p.optimizer!r}")


def seed_streams(seed):
    """Independent generators for sampler, augmentation, degradation and validation."""
    names = ("sampler", "augment", "degrade", "pairs")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

@dataclass
class TrainingHistory:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    mask: tuple = TERMS

    def add_step(self, **row):
        self.steps.append(row)

    def epoch_mean_loss(self, epoch):
        vals = [r["loss"] for r in self.steps if r["epoch"] == epoch]
        return float(np.mean(vals)) if vals else float("nan")

    def csv_columns(self):
        return ["step", "epoch", "loss"] + [f"loss_{t}" for t in self.mask] + ["lr", "val_accuracy"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_columns())
        for r in self.steps:
            val = r.get("val_accuracy")
            w.writerow([r["step"], r["epoch"], repr(r["loss"])]
                       + [repr(r["terms"][t]) for t in self.mask]
                       + [repr(r["lr"]), "" if val is None else repr(val)])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _assert_finite(loss, terms, model, step, out_dir):
    if math.isfinite(float(loss)):
        return
    state = {"step": step, "loss": float(loss), "terms": {k: float(v) for k, v in terms.items()},
             "nonfinite_params": [n for n, p in model.named_parameters()
                                  if not torch.isfinite(p).all()]}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "nan_dump.json").write_text(json.dumps(state, indent=2))
        torch.save(model.state_dict(), Path(out_dir) / "nan_dump.pt")
    raise NumericError(f"non-finite loss at step {step}: {state}")


def prepare_batch(batch, store, aug_rng, sampler, config):
    """Augment each image, then degrade the augmented view for the LR half."""
    hr = [augment(store[ref], aug_rng, config.flip_prob, config.brightness, config.saturation)
          for ref in batch.refs]
    res = sampler.draw(len(hr))
    lr = [degrade_pixels(img, r) for img, r in zip(hr, res)]
    return np.stack(hr), np.stack(lr), res


def train_step(model, optimizer, hr, lr, labels, config):
    """One optimizer step on a prepared paired batch; returns (loss, terms)."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.concatenate([hr, lr]), dtype=dtype)
    emb = model(x)
    B = len(hr)
    total, terms = octuplet_loss_torch(emb[:B], emb[B:], labels, config.metric, config.margin,
                                       config.normalize, config.term_mask)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return total.detach(), {k: v.detach() for k, v in terms.items()}


def save_checkpoint(path, model, config, extra=None):
    payload = {"state_dict": model.state_dict(), "arch": model.arch(),
               "config": config.to_dict(), "seeds": seed_streams(config.seed),
               "degradation_kernel": KERNEL_DESCRIPTION}
    payload.update(extra or {})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload or "arch" not in payload:
        raise DataError(f"{path} is not a checkpoint written by this package")
    arch = payload["arch"]
    model = ToyBackbone(arch["d"], arch["width"], arch.get("n_classes", 0))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def fine_tune(model, pool, store, config, valid_protocol=None, valid_store=None, out_dir=None):
    """Fine-tune ``model`` in place with the octuplet loss.

    Parameters
    ----------
    model : ToyBackbone or compatible module
        Any module with ``forward`` on ``(n, 112, 112, 3)`` tensors and ``embed``.
    pool : IdentityPool
        Training images grouped by identity.
    store : mapping
        Reference to pixels.
    config : FineTuneConfig
    valid_protocol : PairProtocol, optional
        Cross-resolution validation, ``config.val_per_epoch`` times per epoch.
    out_dir : path, optional
        Receives ``last.pt``, ``best.pt`` and ``history.csv``.

    Returns
    -------
    (model, TrainingHistory)
    """
    seeds = seed_streams(config.seed)
    aug_rng = np.random.default_rng(seeds["augment"])
    sampler = ResolutionSampler(config.resolutions, seeds["degrade"])
    params = embedding_parameters(model)
    optimizer = make_optimizer(params, config)
    history = TrainingHistory(mask=config.term_mask.terms)
    valid_store = valid_store if valid_store is not None else store
    best = -1.0
    step = 0
    model.train()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr_now = learning_rate(config.lr, epoch, config.decay_epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr_now
        batches = build_epoch_batches(pool, config.batch_size, seed=[seeds["sampler"], epoch])
        n = len(batches)
        val_at = set()
        if valid_protocol is not None and config.val_per_epoch > 0 and n:
            val_at = {max(1, round(n * (i + 1) / config.val_per_epoch)) for i in range(config.val_per_epoch)}
        for i, batch in enumerate(batches, start=1):
            step += 1
            hr, lr, _ = prepare_batch(batch, store, aug_rng, sampler, config)
            loss, terms = train_step(model, optimizer, hr, lr, batch.labels, config)
            _assert_finite(loss, terms, model, step, out_dir)
            row = {"step": step, "epoch": epoch, "loss": float(loss),
                   "terms": {t: float(terms[t]) for t in history.mask}, "lr": lr_now}
            if i in val_at:
                report = evaluate_cross_resolution(model, valid_protocol, valid_store,
                                                   config.val_resolutions)
                acc = float(np.mean([r["accuracy"] for r in report.rows]))
                row["val_accuracy"] = acc
                model.train()
                if out_dir is not None and acc > best:
                    best = acc
                    save_checkpoint(Path(out_dir) / "best.pt", model, config,
                                    {"step": step, "val_accuracy": acc})
            history.add_step(**row)
        history.epochs.append({"epoch": epoch, "mean_loss": history.epoch_mean_loss(epoch),
                               "seconds": time.perf_counter() - t0, "batches": n})
        log.info("epoch %d: mean loss %.4f over %d batches", epoch,
                 history.epochs[-1]["mean_loss"], n)
    model.eval()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "last.pt", model, config, {"step": step})
        history.write_csv(Path(out_dir) / "history.csv")
    return model, history
