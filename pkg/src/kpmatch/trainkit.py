"""Synthetic identities, pair sampling, augmentation and the training loop.

Every random draw comes from ``np.random.default_rng([seed, stream, ...])``
with a fixed stream number per purpose, so data, sampling, augmentation,
initialisation and the update order are all reproducible from one seed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .checkpoint import checkpoint_save
from .config import RunConfig, dump_config
from .errors import (
    DimensionError, EvaluationError, FormatError, ParameterError, SamplingError, TrainingError,
)
from .model import INPUT_SHAPE, ModelConfig, PairVerdict, forward_batch, init_params, loss_and_grads
from .nn import Layers, ParamSet
from .pnm import read_image, write_ppm
from .tensor import Tensor

# rng stream ids
STREAM_SYNTH, STREAM_INIT, STREAM_VAL, STREAM_TRAIN = 1, 2, 3, 4

MANIFEST = "manifest.txt"
BACKGROUND = 0.5
NOISE_STD = 0.1
MAX_SHIFT = (INPUT_SHAPE[1] // 4, INPUT_SHAPE[2] // 4)  # 25% of height and width

# identity figure: full-height stack of bands plus an accent block.  It
# covers most of the frame, so shifts of up to 25% crop it at the border and
# change how much of each band is visible.
FIGURE_SIZE = (48, 24)
BAND_COUNT = 3
MIN_BAND = 12
ACCENT_SIZE = (4, 8)


# ----------------------------------------------------------------------------
# synthetic identities

@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SynthIdentity:
    id: int
    rects: tuple[Rect, ...]


def _random_identity(ident: int, rng: np.random.Generator) -> SynthIdentity:
    h, w = FIGURE_SIZE
    top0, left0 = (INPUT_SHAPE[1] - h) // 2, (INPUT_SHAPE[2] - w) // 2
    spare = h - BAND_COUNT * MIN_BAND
    cuts = np.sort(rng.integers(0, spare + 1, size=BAND_COUNT - 1))
    heights = np.diff(np.concatenate([[0], cuts, [spare]])) + MIN_BAND
    rects, top = [], top0
    for bh in heights:
        rects.append(Rect(top, left0, int(bh), w, tuple(rng.uniform(0.0, 1.0, 3).round(3))))
        top += int(bh)
    ah, aw = (int(v) for v in rng.integers(ACCENT_SIZE[0], ACCENT_SIZE[1] + 1, size=2))
    rects.append(Rect(top0 + int(rng.integers(0, h - ah + 1)), left0 + int(rng.integers(0, w - aw + 1)),
                      ah, aw, tuple(rng.uniform(0.0, 1.0, 3).round(3))))
    return SynthIdentity(ident, tuple(rects))


def make_identities(num_ids: int, rng: np.random.Generator) -> list[SynthIdentity]:
    out, seen = [], set()
    while len(out) < num_ids:
        ident = _random_identity(len(out), rng)
        if ident.rects not in seen:
            seen.add(ident.rects)
            out.append(ident)
    return out


def render(ident: SynthIdentity, shift: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    c, h, w = INPUT_SHAPE
    img = np.clip(BACKGROUND + NOISE_STD * rng.normal(size=(c, h, w)), 0.0, 1.0)
    dy, dx = shift
    for r in ident.rects:
        t, l = r.top + dy, r.left + dx
        t0, l0 = max(t, 0), max(l, 0)
        t1, l1 = min(t + r.height, h), min(l + r.width, w)
        if t1 > t0 and l1 > l0:
            img[:, t0:t1, l0:l1] = np.asarray(r.color)[:, None, None]
    return img


@dataclass
class Dataset:
    root: Path
    paths: list[str]
    ids: np.ndarray
    sample_index: np.ndarray
    _images: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.paths)

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        paths, ids, idx = [], [], []
        with open(root / MANIFEST) as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 3:
                    raise FormatError(f"{root / MANIFEST}:{lineno}: expected '<path> <id> <index>'")
                paths.append(parts[0])
                ids.append(int(parts[1]))
                idx.append(int(parts[2]))
        return cls(root, paths, np.array(ids, dtype=np.int64), np.array(idx, dtype=np.int64))

    def images(self) -> np.ndarray:
        """All images as an ``N×3×64×32`` array (read once, then cached)."""
        if self._images is None:
            imgs = np.empty((len(self), *INPUT_SHAPE))
            for k, rel in enumerate(self.paths):
                img = read_image(self.root / rel)
                if img.shape != INPUT_SHAPE:
                    raise DimensionError(f"{rel}: expected {INPUT_SHAPE}, got {img.shape}")
                imgs[k] = img
            self._images = imgs
        return self._images

    def identities(self) -> np.ndarray:
        return np.unique(self.ids)


def synth_dataset(num_ids: int, samples_per_id: int, seed: int, out) -> Dataset:
    """Render ``num_ids × samples_per_id`` images and a manifest under ``out``."""
    if num_ids < 2 or samples_per_id < 1:
        raise ParameterError("need at least 2 identities and 1 sample per identity")
    rng = np.random.default_rng([seed, STREAM_SYNTH])
    idents = make_identities(num_ids, rng)
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for ident in idents:
        for s in range(samples_per_id):
            shift = (int(rng.integers(-MAX_SHIFT[0], MAX_SHIFT[0] + 1)),
                     int(rng.integers(-MAX_SHIFT[1], MAX_SHIFT[1] + 1)))
            rel = f"images/id{ident.id:04d}_s{s:02d}.ppm"
            write_ppm(out / rel, render(ident, shift, rng))
            lines.append(f"{rel} {ident.id} {s}\n")
    (out / MANIFEST).write_text("".join(lines))
    return Dataset.load(out)


# ----------------------------------------------------------------------------
# pairs

@dataclass
class PairBatch:
    a_index: np.ndarray
    b_index: np.ndarray
    labels: np.ndarray
    ratio: tuple[int, int]

    def __len__(self):
        return len(self.labels)

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())


def split_counts(batch_size: int, ratio: tuple[int, int]) -> tuple[int, int]:
    pos, neg = ratio
    n_pos = int(math.floor(batch_size * pos / (pos + neg) + 0.5))
    return n_pos, batch_size - n_pos


def sample_pairs(ids: np.ndarray, ratio: tuple[int, int] = (1, 3), batch_size: int = 16,
                 rng: np.random.Generator | None = None, pool: np.ndarray | None = None) -> PairBatch:
    """Draw a batch of labelled pairs of sample indices.

    ``ids`` holds the identity of every sample; ``pool`` optionally limits
    sampling to a subset of sample indices.
    """
    rng = rng if rng is not None else np.random.default_rng()
    pool = np.arange(len(ids)) if pool is None else np.asarray(pool)
    by_id: dict[int, np.ndarray] = {}
    for i in pool:
        by_id.setdefault(int(ids[i]), []).append(int(i))
    by_id = {k: np.array(v) for k, v in sorted(by_id.items())}
    n_pos, n_neg = split_counts(batch_size, ratio)
    multi = [k for k, v in by_id.items() if len(v) >= 2]
    if n_pos and not multi:
        raise SamplingError("positive pairs need an identity with at least two samples")
    if n_neg and len(by_id) < 2:
        raise SamplingError("negative pairs need at least two identities")
    keys = np.array(sorted(by_id))
    a, b = [], []
    for _ in range(n_pos):
        members = by_id[multi[rng.integers(len(multi))]]
        i, j = rng.choice(len(members), size=2, replace=False)
        a.append(members[i])
        b.append(members[j])
    for _ in range(n_neg):
        p, q = rng.choice(len(keys), size=2, replace=False)
        a.append(rng.choice(by_id[keys[p]]))
        b.append(rng.choice(by_id[keys[q]]))
    labels = np.array([1.0] * n_pos + [0.0] * n_neg)
    return PairBatch(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64), labels, tuple(ratio))


def split_identities(ids: np.ndarray, val_ids: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample indices of the training identities and of the last ``val_ids`` identities."""
    uniq = np.unique(ids)
    if val_ids >= len(uniq):
        raise SamplingError(f"cannot hold out {val_ids} of {len(uniq)} identities")
    held = set(uniq[len(uniq) - val_ids:].tolist())
    mask = np.array([int(i) in held for i in ids], dtype=bool)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def balanced_pairs(ids: np.ndarray, pool: np.ndarray, count: int, rng: np.random.Generator) -> PairBatch:
    """A 1:1 positive/negative pair set drawn from ``pool``."""
    return sample_pairs(ids, (1, 1), count, rng, pool)


# ----------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    erase_attempts: int = 10


def random_erase(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    c, h, w = img.shape
    for _ in range(cfg.erase_attempts):
        area = rng.uniform(*cfg.erase_area) * h * w
        aspect = rng.uniform(*cfg.erase_aspect)
        eh, ew = int(round(math.sqrt(area * aspect))), int(round(math.sqrt(area / aspect)))
        if 1 <= eh < h and 1 <= ew < w:
            top, left = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
            out = img.copy()
            out[:, top:top + eh, left:left + ew] = rng.uniform(0.0, 1.0, size=(c, eh, ew))
            return out
    return img


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random horizontal flip, then random erasing.  Output stays in ``[0, 1]``."""
    out = img
    if cfg.flip_p > 0 and rng.random() < cfg.flip_p:
        out = out[..., ::-1].copy()
    if cfg.erase_p > 0 and rng.random() < cfg.erase_p:
        out = random_erase(out, rng, cfg)
    return out


# ----------------------------------------------------------------------------
# loss and optimiser

def bce_pair_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy of pair logits.

    ``logits`` is a tensor (recorded for backward) or a sequence of
    :class:`PairVerdict` objects (value only).
    """
    if not isinstance(logits, Tensor):
        seq = list(logits)
        logits = Tensor(np.array([v.logit if isinstance(v, PairVerdict) else float(v) for v in seq]))
    labels = np.asarray(labels, dtype=np.float64)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ParameterError("labels must be 0 or 1")
    return ops.binary_cross_entropy(logits, labels)


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             lr: float, momentum: float = 0.9) -> ParamSet:
    """Momentum SGD in place: ``v = momentum * v + g``; ``w -= lr * v``.

    All gradients are validated before anything is touched.
    """
    if lr < 0 or not 0 <= momentum < 1:
        raise ParameterError("need lr >= 0 and 0 <= momentum < 1")
    bad = sorted(k for k, g in grads.items() if not np.isfinite(g).all())
    if bad:
        raise TrainingError(f"non-finite gradients for {len(bad)} parameter(s): {', '.join(bad[:5])}")
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        params.weights[name] -= lr * v
    return params


def lr_schedule(epoch: int, base: float = 0.01, low: float = 0.001, drop_epoch: int = 50,
                mode: str = "step") -> float:
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    if epoch >= drop_epoch:
        return low
    if mode == "step":
        return base
    if mode == "linear":
        return base + (low - base) * epoch / drop_epoch
    raise ParameterError(f"unknown schedule mode {mode!r}")


# ----------------------------------------------------------------------------
# training

def predict_logits(params: ParamSet, config: ModelConfig, imgs_a: np.ndarray, imgs_b: np.ndarray,
                   chunk: int = 32) -> np.ndarray:
    """Eval-mode logits for aligned image arrays, in chunks."""
    layers = Layers(params, train=False)
    out = [forward_batch(imgs_a[s:s + chunk], imgs_b[s:s + chunk], layers, config).logits.data
           for s in range(0, len(imgs_a), chunk)]
    return np.concatenate(out)


def verification_accuracy(params: ParamSet, config: ModelConfig, images: np.ndarray, pairs: PairBatch) -> float:
    logits = predict_logits(params, config, images[pairs.a_index], images[pairs.b_index])
    return float(np.mean((logits > 0) == (pairs.labels > 0.5)))


def heldout_accuracy(params: ParamSet, cfg: RunConfig, dataset: Dataset, pairs: int = 600) -> float:
    """Accuracy on a balanced pair set from the held-out identities, disjoint in draw from the per-epoch set."""
    _, val_pool = split_identities(dataset.ids, cfg.val_ids)
    batch = balanced_pairs(dataset.ids, val_pool, pairs, np.random.default_rng([cfg.seed, STREAM_VAL, 1]))
    return verification_accuracy(params, cfg.model_config(), dataset.images(), batch)


@dataclass
class TrainResult:
    params: ParamSet
    metrics: list[dict]
    checkpoint: Path
    metrics_path: Path


METRIC_COLUMNS = ("epoch", "loss", "val_accuracy", "lr")


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([r["epoch"], repr(r["loss"]), repr(r["val_accuracy"]), repr(r["lr"])])
    return buf.getvalue()


def train(cfg: RunConfig, dataset: Dataset | None = None, log=None) -> TrainResult:
    """Train a verifier; write checkpoint, metrics CSV and the effective config to ``cfg.out``.

    The checkpoint is rewritten after every completed epoch, so if training
    diverges it holds the last good parameters when :class:`TrainingError`
    is raised.
    """
    ds = dataset if dataset is not None else Dataset.load(cfg.dataset)
    out = Path(cfg.out)
    ckpt = cfg.checkpoint_path
    if ckpt.exists() and not cfg.force:
        raise FileExistsError(f"{ckpt} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg))
    metrics_path = out / "metrics.csv"

    images = ds.images()
    train_pool, val_pool = split_identities(ds.ids, cfg.val_ids)
    model_cfg = cfg.model_config()
    params = init_params(model_cfg, np.random.default_rng([cfg.seed, STREAM_INIT]))
    val = balanced_pairs(ds.ids, val_pool, cfg.val_pairs, np.random.default_rng([cfg.seed, STREAM_VAL])) \
        if len(val_pool) else None
    aug = AugmentConfig(flip_p=cfg.flip_p, erase_p=cfg.erase_p)
    velocity: dict[str, np.ndarray] = {}
    rows: list[dict] = []
    checkpoint_save(params, ckpt)
    metrics_path.write_text(metrics_csv(rows))

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_low, cfg.drop_epoch, cfg.lr_mode)
        rng = np.random.default_rng([cfg.seed, STREAM_TRAIN, epoch])
        losses = []
        for step in range(cfg.steps_per_epoch):
            batch = sample_pairs(ds.ids, cfg.ratio, cfg.batch_size, rng, train_pool)
            a = np.stack([augment(images[i], rng, aug) for i in batch.a_index])
            b = np.stack([augment(images[i], rng, aug) for i in batch.b_index])
            try:
                loss, grads, _ = loss_and_grads(params, model_cfg, a, b, batch.labels, bce_pair_loss)
                sgd_step(params, grads, velocity, lr, cfg.momentum)
            except (EvaluationError, TrainingError) as exc:
                raise TrainingError(
                    f"diverged at epoch {epoch} step {step} ({exc}); last good checkpoint: {ckpt}"
                ) from exc
            losses.append(loss)
        acc = verification_accuracy(params, model_cfg, images, val) if val is not None else float("nan")
        rows.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_accuracy": acc, "lr": lr})
        checkpoint_save(params, ckpt)
        metrics_path.write_text(metrics_csv(rows))
        if log is not None:
            log(f"epoch {epoch} loss {rows[-1]['loss']:.4f} val_accuracy {acc:.4f} lr {lr:g}")
    return TrainResult(params, rows, ckpt, metrics_path)
