"""Small dilated CNN for lesion / non-lesion scoring."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from lesionforge.dataio import DatasetRecord, load_image
from lesionforge.errors import DataError, NumericalError
from lesionforge.metrics import auc_from_arrays
from lesionforge.seeding import torch_generator


@dataclass
class TrainConfig:
    lr: float = 1e-4
    plateau_decay: float = 0.9
    plateau_patience: int = 2
    weight_decay: float = 1e-4
    augment_flip: bool = True
    augment_rotation_deg: float = 5.0
    augment_translation: float = 0.05
    batch_size: int = 32
    max_epochs: int = 30
    early_stop_patience: int = 8
    input_height: int = 256
    input_width: int = 128
    channels: int = 16
    n_blocks: int = 5
    pool: str = "max"
    freeze_blocks: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.weight_decay < 0:
            raise DataError("learning rate must be positive and weight decay non-negative")
        if not 0.0 < self.plateau_decay < 1.0:
            raise DataError("plateau_decay must lie in (0, 1)")
        if not 4 <= self.n_blocks <= 6:
            raise DataError("n_blocks must be between 4 and 6")
        if not 0 <= self.freeze_blocks <= self.n_blocks:
            raise DataError("freeze_blocks must lie in [0, n_blocks]")
        if self.pool not in ("max", "avg"):
            raise DataError("pool must be 'max' or 'avg'")


class LesionClassifier(nn.Module):
    """Conv blocks (the last two dilated instead of strided) -> global pool -> logit.

    Max pooling is the default: a lesion covers a small fraction of the image,
    and averaging over every location dilutes its response.
    """

    def __init__(self, channels: int = 16, n_blocks: int = 5, input_size=(256, 128), seed: int = 0, pool: str = "max"):
        super().__init__()
        self.input_size = tuple(input_size)
        self.seed = seed
        self.pool = pool
        self.history: list[dict] = []
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            blocks, ch_in = [], 1
            for k in range(n_blocks):
                dilated = k >= n_blocks - 2
                ch_out = channels * 2 ** min(k, 3)
                blocks.append(
                    nn.Sequential(
                        nn.Conv2d(
                            ch_in,
                            ch_out,
                            3,
                            stride=1 if dilated else 2,
                            padding=2 if dilated else 1,
                            dilation=2 if dilated else 1,
                        ),
                        nn.BatchNorm2d(ch_out),
                        nn.ReLU(),
                    )
                )
                ch_in = ch_out
            self.blocks = nn.Sequential(*blocks)
            self.head = nn.Linear(ch_in, 1)

    def forward(self, x):
        h = self.blocks(x)
        pooled = h.amax(dim=(2, 3)) if self.pool == "max" else h.mean(dim=(2, 3))
        return self.head(pooled)[:, 0]

    def freeze_prefix(self, k: int) -> None:
        for block in self.blocks[:k]:
            for p in block.parameters():
                p.requires_grad_(False)


def fit_to_canvas(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Aspect-preserving resize into a ``height x width`` canvas, zero-padded and centred."""
    h, w = pixels.shape
    scale = min(height / h, width / w)
    nh, nw = max(1, min(height, round(h * scale))), max(1, min(width, round(w * scale)))
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None, None]
    if (nh, nw) != (h, w):
        t = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False, antialias=scale < 1)
    canvas = np.zeros((height, width), dtype=np.float32)
    y0, x0 = (height - nh) // 2, (width - nw) // 2
    canvas[y0 : y0 + nh, x0 : x0 + nw] = t[0, 0].numpy()
    return canvas


class ImageCache:
    """Preprocessed model inputs keyed by (path, canvas size)."""

    def __init__(self):
        self._store: dict = {}

    def get(self, path: str, size: tuple[int, int]) -> np.ndarray:
        key = (path, size)
        if key not in self._store:
            self._store[key] = fit_to_canvas(load_image(path).pixels, *size)
        return self._store[key]

    def batch(self, records: list[DatasetRecord], size) -> torch.Tensor:
        if not records:
            return torch.zeros((0, 1, *size))
        return torch.from_numpy(np.stack([self.get(r.path, tuple(size)) for r in records]))[:, None]


def labels_of(records: list[DatasetRecord]) -> np.ndarray:
    return np.array([1 if r.is_lesion else 0 for r in records], dtype=np.int64)


def augment_batch(x: torch.Tensor, cfg: TrainConfig, g: torch.Generator) -> torch.Tensor:
    """Random flips plus small rotations and translations (training only)."""
    n = x.shape[0]
    if cfg.augment_flip:
        flip = torch.rand(n, generator=g) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    if cfg.augment_rotation_deg > 0 or cfg.augment_translation > 0:
        ang = (torch.rand(n, generator=g) * 2 - 1) * math.radians(cfg.augment_rotation_deg)
        shift = (torch.rand(n, 2, generator=g) * 2 - 1) * 2 * cfg.augment_translation
        cos, sin = torch.cos(ang), torch.sin(ang)
        theta = torch.stack([torch.stack([cos, -sin, shift[:, 0]], 1), torch.stack([sin, cos, shift[:, 1]], 1)], 1)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return x


@torch.no_grad()
def score_tensor(model: LesionClassifier, x: torch.Tensor, batch_size: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = [torch.sigmoid(model(x[i : i + batch_size])) for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return torch.cat(out).double().numpy() if out else np.zeros(0)


def score(model: LesionClassifier, images, cache: ImageCache | None = None) -> np.ndarray:
    """Lesion probability for each image (records, paths or 2-D arrays); deterministic."""
    arrays = []
    cache = cache or ImageCache()
    for item in images:
        if isinstance(item, DatasetRecord):
            arrays.append(cache.get(item.path, model.input_size))
        elif isinstance(item, (str, Path)):
            arrays.append(cache.get(str(item), model.input_size))
        else:
            arrays.append(fit_to_canvas(np.asarray(item), *model.input_size))
    if not arrays:
        return np.zeros(0)
    return score_tensor(model, torch.from_numpy(np.stack(arrays))[:, None])


def make_scheduler(optimizer, cfg: TrainConfig):
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="max", factor=cfg.plateau_decay, patience=cfg.plateau_patience
    )


def train_classifier(
    train_records: list[DatasetRecord],
    val_records: list[DatasetRecord],
    cfg: TrainConfig,
    cache: ImageCache | None = None,
    log=None,
) -> LesionClassifier:
    """Adam with plateau decay on validation AUC; returns the best-validation-AUC weights.

    The loss is binary cross-entropy weighted inversely to class frequency.
    """
    cfg.validate()
    if any(r.split != "train" for r in train_records):
        raise DataError("training records must all carry split=train")
    if any(r.provenance == "generated" for r in val_records):
        raise DataError("generated images may not enter the validation set")
    y_train = labels_of(train_records)
    if y_train.min(initial=1) == y_train.max(initial=0):
        raise DataError("training set must contain both lesion and non-lesion images")
    if not val_records:
        raise DataError("validation set is empty")

    size = (cfg.input_height, cfg.input_width)
    model = LesionClassifier(cfg.channels, cfg.n_blocks, size, seed=cfg.seed, pool=cfg.pool)
    model.freeze_prefix(cfg.freeze_blocks)
    if cfg.max_epochs <= 0:
        return model

    cache = cache or ImageCache()
    x_train = cache.batch(train_records, size)
    x_val = cache.batch(val_records, size)
    y_val = labels_of(val_records)
    yt = torch.from_numpy(y_train).float()
    n_pos = float(y_train.sum())
    n_neg = float(len(y_train) - n_pos)
    w_pos, w_neg = len(y_train) / (2 * n_pos), len(y_train) / (2 * n_neg)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = make_scheduler(opt, cfg)
    g = torch_generator(cfg.seed + 1)
    best_auc, best_state, since_best = -math.inf, copy.deepcopy(model.state_dict()), 0

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = torch.randperm(len(x_train), generator=g)
        total, count = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = augment_batch(x_train[idx], cfg, g)
            yb = yt[idx]
            weight = torch.where(yb > 0.5, w_pos, w_neg)
            loss = F.binary_cross_entropy_with_logits(model(xb), yb, weight=weight)
            if not torch.isfinite(loss):
                raise NumericalError(f"classifier loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        val_auc = auc_from_arrays(y_val, score_tensor(model, x_val)) if 0 < y_val.sum() < len(y_val) else float("nan")
        sched.step(val_auc)
        model.history.append({"epoch": epoch, "loss": total / max(count, 1), "val_auc": val_auc, "lr": opt.param_groups[0]["lr"]})
        if log is not None:
            log(f"classifier epoch {epoch}: loss={total / max(count, 1):.4f} val_auc={val_auc:.4f}")
        if val_auc > best_auc:
            best_auc, best_state, since_best = val_auc, copy.deepcopy(model.state_dict()), 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model


def save_classifier(path, model: LesionClassifier, cfg: TrainConfig | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "classifier",
            "state": model.state_dict(),
            "input_size": list(model.input_size),
            "channels": model.blocks[0][0].out_channels,
            "n_blocks": len(model.blocks),
            "seed": model.seed,
            "pool": model.pool,
            "history": model.history,
            "config": asdict(cfg) if cfg else None,
        },
        path,
    )


def load_classifier(path) -> LesionClassifier:
    path = Path(path)
    if not path.exists():
        raise DataError(f"classifier checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "classifier":
        raise DataError(f"{path} is not a classifier checkpoint")
    model = LesionClassifier(blob["channels"], blob["n_blocks"], tuple(blob["input_size"]), seed=blob["seed"], pool=blob.get("pool", "avg"))
    model.load_state_dict(blob["state"])
    model.history = blob["history"]
    model.eval()
    return model
