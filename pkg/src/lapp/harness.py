"""CIFAR-10 ingestion, augmentation, schedules, evaluation and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import os
import pickle
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

# Per-channel statistics of the 50,000 CIFAR-10 training images (values in [0, 1]).
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
PY_TRAIN_FILES = tuple(f"data_batch_{i}" for i in range(1, 6))
PY_TEST_FILES = ("test_batch",)

CHECKPOINT_SCHEMA = 1
DATA_DIR_ENV = "LAPP_DATA_DIR"


class IngestionError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class RunConfig:
    arch_name: str = "resnet20"
    c_target: float = 0.4
    lambda1: float = 3e-5
    lambda2: float = 1.0
    total_epochs: int = 120
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    bypass_kind: str = "v2"
    seed: int = 0
    data_dir: str | None = None
    out_dir: str | None = None
    prune_epoch_cap: int = 40
    uniform: bool = False
    train_subset: int | None = None
    test_subset: int | None = None
    mean: tuple[float, float, float] = CIFAR10_MEAN
    std: tuple[float, float, float] = CIFAR10_STD

    def __post_init__(self):
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        self.validate()

    def validate(self):
        problems = []
        if not 0 < self.c_target < 1:
            problems.append(f"c_target={self.c_target} must lie in (0, 1)")
        if self.batch_size < 1:
            problems.append(f"batch_size={self.batch_size} must be >= 1")
        if self.total_epochs <= self.prune_epoch_cap:
            problems.append(f"total_epochs={self.total_epochs} must exceed prune_epoch_cap={self.prune_epoch_cap}")
        if self.prune_epoch_cap < 1:
            problems.append("prune_epoch_cap must be >= 1")
        if self.bypass_kind not in ("v2", "v1"):
            problems.append(f"bypass_kind={self.bypass_kind!r} must be v2 or v1")
        if problems:
            raise ValueError("; ".join(problems))

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}


def default_lambda1(arch_name: str) -> float:
    return 3e-5 if arch_name == "resnet20" else 2e-5


PROFILES = {
    "desk": dict(total_epochs=120, prune_epoch_cap=40),
    "paper": dict(total_epochs=400, prune_epoch_cap=40),
    # CPU-sized wiring check: strong l1/FLOPs pressure so pruning finishes inside one epoch
    "smoke": dict(total_epochs=2, prune_epoch_cap=1, train_subset=1024, test_subset=256,
                  batch_size=16, lambda1=3e-2, lambda2=1000.0),
}


@dataclass
class CifarSplit:
    images: Tensor  # uint8, N x 3 x 32 x 32
    labels: Tensor  # int64, N

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "CifarSplit":
        if n is None or n >= len(self):
            return self
        return CifarSplit(self.images[:n], self.labels[:n])


def _read_bin(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise IngestionError(f"corrupt CIFAR-10 file {path}: {raw.size} bytes is not a whole number of records")
    raw = raw.reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise IngestionError(f"corrupt CIFAR-10 file {path}: label {labels.max()} out of range")
    return raw[:, 1:].reshape(-1, 3, 32, 32), labels


def _read_pickle(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"missing CIFAR-10 file: {path}")
    try:
        with open(path, "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        data = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
        labels = np.asarray(d[b"labels"], dtype=np.int64)
    except Exception as err:
        raise IngestionError(f"corrupt CIFAR-10 file {path}: {err}") from err
    return data, labels


def _resolve_layout(root: Path) -> tuple[Path, str]:
    for sub in ("", "cifar-10-batches-bin", "cifar-10-batches-py"):
        d = root / sub
        if (d / TRAIN_FILES[0]).exists():
            return d, "bin"
        if (d / PY_TRAIN_FILES[0]).exists():
            return d, "py"
    return root, "bin"


def load_cifar10(data_dir=None) -> tuple[CifarSplit, CifarSplit]:
    """Read CIFAR-10 from its binary (or pickled python) batch files."""
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise IngestionError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    root, layout = _resolve_layout(Path(data_dir))
    reader, train_names, test_names = ((_read_bin, TRAIN_FILES, TEST_FILES) if layout == "bin"
                                       else (_read_pickle, PY_TRAIN_FILES, PY_TEST_FILES))

    def split(names):
        parts = [reader(root / n) for n in names]
        x = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        return CifarSplit(torch.from_numpy(x), torch.from_numpy(y))

    return split(train_names), split(test_names)


def write_cifar10_binary(directory, train: CifarSplit, test: CifarSplit, batches: int = 5) -> Path:
    """Write splits in the binary batch layout (used for fixtures and synthetic demos)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def dump(path, images, labels):
        rec = np.concatenate([labels.numpy().astype(np.uint8)[:, None],
                              images.numpy().reshape(len(labels), -1)], axis=1)
        rec.tofile(path)

    chunks = np.array_split(np.arange(len(train)), batches)
    for name, idx in zip(TRAIN_FILES, chunks):
        dump(directory / name, train.images[idx], train.labels[idx])
    dump(directory / TEST_FILES[0], test.images, test.labels)
    return directory


def synthetic_cifar(n_train: int, n_test: int, seed: int = 0) -> tuple[CifarSplit, CifarSplit]:
    """Learnable stand-in data: each class is a fixed random colour template plus noise."""
    g = torch.Generator().manual_seed(seed)
    templates = torch.rand(10, 3, 8, 8, generator=g)
    templates = torch.nn.functional.interpolate(templates, size=32, mode="bilinear", align_corners=False)

    def make(n):
        y = torch.arange(n) % 10
        y = y[torch.randperm(n, generator=g)]
        x = templates[y] + 0.15 * torch.randn(n, 3, 32, 32, generator=g)
        return CifarSplit((x.clamp(0, 1) * 255).round().to(torch.uint8), y)

    return make(n_train), make(n_test)


def channel_stats(split: CifarSplit) -> tuple[tuple[float, ...], tuple[float, ...]]:
    x = split.images.to(torch.float64) / 255.0
    return tuple(x.mean((0, 2, 3)).tolist()), tuple(x.std((0, 2, 3), unbiased=False).tolist())


def standardize(images: Tensor, mean, std, dtype=torch.float32) -> Tensor:
    """uint8 (or [0,1] float) images -> per-channel standardized floats."""
    x = images.to(dtype)
    if images.dtype == torch.uint8:
        x = x / 255.0
    m = torch.tensor(mean, dtype=dtype).view(-1, 1, 1)
    s = torch.tensor(std, dtype=dtype).view(-1, 1, 1)
    return (x - m) / s


def pad_crop_flip(image: Tensor, dy: int, dx: int, flip: bool, pad: int = 4) -> Tensor:
    """Zero-pad by ``pad``, take the 32x32 window at offset (dy, dx), optionally mirror."""
    h, w = image.shape[-2:]
    padded = torch.nn.functional.pad(image, (pad, pad, pad, pad))
    out = padded[..., dy:dy + h, dx:dx + w]
    return out.flip(-1) if flip else out


def augment_train(image: Tensor, generator: torch.Generator, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> Tensor:
    """Pad 4, random 32x32 crop, horizontal flip with p=0.5, then standardize."""
    dy, dx = torch.randint(0, 9, (2,), generator=generator).tolist()
    flip = bool(torch.rand((), generator=generator) < 0.5)
    return standardize(pad_crop_flip(image, dy, dx, flip), mean, std)


def draw_augment_params(n: int, generator: torch.Generator, pad: int = 4) -> tuple[Tensor, Tensor]:
    """Crop offsets (n x 2, each in [0, 2*pad]) and flip flags for ``n`` images."""
    offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=generator)
    flips = torch.rand(n, generator=generator) < 0.5
    return offs, flips


def augment_batch(images: Tensor, generator: torch.Generator, pad: int = 4) -> Tensor:
    """Batched pad/crop/flip on raw images (standardization happens afterwards)."""
    n, c, h, w = images.shape
    offs, flips = draw_augment_params(n, generator, pad)
    padded = torch.nn.functional.pad(images, (pad, pad, pad, pad))
    rows = (offs[:, 0, None] + torch.arange(h)).view(n, 1, h, 1).expand(n, c, h, w)
    cols = (offs[:, 1, None] + torch.arange(w)).view(n, 1, 1, w)
    cols = torch.where(flips.view(n, 1, 1, 1), cols.flip(-1), cols).expand(n, c, h, w)
    chan = torch.arange(c).view(1, c, 1, 1).expand(n, c, h, w)
    batch = torch.arange(n).view(n, 1, 1, 1).expand(n, c, h, w)
    return padded[batch, chan, rows, cols]


def lr_at(epoch: int, config: RunConfig) -> float:
    """Step decay by 10x at 50% and 75% of the total epochs."""
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    passed = sum(epoch >= m * config.total_epochs for m in (0.5, 0.75))
    return config.base_lr * 0.1 ** passed


def train_batches(split: CifarSplit, config: RunConfig, epoch: int, dtype=torch.float32):
    """Deterministic per-epoch shuffling and augmentation, keyed on (seed, epoch)."""
    g = torch.Generator().manual_seed(config.seed * 100_003 + epoch)
    order = torch.randperm(len(split), generator=g)
    for start in range(0, len(split), config.batch_size):
        idx = order[start:start + config.batch_size]
        x = augment_batch(split.images[idx], g)
        yield standardize(x, config.mean, config.std, dtype), split.labels[idx]


def evaluate(model: torch.nn.Module, split: CifarSplit, mean=CIFAR10_MEAN, std=CIFAR10_STD,
             batch_size: int = 500) -> float:
    """Top-1 accuracy in percent, model in inference mode."""
    was_training = model.training
    model.eval()
    p = next(model.parameters())
    correct = 0
    try:
        with torch.no_grad():
            for start in range(0, len(split), batch_size):
                x = standardize(split.images[start:start + batch_size], mean, std, p.dtype)
                pred = model(x.to(p.device)).argmax(1).cpu()
                correct += int((pred == split.labels[start:start + batch_size]).sum())
    finally:
        model.train(was_training)
    return 100.0 * correct / len(split)


def rng_state() -> dict:
    return dict(torch=torch.get_rng_state(), numpy=np.random.get_state(), python=random.getstate())


def set_rng_state(state: dict) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def checkpoint_save(state: dict, path) -> None:
    """Atomic write of one versioned archive (write to a temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(state, schema=CHECKPOINT_SCHEMA)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def checkpoint_load(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        state = torch.load(io.BytesIO(path.read_bytes()), map_location="cpu", weights_only=False)
    except Exception as err:
        raise CheckpointError(f"unreadable checkpoint {path}: {err}") from err
    if not isinstance(state, dict) or state.get("schema") != CHECKPOINT_SCHEMA:
        found = state.get("schema") if isinstance(state, dict) else None
        raise CheckpointError(f"checkpoint {path} has schema {found!r}, expected {CHECKPOINT_SCHEMA}")
    return state
