"""Two-stage experiment: stage-1 pixel-wise training, stage-2 LoAd, and the
files a run leaves behind (checkpoints, event log, convergence CSV, manifest)."""
from __future__ import annotations

import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .adversarial import SegmentationTrainer, run_load_on_data
from .autodiff import ContractError
from .controller import ControllerConfig, Event, LoadResult
from .data import Dataset, derive_seed, flip_decision, generate_shapes_dataset, load_dataset, rng_for, split_dataset
from .io import atomic_write_text
from .losses import pixel_ce
from .metrics import evaluate_model_miou
from .models import Discriminator, DiscriminatorSpec, Segmentor, SegmentorSpec, load_checkpoint, save_checkpoint
from .optim import sgd_momentum_step

log = logging.getLogger(__name__)

CSV_HEADER = "tick,cycle,event,miou,mu_s,mu_star,gamma,omega,buffer_size"
SPLITS = ("train", "val", "holdout")


@dataclass
class DataConfig:
    m: int = 250  # total samples; the default split leaves 200 for training
    height: int = 32
    width: int = 32
    num_classes: int = 4
    train_fraction: float = 0.8
    val_fraction: float = 0.2
    holdout_fraction: float = 0.3
    dir: str = ""  # load <dir>/{train,val,holdout}.ldsd instead of generating


@dataclass
class Stage1Config:
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    weighted_epochs: int = 0  # leading epochs trained with class-weighted CE
    flip: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        self.controller.seed = self.seed

    def validate(self) -> None:
        d = self.data
        if d.num_classes < 2 or d.m < 1 or d.height < 8 or d.width < 8:
            raise ContractError("invalid dataset parameters")
        if self.stage1.epochs < 0 or self.stage1.batch_size < 1 or not self.stage1.lr > 0:
            raise ContractError("invalid stage-1 parameters")
        self.controller.seed = self.seed
        self.controller.validate()


# ---- flat dotted-key config files ----------------------------------------

_HIDDEN_KEYS = {"controller.seed"}  # always follows the master seed


def _leaf_fields(obj, prefix: str = ""):
    hints = typing.get_type_hints(type(obj))
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _leaf_fields(value, key + ".")
        elif key not in _HIDDEN_KEYS:
            yield key, obj, f.name, hints[f.name]


def config_items(config: ExperimentConfig) -> list[tuple[str, object]]:
    return [(key, getattr(owner, name)) for key, owner, name, _ in _leaf_fields(config)]


def _coerce(raw: str, kind, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ContractError(f"bad value for {key}: {raw!r}") from None


def set_config_value(config: ExperimentConfig, key: str, raw: str) -> None:
    for k, owner, name, kind in _leaf_fields(config):
        if k == key:
            setattr(owner, name, _coerce(raw, kind, key))
            if key == "seed":
                config.controller.seed = config.seed
            return
    raise ContractError(f"unknown config key {key!r}")


def parse_config_text(text: str, config: ExperimentConfig | None = None) -> ExperimentConfig:
    """``key = value`` lines with dotted keys; ``#`` starts a comment."""
    config = config or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        set_config_value(config, key, raw)
    config.validate()
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def config_to_text(config: ExperimentConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in config_items(config))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def write_manifest(config: ExperimentConfig, command: str, extra: dict | None = None, path=None) -> Path:
    """Plain-text key-value manifest: code version, command, full config, results."""
    path = Path(path) if path else Path(config.out) / f"manifest-{command}.txt"
    lines = [f"code_version = loadseg {__version__}", f"command = {command}", f"master_seed = {config.seed}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in config_items(config)]
    for k, v in (extra or {}).items():
        lines.append(f"result.{k} = {_fmt(v)}")
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


# ---- data ----------------------------------------------------------------

def build_splits(config: ExperimentConfig) -> dict[str, Dataset]:
    d = config.data
    if d.dir:
        root = Path(d.dir)
        missing = [s for s in SPLITS if not (root / f"{s}.ldsd").exists()]
        if missing:
            raise FileNotFoundError(f"dataset files missing in {root}: {missing}")
        return {s: load_dataset(root / f"{s}.ldsd", config.seed) for s in SPLITS}
    full = generate_shapes_dataset(config.seed, d.m, d.height, d.width, d.num_classes)
    parts = split_dataset(full, d.train_fraction, d.val_fraction, d.holdout_fraction, config.seed)
    return dict(zip(SPLITS, parts))


def segmentor_spec(config: ExperimentConfig) -> SegmentorSpec:
    return SegmentorSpec(config.data.height, config.data.width, config.data.num_classes)


# ---- stage 1 -------------------------------------------------------------

def class_weight_maps(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-pixel weights: dataset-average class pixel count over the class count in that image."""
    counts = np.stack([np.bincount(l.reshape(-1), minlength=num_classes) for l in labels]).astype(np.float64)
    average = counts.mean(axis=0)
    ratio = np.divide(average, counts, out=np.zeros_like(counts), where=counts > 0)
    return ratio[np.arange(len(labels))[:, None, None], labels]


@dataclass
class Stage1Result:
    model: Segmentor
    curve: list[tuple[int, float, float]]  # (epoch, mean train loss, val mIoU)
    val_miou: float


def stage1_train(config: ExperimentConfig, splits: dict[str, Dataset] | None = None) -> Stage1Result:
    """Pixel-wise CE training of a freshly initialized segmentor."""
    splits = splits or build_splits(config)
    train, val = splits["train"], splits["val"]
    s1 = config.stage1
    model = Segmentor(segmentor_spec(config), seed=config.seed)
    weights = class_weight_maps(train.labels, train.num_classes) if s1.weighted_epochs > 0 else None
    curve = []
    for epoch in range(s1.epochs):
        order = rng_for(config.seed, "stage1-epoch", epoch).permutation(len(train))
        total, batches = 0.0, 0
        for start in range(0, len(order), s1.batch_size):
            idx = np.sort(order[start : start + s1.batch_size])
            images, labels = train.images[idx].copy(), train.labels[idx].copy()
            w = weights[idx].copy() if (weights is not None and epoch < s1.weighted_epochs) else None
            if s1.flip:
                for j, i in enumerate(idx):
                    if flip_decision(derive_seed(config.seed, "stage1-flip", epoch * len(train) + int(i))):
                        images[j], labels[j] = images[j, :, ::-1], labels[j, :, ::-1]
                        if w is not None:
                            w[j] = w[j, :, ::-1]
            loss = pixel_ce(model.forward(images), labels, pixel_weights=w)
            ad.backward_gradients(loss.total, model.params)
            sgd_momentum_step(model.params, s1.lr, s1.momentum)
            total += loss.value
            batches += 1
        val_miou = evaluate_model_miou(model, val)
        curve.append((epoch, total / batches, val_miou))
        log.info("stage1 epoch %d loss %.4f val mIoU %.4f", epoch, total / batches, val_miou)
    val_miou = evaluate_model_miou(model, val)
    return Stage1Result(model, curve, val_miou)


# ---- stage 2 -------------------------------------------------------------

@dataclass
class Stage2Result:
    load: LoadResult
    trainer: SegmentationTrainer
    baseline_holdout_miou: float
    best_holdout_miou: float


def check_compatible(model, config: ExperimentConfig) -> None:
    if not isinstance(model, Segmentor):
        raise ContractError("checkpoint does not hold a segmentor")
    spec = model.spec
    d = config.data
    if (spec.height, spec.width, spec.num_classes) != (d.height, d.width, d.num_classes):
        raise ContractError(
            f"checkpoint is for {spec.height}x{spec.width}, K={spec.num_classes}; "
            f"config has {d.height}x{d.width}, K={d.num_classes}"
        )


def stage2_load(config: ExperimentConfig, g0_checkpoint, splits: dict[str, Dataset] | None = None) -> Stage2Result:
    """Run LoAd from a stage-1 checkpoint; the live model ends as the returned best."""
    generator = load_checkpoint(g0_checkpoint)
    check_compatible(generator, config)
    splits = splits or build_splits(config)
    holdout = splits["holdout"]
    if len(holdout) == 0:
        raise ContractError("hold-out split is empty; increase data.m or the hold-out fraction")
    baseline = evaluate_model_miou(generator, holdout)
    d = config.data
    disc = Discriminator(DiscriminatorSpec(d.height, d.width, d.num_classes), seed=config.seed)
    result, trainer = run_load_on_data(generator, config.controller, splits["train"], holdout, disc)
    best = evaluate_model_miou(generator, holdout)
    return Stage2Result(result, trainer, baseline, best)


# ---- event log / CSV -----------------------------------------------------

def events_to_jsonl(events: list[Event]) -> str:
    return "".join(json.dumps(dataclasses.asdict(e), sort_keys=True) + "\n" for e in events)


def events_from_jsonl(text: str) -> list[Event]:
    return [Event(**json.loads(line)) for line in text.splitlines() if line.strip()]


def convergence_csv_text(events: list[Event]) -> str:
    if not events:
        raise ContractError("event log is empty")
    rows = [CSV_HEADER]
    for e in sorted(events, key=lambda e: e.tick):  # stable: keeps order within a tick
        rows.append(f"{e.tick},{e.cycle},{e.kind},{e.miou:.6f},{e.mu_s:.6f},{e.mu_star:.6f},"
                    f"{e.gamma},{e.omega},{e.buffer_size}")
    return "\n".join(rows) + "\n"


def export_convergence_csv(events: list[Event], path) -> Path:
    path = Path(path)
    text = convergence_csv_text(events)
    atomic_write_text(path, text)
    return path


def stage1_curve_csv(curve) -> str:
    return "epoch,loss,val_miou\n" + "".join(f"{e},{l:.6f},{m:.6f}\n" for e, l, m in curve)
