"""Training loop, configuration, evaluation, and metrics logging.

Determinism contract: a fixed config and seed reproduce the run
bit-exactly. Batch order derives from (seed, epoch); every augmentation
draw comes from a per-sample generator keyed on (seed, epoch, sample
index), so resuming mid-epoch replays the exact trajectory and the result
does not depend on how batches are grouped into microbatches.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import checkpoint as ckpt
from . import data_io as dio
from . import model as qmodel
from . import objective as obj


class ConfigInvalid(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, step, epoch, batch_index, dump_path=None):
        msg = f"non-finite loss at step {step} (epoch {epoch}, batch {batch_index})"
        if dump_path:
            msg += f"; diagnostics written to {dump_path}"
        super().__init__(msg)
        self.step = step
        self.batch_index = batch_index


@dataclass
class TrainConfig:
    dataset: str = "synthetic"
    data_dir: str = "data"
    split: str = "standard"
    epochs: int = 20
    batch_size: int = 64
    microbatch: int = 2
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    routing_iters: int = 2
    branched: bool = True
    margin_clamp: bool = True
    dtype: str = "float32"
    out_dir: str = "runs/latest"
    eval_every: int = 1
    train_subset: int = 0
    test_subset: int = 0
    synthetic_n: int = 486
    lambda_base: float = 0.01
    lambda_growth: float = 1.0
    per_kernel_offset_rotors: bool = False
    coordinate_addition: bool = False
    augment_fashion: bool = False
    lr_decay_steps: int = 0
    lr_decay_rate: float = 0.1
    figures: bool = True
    resume: str = ""
    checkpoint_every_steps: int = 0  # 0: checkpoint at epoch boundaries only
    stop_at_train_acc: float = 0.0   # early-stop threshold; 0 disables
    # architecture overrides; defaults are the pinned full-size network
    primary_types: int = 96
    pose_ch1: int = 32
    pose_ch2: int = 64
    act_channels: int = 32
    conv_caps: str = "16x5x1,16x5x1,16x5x1"

    def checkpoint_path(self):
        return str(Path(self.out_dir) / "checkpoint.qcn")

    def metrics_path(self):
        return str(Path(self.out_dir) / "metrics.csv")


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_file(path):
    """Flat UTF-8 ``key = value`` lines; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def make_config(file_values=None, overrides=None):
    """Build a validated TrainConfig; CLI overrides beat file values."""
    merged = {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in fields:
                raise ConfigInvalid(f"unknown config key {key!r}")
            if value is None:
                continue
            merged[key] = _coerce(key, value, fields[key].type)
    config = TrainConfig(**merged)
    if config.split not in ("standard", "novel-azimuth", "novel-elevation"):
        raise ConfigInvalid(f"unknown split {config.split!r}")
    if config.dataset not in dio.DATASET_CLASSES:
        raise ConfigInvalid(f"unknown dataset {config.dataset!r}")
    if config.dtype not in ("float32", "float64"):
        raise ConfigInvalid(f"dtype must be float32/float64, got {config.dtype!r}")
    if config.optimizer not in ("adam", "sgd"):
        raise ConfigInvalid(f"unknown optimizer {config.optimizer!r}")
    if config.epochs < 1 or config.batch_size < 1 or config.microbatch < 1:
        raise ConfigInvalid("epochs, batch_size and microbatch must be positive")
    parse_conv_caps(config.conv_caps)
    return config


def _coerce(key, value, typ):
    if not isinstance(value, str):
        return value
    try:
        if typ in ("bool", bool):
            return _BOOL_WORDS[value.lower()]
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
        return value
    except (KeyError, ValueError) as exc:
        raise ConfigInvalid(f"bad value for {key}: {value!r}") from exc


def parse_conv_caps(spec):
    """'16x5x1,16x5x1' -> ((16, 5, 1), (16, 5, 1))."""
    try:
        layers = tuple(
            tuple(int(x) for x in chunk.strip().split("x"))
            for chunk in spec.split(",") if chunk.strip()
        )
    except ValueError as exc:
        raise ConfigInvalid(f"bad conv_caps spec {spec!r}") from exc
    if not layers or any(len(layer) != 3 for layer in layers):
        raise ConfigInvalid(f"conv_caps needs 'TYPESxKERNELxSTRIDE' chunks, got {spec!r}")
    return layers


def build_arch(config: TrainConfig):
    return qmodel.arch_for_dataset(
        config.dataset,
        primary_types=config.primary_types,
        pose_channels=(config.pose_ch1, config.pose_ch2),
        act_channels=config.act_channels,
        conv_caps=parse_conv_caps(config.conv_caps),
        branched=config.branched,
        routing_iters=config.routing_iters,
        lam_base=config.lambda_base,
        lam_growth=config.lambda_growth,
        per_offset_rotors=config.per_kernel_offset_rotors,
        coordinate_addition=config.coordinate_addition,
    )


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction = np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p in params:
            g = grads[p.name]
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= lr * correction * m / (np.sqrt(v) + self.eps)


class Sgd:
    def __init__(self, lr=1e-3):
        self.lr = lr
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for p in params:
            p.value -= lr * grads[p.name]


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

class DataPipeline:
    """Owns the split samples, normalization constants, and batch assembly."""

    def __init__(self, config: TrainConfig, norm_stats=None):
        self.config = config
        split_spec = dio.SplitSpec(mode=config.split)
        train_raw, test_raw = dio.load_dataset(
            config.dataset, config.data_dir, synthetic_n=config.synthetic_n,
            seed=config.seed,
        )
        self.train, self.test_novel = dio.viewpoint_split((train_raw, test_raw), split_spec)
        self.test_familiar = (
            dio.familiar_test_subset(test_raw, split_spec)
            if config.split != "standard" else None
        )
        if config.train_subset:
            self.train = self.train[: config.train_subset]
        if config.test_subset:
            self.test_novel = self.test_novel[: config.test_subset]
            if self.test_familiar is not None:
                self.test_familiar = self.test_familiar[: config.test_subset]
        if norm_stats is None:
            norm_stats = dio.compute_norm_stats(self.train, config.dataset)
        self.norm_stats = norm_stats

    def batch(self, samples, indices, phase, epoch):
        cfg = self.config
        images = []
        labels = np.empty(len(indices), dtype=np.int64)
        for slot, idx in enumerate(indices):
            s = samples[idx]
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch, int(idx)])
            )
            images.append(
                dio.preprocess(s, cfg.dataset, phase, rng, self.norm_stats,
                               augment_fashion=cfg.augment_fashion)
            )
            labels[slot] = s.label
        return np.stack(images), labels


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------

class MetricsLog:
    COLUMNS = ("step", "epoch", "margin", "loss", "train_acc",
               "eval_familiar", "eval_novel", "wall_time")

    def __init__(self, path, config_echo):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._last_step = -1
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(f"# qcaps {__version__} metrics\n")
            for key, value in sorted(config_echo.items()):
                fh.write(f"# config.{key} = {value}\n")
            fh.write(",".join(self.COLUMNS) + "\n")

    def append(self, **row):
        step = int(row["step"])
        if step < self._last_step:
            raise ValueError("metrics rows must be monotone in step")
        self._last_step = step
        cells = []
        for col in self.COLUMNS:
            value = row.get(col, "")
            if isinstance(value, float):
                value = f"{value:.6f}"
            cells.append(str(value))
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(",".join(cells) + "\n")


def read_metrics(path):
    """Parse a metrics CSV back into (header dict, column arrays)."""
    header = {}
    rows = []
    columns = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            if "=" in line:
                key, value = line[1:].split("=", 1)
                header[key.strip()] = value.strip()
            continue
        if columns is None:
            columns = line.split(",")
            continue
        rows.append(line.split(","))
    data = {c: [] for c in (columns or [])}
    for row in rows:
        for c, cell in zip(columns, row):
            data[c].append(float(cell) if cell not in ("", None) else np.nan)
    return header, {c: np.asarray(vals) for c, vals in data.items()}


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def config_echo(config: TrainConfig):
    return {f.name: getattr(config, f.name) for f in dataclasses.fields(TrainConfig)}


def _forward_batch(net, images, train):
    acts, _ = net.forward(images, train=train)
    return acts


def _learning_rate(config, step):
    lr = config.learning_rate
    if config.lr_decay_steps > 0:
        lr *= config.lr_decay_rate ** (step // config.lr_decay_steps)
    return lr


def train(config: TrainConfig, progress=None):
    """Run the optimization loop; returns (checkpoint path, metrics path).

    ``progress`` is an optional callback(dict) invoked after every logged
    evaluation, used by the CLI for console output.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.float32 if config.dtype == "float32" else np.float64

    resume_ck = None
    norm_stats = None
    if config.resume:
        resume_ck = ckpt.load_checkpoint(config.resume)
        stats = resume_ck.meta.get("norm_stats")
        if stats:
            norm_stats = (np.asarray(stats["mean"], np.float32),
                          np.asarray(stats["std"], np.float32))

    data = DataPipeline(config, norm_stats=norm_stats)
    net = qmodel.init_parameters(build_arch(config), seed=config.seed, dtype=dtype)
    optimizer = Adam(lr=config.learning_rate) if config.optimizer == "adam" else Sgd(
        lr=config.learning_rate
    )

    start_epoch = 0
    start_step_in_epoch = 0
    global_step = 0
    if resume_ck is not None:
        ckpt.restore_model(net, resume_ck, optimizer)
        global_step = int(resume_ck.meta["global_step"])
        start_epoch = int(resume_ck.meta["epoch"])
        start_step_in_epoch = int(resume_ck.meta["step_in_epoch"])

    echo = config_echo(config)
    metrics = MetricsLog(config.metrics_path(), echo)
    params = net.registry.trainable()
    n_train = len(data.train)
    steps_per_epoch = max(1, (n_train + config.batch_size - 1) // config.batch_size)
    t_start = time.time()

    def evaluate_splits():
        fam = nov = None
        if data.test_familiar is not None:
            fam = evaluate_samples(net, data, data.test_familiar)["accuracy"]
            nov = evaluate_samples(net, data, data.test_novel)["accuracy"]
        else:
            fam = evaluate_samples(net, data, data.test_novel)["accuracy"]
        return fam, nov

    def save(epoch, step_in_epoch):
        meta = {
            "global_step": global_step,
            "epoch": epoch,
            "step_in_epoch": step_in_epoch,
            "adam_t": optimizer.t,
            "config": {k: (v if not isinstance(v, tuple) else list(v))
                       for k, v in echo.items()},
            "norm_stats": {
                "mean": [float(x) for x in data.norm_stats[0]],
                "std": [float(x) for x in data.norm_stats[1]],
            },
            "code_version": __version__,
        }
        ckpt.save_checkpoint(config.checkpoint_path(), meta, ckpt.model_arrays(net, optimizer))

    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, 7919, epoch])
        ).permutation(n_train)
        epoch_losses = []
        epoch_hits = 0
        epoch_seen = 0
        first_step = start_step_in_epoch if epoch == start_epoch else 0
        for step_in_epoch in range(first_step, steps_per_epoch):
            lo = step_in_epoch * config.batch_size
            indices = order[lo : lo + config.batch_size]
            if indices.size == 0:
                continue
            margin = obj.margin_schedule(global_step, clamp=config.margin_clamp)
            grads_total = None
            batch_loss = 0.0
            for mb_lo in range(0, indices.size, config.microbatch):
                mb_idx = indices[mb_lo : mb_lo + config.microbatch]
                images, labels = data.batch(data.train, mb_idx, "train", epoch)
                acts = _forward_batch(net, images.astype(dtype), train=True)
                loss = obj.spread_loss_nodes(acts, labels, margin)
                scale = mb_idx.size / indices.size
                gmap = ad.backpropagate(ad.multiply(loss, scale), params)
                batch_loss += float(loss.value) * scale
                epoch_hits += int((obj.predict(acts.value) == labels).sum())
                epoch_seen += int(mb_idx.size)
                if grads_total is None:
                    grads_total = gmap
                else:
                    for key, g in gmap.items():
                        grads_total[key] = grads_total[key] + g
            if not np.isfinite(batch_loss):
                dump = out_dir / "nonfinite_dump.json"
                dump.write_text(json.dumps({
                    "step": global_step, "epoch": epoch,
                    "batch_index": step_in_epoch,
                    "sample_indices": [int(i) for i in indices],
                }, indent=2))
                raise NonFiniteLoss(global_step, epoch, step_in_epoch, dump)
            optimizer.step(params, grads_total, lr=_learning_rate(config, global_step))
            global_step += 1
            epoch_losses.append(batch_loss)
            if (config.checkpoint_every_steps
                    and global_step % config.checkpoint_every_steps == 0):
                save(epoch, step_in_epoch + 1)
        train_acc = epoch_hits / max(1, epoch_seen)
        stopping = bool(config.stop_at_train_acc) and train_acc >= config.stop_at_train_acc
        do_eval = ((epoch + 1) % config.eval_every == 0) or (epoch == config.epochs - 1)
        if do_eval or stopping:
            fam, nov = evaluate_splits()
            row = {
                "step": global_step,
                "epoch": epoch,
                "margin": obj.margin_schedule(global_step, clamp=config.margin_clamp),
                "loss": float(np.mean(epoch_losses)) if epoch_losses else "",
                "train_acc": train_acc,
                "eval_familiar": fam if fam is not None else "",
                "eval_novel": nov if nov is not None else "",
                "wall_time": time.time() - t_start,
            }
            metrics.append(**row)
            if progress:
                progress(row)
        save(epoch + 1, 0)
        if stopping:
            break
    if config.figures:
        from . import report

        report.render_metrics(config.metrics_path())
    return config.checkpoint_path(), config.metrics_path()


def param_count(config: TrainConfig):
    """Trainable-parameter census for the configured architecture."""
    return qmodel.init_parameters(build_arch(config), seed=config.seed).parameter_count()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_samples(net, data, samples, batch_size=64):
    """Deterministic accuracy / per-class accuracy / error rate."""
    n_classes = net.arch.num_classes
    hits = np.zeros(n_classes, dtype=np.int64)
    totals = np.zeros(n_classes, dtype=np.int64)
    dtype = net.registry.dtype
    for lo in range(0, len(samples), batch_size):
        idx = range(lo, min(lo + batch_size, len(samples)))
        images, labels = data.batch(samples, list(idx), "test", epoch=0)
        acts = _forward_batch(net, images.astype(dtype), train=False)
        preds = obj.predict(acts.value)
        for pred, label in zip(np.atleast_1d(preds), labels):
            totals[label] += 1
            hits[label] += int(pred == label)
    total = int(totals.sum())
    accuracy = float(hits.sum()) / total if total else 0.0
    per_class = {
        c: (float(hits[c]) / totals[c] if totals[c] else float("nan"))
        for c in range(n_classes)
    }
    return {
        "accuracy": accuracy,
        "error_rate": 1.0 - accuracy,
        "per_class_accuracy": per_class,
        "count": total,
    }


def evaluate(checkpoint_path, dataset=None, data_dir=None, split=None):
    """Evaluate a stored checkpoint; reports familiar and novel rows for
    viewpoint splits and a single accuracy otherwise."""
    stored = ckpt.load_checkpoint(checkpoint_path)
    cfg_values = {k: v for k, v in stored.meta["config"].items()}
    overrides = {}
    if dataset:
        overrides["dataset"] = dataset
    if data_dir:
        overrides["data_dir"] = data_dir
    if split:
        overrides["split"] = split
    config = make_config(
        {k: str(v) for k, v in cfg_values.items()}, overrides
    )
    dtype = np.float32 if config.dtype == "float32" else np.float64
    stats = stored.meta.get("norm_stats")
    norm_stats = None
    if stats:
        norm_stats = (np.asarray(stats["mean"], np.float32),
                      np.asarray(stats["std"], np.float32))
    data = DataPipeline(config, norm_stats=norm_stats)
    net = qmodel.init_parameters(build_arch(config), seed=config.seed, dtype=dtype)
    ckpt.restore_model(net, stored)
    out = {"step": stored.meta["global_step"], "split": config.split}
    if data.test_familiar is not None:
        out["familiar"] = evaluate_samples(net, data, data.test_familiar)
        out["novel"] = evaluate_samples(net, data, data.test_novel)
    else:
        out["standard"] = evaluate_samples(net, data, data.test_novel)
    return out
