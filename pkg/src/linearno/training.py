"""Losses, optimizers, LR schedules, and the deterministic training loop.

Everything is driven by a frozen ``TrainConfig``; given (seed, config,
dataset bytes) the loop is bit-reproducible — batch order comes from one
seeded generator whose state is checkpointed, and parameter updates are
pure float64 arithmetic. The only nondeterministic fields anywhere are
wall-clock timings, which are excluded from report fingerprints.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .container import load, pack_json, save, unpack_json
from .model import load_model, save_model
from .tensor import NumericsError, Tensor, no_grad

OPTIMIZERS = ("adamw", "adam")
SCHEDULES = ("onecycle", "cosine", "constant")
LOSSES = ("rel_l2", "mse")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    optimizer: str = "adamw"
    weight_decay: float = 1e-5
    schedule: str = "onecycle"
    batch_size: int = 16
    clip_norm: float | None = None
    seed: int = 0
    loss: str = "rel_l2"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# losses (Tensor-valued, differentiable) and metrics (plain numpy)

def relative_l2(pred: Tensor, target) -> Tensor:
    """Per-sample ||target - pred||_2 / ||target||_2, averaged over the batch.

    ``target`` is a constant array shaped like ``pred`` with a leading
    batch axis; every sample must have nonzero norm.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"shape mismatch: pred {pred.data.shape} vs target {t.shape}")
    axes = tuple(range(1, t.ndim))
    den = np.sqrt((t * t).sum(axis=axes))
    if np.any(den == 0.0):
        raise ValueError("relative L2 undefined for a zero-norm target sample")
    diff = pred - t
    num = (diff * diff).sum(axis=axes)
    return (num.sqrt() / den).mean()


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    diff = pred - t
    return (diff * diff).mean()


LOSS_FNS = {"rel_l2": relative_l2, "mse": mse}


def metric_rel_l2(pred, target):
    """numpy counterpart of ``relative_l2`` for evaluation."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    axes = tuple(range(1, target.ndim))
    num = np.sqrt(((pred - target) ** 2).sum(axis=axes))
    den = np.sqrt((target ** 2).sum(axis=axes))
    return float(np.mean(num / den))


def metric_rel_mae(pred, target):
    """Per-sample mean |err| / mean |target|, averaged over the batch."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    axes = tuple(range(1, target.ndim))
    num = np.abs(pred - target).mean(axis=axes)
    den = np.abs(target).mean(axis=axes)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# schedules

def constant_lr(step, total_steps, base_lr):
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return base_lr


def cosine_annealing_lr(step, total_steps, base_lr):
    """base_lr * (1 + cos(pi * step / total_steps)) / 2."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def onecycle_lr(step, total_steps, base_lr, warmup_frac=0.3, div=25.0, final_div=1e4):
    """Linear warmup base/div -> base over the first ``warmup_frac`` of
    steps, then cosine decay to base/final_div.

    Written as exact interpolations so the endpoints (step 0, the peak,
    the final step) hit base/div, base, base/final_div bitwise.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    warm = warmup_frac * total_steps
    lo = base_lr / div
    if step <= warm:
        u = step / warm if warm > 0 else 1.0
        return lo * (1.0 - u) + base_lr * u
    u = (step - warm) / (total_steps - warm)
    c = 0.5 * (1.0 + math.cos(math.pi * u))
    floor = base_lr / final_div
    return floor * (1.0 - c) + base_lr * c


SCHEDULE_FNS = {"constant": constant_lr, "cosine": cosine_annealing_lr, "onecycle": onecycle_lr}


# ---------------------------------------------------------------------------
# optimizer

class AdamOptimizer:
    """Adam with optional decoupled weight decay (AdamW).

    beta1 = 0.9, beta2 = 0.999, eps = 1e-8. Decay, when enabled, is
    applied as p <- p * (1 - lr * wd) before the moment update. Plain
    Adam ignores weight decay entirely.
    """

    def __init__(self, params, weight_decay=0.0, decoupled=True,
                 betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = dict(params)
        self.weight_decay = weight_decay if decoupled else 0.0
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _clip(self):
        if self.clip_norm is None:
            return
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = math.sqrt(total)
        if norm > self.clip_norm:
            scale = self.clip_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericsError(f"non-finite gradient in parameter {name!r}")
        self._clip()
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        out = {"opt/t": np.array([self.t], dtype=np.uint64)}
        for name in self.params:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, sections):
        self.t = int(sections["opt/t"][0])
        for name in self.params:
            self.m[name] = sections[f"opt/m/{name}"].copy()
            self.v[name] = sections[f"opt/v/{name}"].copy()


# ---------------------------------------------------------------------------
# tasks: bind a model's call signature to a split's arrays

class CompleterTask:
    """Sparse-observation completion: predict the full region field."""

    def __init__(self, model, split):
        self.model = model
        self.split = split

    def __len__(self):
        return len(self.split)

    def forward(self, idx):
        s = self.split
        b = len(idx)
        query = np.broadcast_to(s.query, (b,) + s.query.shape)
        pred = self.model.forward(query, s.source_coords[idx], s.source_values[idx])
        return pred, s.target[idx]

    def predict(self, batch_size=16):
        outs = []
        with no_grad():
            for lo in range(0, len(self), batch_size):
                idx = np.arange(lo, min(lo + batch_size, len(self)))
                outs.append(self.forward(idx)[0].data)
        return np.concatenate(outs, axis=0)


class SelfTask:
    """Full-field regression from the initial condition."""

    def __init__(self, model, split):
        self.model = model
        self.split = split

    def __len__(self):
        return len(self.split)

    def forward(self, idx):
        s = self.split
        b = len(idx)
        coords = np.broadcast_to(s.coords, (b,) + s.coords.shape)
        pred = self.model.forward(coords, s.func[idx])
        return pred, s.target[idx]

    def predict(self, batch_size=16):
        outs = []
        with no_grad():
            for lo in range(0, len(self), batch_size):
                idx = np.arange(lo, min(lo + batch_size, len(self)))
                outs.append(self.forward(idx)[0].data)
        return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    """Per-epoch records plus a summary, serialized as JSON lines."""

    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    WALL_FIELDS = ("wall_ms", "wall_s")

    def to_jsonl(self):
        import json
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"summary": self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            f.write(self.to_jsonl())
        os.replace(tmp, path)

    @staticmethod
    def read(path):
        import json
        records, summary = [], {}
        with open(path) as f:
            for line in f:
                obj = json.loads(line)
                if "summary" in obj and len(obj) == 1:
                    summary = obj["summary"]
                else:
                    records.append(obj)
        return RunReport(records, summary)

    def fingerprint(self):
        """Canonical serialization with wall-time fields removed."""
        import json

        def strip(obj):
            return {k: v for k, v in obj.items() if k not in RunReport.WALL_FIELDS}

        lines = [json.dumps(strip(r), sort_keys=True) for r in self.records]
        lines.append(json.dumps({"summary": strip(self.summary)}, sort_keys=True))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoints

def _rng_state_sections(rng):
    return {"rng_state": pack_json(rng.bit_generator.state)}


def _restore_rng(sections):
    rng = np.random.default_rng()
    rng.bit_generator.state = unpack_json(sections["rng_state"])
    return rng


def save_checkpoint(path, model, optimizer, rng, epoch, best_val, config: TrainConfig):
    sections = {"config": pack_json({"kind": model.kind, **asdict(model.config)})}
    for name, arr in model.state_arrays().items():
        sections[f"param/{name}"] = arr
    sections.update(optimizer.state_arrays())
    sections.update(_rng_state_sections(rng))
    sections["train/progress"] = np.array([epoch], dtype=np.uint64)
    sections["train/best_val"] = np.array([best_val], dtype=np.float64)
    sections["train_config"] = pack_json(asdict(config))
    save(path, sections)


def load_checkpoint(path):
    sections = load(path)
    model = load_model(path)
    cfg_raw = unpack_json(sections["train_config"])
    config = TrainConfig(**{**cfg_raw, "clip_norm": cfg_raw.get("clip_norm")})
    epoch = int(sections["train/progress"][0])
    best_val = float(sections["train/best_val"][0])
    rng = _restore_rng(sections)
    return model, sections, config, epoch, best_val, rng


# ---------------------------------------------------------------------------
# the loop

def train(train_task, val_task, config: TrainConfig, out_dir=None, quiet=True,
          resume=None, stop_after=None):
    """Run the full loop; returns (RunReport, best checkpoint path | None).

    Deterministic given (seed, config, dataset): shuffling comes from a
    single seeded generator whose state travels through checkpoints, so
    ``resume`` reproduces the uninterrupted run bit-for-bit.

    ``stop_after`` ends the run early after that epoch count while
    keeping the schedule of the full config — long runs can be split
    into chunks and resumed without changing a single update.
    """
    model = train_task.model
    loss_fn = LOSS_FNS[config.loss]
    sched = SCHEDULE_FNS[config.schedule]
    n = len(train_task)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    opt = AdamOptimizer(dict(model.parameters()), weight_decay=config.weight_decay,
                        decoupled=(config.optimizer == "adamw"), clip_norm=config.clip_norm)
    rng = np.random.default_rng(config.seed)
    start_epoch = 0
    best_val = math.inf
    report = RunReport()

    if resume is not None:
        _, sections, saved_config, start_epoch, best_val, rng = load_checkpoint(resume)
        if saved_config != config:
            raise ValueError("resume checkpoint was written with a different train config")
        model.load_state_arrays({k[len("param/"):]: v for k, v in sections.items()
                                 if k.startswith("param/")})
        opt.load_state_arrays(sections)
        report_path = resume.replace("last.lnoc", "report.jsonl")
        if os.path.exists(report_path):
            report = RunReport.read(report_path)
            report.records = [r for r in report.records if r["epoch"] < start_epoch]
            report.summary = {}

    best_path = os.path.join(out_dir, "best.lnoc") if out_dir else None
    last_path = os.path.join(out_dir, "last.lnoc") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    t_start = time.perf_counter()
    end_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        t_epoch = time.perf_counter()
        perm = rng.permutation(n)
        losses = []
        lr = None
        for s in range(steps_per_epoch):
            idx = perm[s * config.batch_size:(s + 1) * config.batch_size]
            lr = sched(epoch * steps_per_epoch + s, total_steps, config.lr)
            try:
                pred, target = train_task.forward(idx)
                loss = loss_fn(pred, target)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericsError("non-finite training loss")
                model.zero_grad()
                loss.backward()
                opt.step(lr)
            except NumericsError as err:
                raise NumericsError(f"epoch {epoch}, step {s}: {err}") from err
            losses.append(value)

        val_loss = evaluate_loss(val_task, loss_fn, config.batch_size)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_loss": val_loss,
            "wall_ms": (time.perf_counter() - t_epoch) * 1e3,
        }
        report.records.append(record)
        if not quiet:
            print(f"epoch {epoch:4d}  lr {lr:.3e}  train {record['train_loss']:.5f}"
                  f"  val {val_loss:.5f}")
        if val_loss < best_val:
            best_val = val_loss
            if best_path:
                save_checkpoint(best_path, model, opt, rng, epoch + 1, best_val, config)
        if last_path:
            save_checkpoint(last_path, model, opt, rng, epoch + 1, best_val, config)

    report.summary = {
        "epochs": config.epochs,
        "completed": end_epoch == config.epochs,
        "best_val": best_val,
        "final_train": report.records[-1]["train_loss"] if report.records else None,
        "param_count": model.param_count(),
        "seed": config.seed,
        "loss": config.loss,
        "wall_s": time.perf_counter() - t_start,
    }
    if out_dir:
        report.write(os.path.join(out_dir, "report.jsonl"))
    return report, best_path


def evaluate_loss(task, loss_fn, batch_size=16):
    """Mean loss over a whole split without recording gradients."""
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(task), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(task)))
            pred, target = task.forward(idx)
            total += loss_fn(pred, target).item() * len(idx)
            count += len(idx)
    value = total / count
    if not math.isfinite(value):
        raise NumericsError("non-finite validation loss")
    return value
