"""Unsupervised motion-prediction training, plateau schedule, and flow evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tape
from .codec import class_weights, decode, encode, f1_score, weighted_ce_loss
from .layers import weighted_cross_entropy
from .model import MotionModel, load_arrays, load_model, save_arrays, save_model, select_modality
from .optim import AdamState, adam_step
from .synth import Dataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 5e-4
    patience: int = 3
    plateau_factor: float = 0.1
    epochs: int = 10
    lam: float = 0.5
    horizon: int = 8
    modality: str = "depth"
    seed: int = 0
    steps_per_epoch: int | None = None
    max_steps: int | None = None

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")


class PlateauScheduler:
    """Divide the rate by ``1/factor`` once ``patience`` evals pass without a new best."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "stale": self.stale}

    def load(self, s: dict) -> None:
        self.lr, self.best, self.stale = s["lr"], s["best"], s["stale"]


@dataclass
class MetricLog:
    horizon: int
    rows: list[dict] = field(default_factory=list)

    def add(self, step: int, split: str, loss: float, f1: float, rmse, lr: float) -> None:
        prev = [r["step"] for r in self.rows if r["split"] == split]
        if prev and step <= prev[-1]:
            raise ValueError(f"{split} step {step} does not increase past {prev[-1]}")
        rmse = list(rmse) if rmse is not None else [float("nan")] * self.horizon
        self.rows.append({"step": step, "split": split, "loss": loss, "f1": f1, "rmse": rmse, "lr": lr})

    def header(self) -> list[str]:
        return ["step", "split", "loss", "f1"] + [f"rmse_t{t + 1}" for t in range(self.horizon)] + ["lr"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.rows:
            w.writerow([r["step"], r["split"], repr(r["loss"]), repr(r["f1"]), *map(repr, r["rmse"]), repr(r["lr"])])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def split_rows(self, split: str) -> list[dict]:
        return [r for r in self.rows if r["split"] == split]


# data access ------------------------------------------------------------------


class ClipCache:
    """Per-clip model inputs and encoded targets, computed on first use."""

    def __init__(self, dataset: Dataset, modality: str):
        self.ds = dataset
        self.modality = modality
        self._frames: dict[int, np.ndarray] = {}
        self._targets: dict[int, np.ndarray] = {}

    def frames(self, i: int) -> np.ndarray:
        if i not in self._frames:
            self._frames[i] = select_modality(self.ds.clips[i].frames, self.modality)
        return self._frames[i]

    def targets(self, i: int) -> np.ndarray:
        if i not in self._targets:
            ds = self.ds
            self._targets[i] = encode(ds.normalized_flows(i), ds.codebook, ds.config.patch, ds.k_nn)
        return self._targets[i]


def valid_starts(n_frames: int, horizon: int) -> int:
    """Number of pair starts t with flows t+1..t+horizon available."""
    return max(n_frames - 1 - horizon, 0)


def sample_batch(cache: ClipCache, clip_ids: list[int], batch: int, horizon: int, rng: np.random.Generator):
    """Draw (clip, start) pairs uniformly; returns x1, x2, targets (T, N, h, w, K), picks."""
    ds = cache.ds
    if not any(valid_starts(ds.clips[i].frames.shape[0], horizon) for i in clip_ids):
        raise TrainingError(f"no clip has enough frames for horizon {horizon}")
    picks = []
    while len(picks) < batch:
        c = clip_ids[int(rng.integers(len(clip_ids)))]
        n = valid_starts(ds.clips[c].frames.shape[0], horizon)
        if n == 0:
            log.warning("clip %d too short for horizon %d; resampling", c, horizon)
            continue
        picks.append((c, int(rng.integers(n))))
    x1 = np.stack([cache.frames(c)[t] for c, t in picks])
    x2 = np.stack([cache.frames(c)[t + 1] for c, t in picks])
    z = np.stack([cache.targets(c)[t + 1 : t + 1 + horizon] for c, t in picks], axis=1)
    return x1, x2, z, picks


def all_pairs(ds: Dataset, clip_ids: list[int], horizon: int) -> list[tuple[int, int]]:
    return [(c, t) for c in clip_ids for t in range(valid_starts(ds.clips[c].frames.shape[0], horizon))]


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# evaluation --------------------------------------------------------------------

Predictor = Callable[[np.ndarray, np.ndarray, list], np.ndarray]


def model_predictor(model: MotionModel, horizon: int) -> Predictor:
    def predict(x1, x2, picks):
        outs = model.forward(x1, x2, horizon, training=False)
        return np.stack([o.data for o in outs])

    return predict


def oracle_predictor(cache: ClipCache, horizon: int) -> Predictor:
    """Returns log-targets as logits: a perfect predictor for testing the harness."""

    def predict(x1, x2, picks):
        z = np.stack([cache.targets(c)[t + 1 : t + 1 + horizon] for c, t in picks], axis=1)
        return np.log(np.maximum(z, 1e-300))

    return predict


def zero_flow_predictor(cache: ClipCache, horizon: int) -> Predictor:
    ds = cache.ds
    zero = ds.codebook.zero_index

    def predict(x1, x2, picks):
        h, w = ds.config.height // ds.config.patch, ds.config.width // ds.config.patch
        out = np.full((horizon, len(picks), h, w, ds.codebook.K), -1e3)
        out[..., zero] = 0.0
        return out

    return predict


@dataclass
class FlowEval:
    loss: float
    f1: float
    rmse: list[float]

    def to_csv(self) -> str:
        lines = ["t,rmse"] + [f"{t + 1},{r!r}" for t, r in enumerate(self.rmse)]
        return "\n".join(lines) + f"\nmean_f1,{self.f1!r}\nloss,{self.loss!r}\n"


def evaluate_flow(
    predictor: Predictor,
    cache: ClipCache,
    clip_ids: list[int],
    horizon: int,
    weights: np.ndarray,
    batch: int = 16,
) -> FlowEval:
    """Per-timestep RMSE of decoded predictions, mean macro-F1 and mean loss over every valid pair."""
    ds = cache.ds
    pairs = all_pairs(ds, clip_ids, horizon)
    if not pairs:
        raise TrainingError(f"no clip in the split supports horizon {horizon}")
    sq = np.zeros(horizon)
    f1s, losses = [], []
    for b in range(0, len(pairs), batch):
        picks = pairs[b : b + batch]
        x1 = np.stack([cache.frames(c)[t] for c, t in picks])
        x2 = np.stack([cache.frames(c)[t + 1] for c, t in picks])
        logits = predictor(x1, x2, picks)
        probs = _stable_softmax(logits)
        for s in range(horizon):
            z_true = np.stack([cache.targets(c)[t + 1 + s] for c, t in picks])
            losses.append(weighted_cross_entropy(logits[s], z_true, weights).item() * len(picks))
            flow_pred = decode(probs[s], ds.codebook, ds.config.patch)
            for k, (c, t) in enumerate(picks):
                y = ds.normalized_flows(c)[t + 1 + s]
                sq[s] += np.mean((y - flow_pred[k]) ** 2)
                f1s.append(f1_score(z_true[k], probs[s, k]))
    n = len(pairs)
    return FlowEval(float(np.sum(losses) / (n * horizon)), float(np.mean(f1s)), [float(math.sqrt(v / n)) for v in sq])


def zero_flow_rmse(ds: Dataset, clip_ids: list[int], horizon: int) -> list[float]:
    sq = np.zeros(horizon)
    pairs = all_pairs(ds, clip_ids, horizon)
    for c, t in pairs:
        f = ds.normalized_flows(c)
        for s in range(horizon):
            sq[s] += np.mean(f[t + 1 + s] ** 2)
    return [float(math.sqrt(v / len(pairs))) for v in sq]


# training ------------------------------------------------------------------------


def _batch_loss(model, x1, x2, z, weights, horizon):
    outs = model.forward(x1, x2, horizon, training=True)
    total = None
    for s, o in enumerate(outs):
        term = weighted_ce_loss(z[s], o, weights)
        total = term if total is None else total + term
    return total * (1.0 / horizon)


@dataclass
class TrainResult:
    model: MotionModel  # best-F1 weights
    log: MetricLog
    checkpoint: Path | None


def _save_resume(path: Path, model, adam: AdamState, meta: dict) -> None:
    arrays = {f"model.{k}": v for k, v in model.state_arrays().items()}
    names = list(model.params)
    for i, n in enumerate(names):
        if adam.m:
            arrays[f"adam_m.{n}"] = adam.m[i]
            arrays[f"adam_v.{n}"] = adam.v[i]
    meta = {**meta, "adam_step": adam.step}
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    save_arrays(tmp, arrays, meta)
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)


def _load_resume(path: Path, model) -> tuple[AdamState, dict]:
    arrays, meta = load_arrays(path)
    model.load_arrays({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    adam = AdamState(step=meta["adam_step"])
    if f"adam_m.{next(iter(model.params))}" in arrays:
        adam.m = [arrays[f"adam_m.{n}"] for n in model.params]
        adam.v = [arrays[f"adam_v.{n}"] for n in model.params]
    return adam, meta


def train_unsupervised(
    config: TrainConfig,
    dataset: Dataset,
    model: MotionModel,
    out_dir=None,
    resume: bool = False,
) -> TrainResult:
    """Train ``model`` to predict ``config.horizon`` atomic-flow grids from frame pairs.

    Validation runs at step 0 and after every epoch; the rate drops on a
    validation-F1 plateau and the best-F1 weights are kept. With ``out_dir``
    the best model goes to ``checkpoint/``, the latest full state to
    ``resume/`` and the log to ``metrics.csv``.
    """
    config.validate()
    geo = dataset.config
    mc = model.config
    if (mc.height, mc.width, mc.patch, mc.num_classes) != (geo.height, geo.width, geo.patch, dataset.codebook.K):
        raise ValueError(
            f"model geometry {(mc.height, mc.width, mc.patch, mc.num_classes)} does not match dataset "
            f"{(geo.height, geo.width, geo.patch, dataset.codebook.K)}"
        )
    out = Path(out_dir) if out_dir is not None else None
    weights = class_weights(dataset.p_tilde, config.lam).w
    cache = ClipCache(dataset, config.modality)
    train_ids, val_ids = dataset.indices("train"), dataset.indices("val")
    T = config.horizon
    steps_per_epoch = config.steps_per_epoch or max(1, math.ceil(len(all_pairs(dataset, train_ids, T)) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    sched = PlateauScheduler(config.lr, config.plateau_factor, config.patience)
    mlog = MetricLog(T)
    adam = AdamState()
    best = model.copy()
    best_f1 = -math.inf
    step, epoch_loss, epoch_count = 0, 0.0, 0

    def validate(at_step):
        nonlocal best, best_f1
        ev = evaluate_flow(model_predictor(model, T), cache, val_ids, T, weights)
        mlog.add(at_step, "val", ev.loss, ev.f1, ev.rmse, sched.lr)
        sched.step(ev.f1)
        if ev.f1 > best_f1:
            best_f1 = ev.f1
            best = model.copy()
            if out is not None:
                save_model(best, out / "checkpoint", step=at_step, lr=sched.lr, f1=ev.f1, **_codec_ref(dataset, config))

    def snapshot():
        if out is None:
            return
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "step": step,
            "epoch_loss": epoch_loss,
            "epoch_count": epoch_count,
            "scheduler": sched.state(),
            "best_f1": best_f1,
            "log": mlog.rows,
            "train_config": asdict(config),
        }
        _save_resume(out / "resume", model, adam, meta)
        mlog.write(out / "metrics.csv")

    if resume:
        if out is None or not (out / "resume").exists():
            raise TrainingError("resume requested but no resume state found")
        adam, meta = _load_resume(out / "resume", model)
        step, epoch_loss, epoch_count = meta["step"], meta["epoch_loss"], meta["epoch_count"]
        sched.load(meta["scheduler"])
        best_f1 = meta["best_f1"]
        best, _ = load_model(out / "checkpoint")
        mlog.rows = meta["log"]
        log.info("resumed at step %d", step)
    else:
        validate(0)

    params = model.parameters()
    while step < total_steps:
        rng = np.random.default_rng([config.seed, step])
        x1, x2, z, _ = sample_batch(cache, train_ids, config.batch_size, T, rng)
        with Tape() as tape:
            loss = _batch_loss(model, x1, x2, z, weights, T)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}; batch seed ({config.seed}, {step})")
        grads = tape.backward(loss, params)
        adam_step(params, grads, adam, sched.lr, config.weight_decay)
        step += 1
        epoch_loss += value
        epoch_count += 1
        if step % steps_per_epoch == 0:
            mlog.add(step, "train", epoch_loss / epoch_count, float("nan"), None, sched.lr)
            validate(step)
            log.info("step %d train loss %.4f val f1 %.4f lr %.2e", step, epoch_loss / epoch_count, mlog.rows[-1]["f1"], sched.lr)
            epoch_loss, epoch_count = 0.0, 0
            snapshot()

    snapshot()
    return TrainResult(best, mlog, out / "checkpoint" if out is not None else None)


def _codec_ref(ds: Dataset, config: TrainConfig) -> dict:
    return {
        "codec": {"bins_per_axis": ds.codebook.bins_per_axis, "bound": ds.codebook.bound, "k_nn": ds.k_nn},
        "horizon": config.horizon,
        "modality": config.modality,
    }


def eval_flow(checkpoint, dataset: Dataset, split: str = "test", horizon: int | None = None, lam: float = 0.5) -> FlowEval:
    """Evaluate a saved model on ``split``; geometry must match the dataset."""
    model, meta = load_model(checkpoint)
    T = horizon or meta.get("horizon", dataset.config.horizon)
    geo = dataset.config
    mc = model.config
    if (mc.height, mc.width, mc.patch, mc.num_classes) != (geo.height, geo.width, geo.patch, dataset.codebook.K):
        raise ValueError(f"checkpoint {checkpoint} geometry does not match the dataset")
    cache = ClipCache(dataset, meta.get("modality", "depth"))
    weights = class_weights(dataset.p_tilde, lam).w
    return evaluate_flow(model_predictor(model, T), cache, dataset.indices(split), T, weights)


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
