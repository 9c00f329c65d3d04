"""Activity classification on top of the pair encoder."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, as_tensor, matmul, softmax
from .layers import cross_entropy
from .model import MotionModel, ModelConfig, load_arrays, save_arrays, select_modality
from .optim import AdamState, adam_step
from .synth import Dataset


class Scenario(str, enum.Enum):
    ARCHITECTURE_ONLY = "architecture_only"
    FINETUNE = "finetune"
    FROZEN = "frozen"


@dataclass
class ClsConfig:
    batch_size: int = 8
    lr: float = 1e-4
    encoder_lr: float = 1e-5  # finetune only
    decay_rate: float = 0.96
    decay_steps: int = 2000
    steps: int = 2000
    weight_decay: float = 5e-4
    modality: str = "depth"
    seed: int = 0
    head_seed: int = 0


def staircase_lr(base: float, step: int, rate: float = 0.96, every: int = 2000) -> float:
    return base * rate ** (step // every)


class ClassifierHead:
    """Single affine layer from the flattened representation to class logits."""

    def __init__(self, in_features: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        s = math.sqrt(3.0 / in_features)
        self.weight = Tensor(rng.uniform(-s, s, (in_features, num_classes)), requires_grad=True, name="head.weight")
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True, name="head.bias")

    @property
    def num_classes(self) -> int:
        return self.bias.size

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, rep) -> Tensor:
        rep = as_tensor(rep)
        flat = rep.reshape(rep.shape[0], -1)
        return matmul(flat, self.weight) + self.bias


@dataclass
class ClsLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "accuracy", "lr"])
        for r in self.rows:
            w.writerow([r["step"], repr(r["loss"]), repr(r["accuracy"]), repr(r["lr"])])
        return buf.getvalue()


@dataclass
class Classifier:
    encoder: MotionModel
    head: ClassifierHead
    scenario: Scenario
    modality: str
    log: ClsLog

    def scores(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Eval-mode class probabilities for a batch of frame pairs."""
        rep = self.encoder.encode_pair(x1, x2, training=False).h
        return softmax(self.head(rep)).data


def _pair_count(clip_frames: np.ndarray) -> int:
    return clip_frames.shape[0] - 1


def train_classifier(
    scenario: Scenario | str,
    dataset: Dataset,
    pretrained: MotionModel | None = None,
    config: ClsConfig = ClsConfig(),
    model_config: ModelConfig | None = None,
) -> Classifier:
    """Train a classification head (and, unless frozen, the encoder) on activity labels.

    Each batch draws ``batch_size`` distinct training clips (with replacement
    only if there are fewer clips) and one random consecutive pair from each.
    """
    scenario = Scenario(scenario)
    if scenario is not Scenario.ARCHITECTURE_ONLY and pretrained is None:
        raise ValueError(f"scenario {scenario.value} needs a pretrained encoder")
    if scenario is Scenario.ARCHITECTURE_ONLY:
        if model_config is None:
            model_config = pretrained.config if pretrained is not None else None
        if model_config is None:
            raise ValueError("architecture_only needs a model_config or a pretrained model for its shape")
        encoder = MotionModel(model_config, seed=config.seed)
    else:
        encoder = pretrained.copy()

    labels_all = sorted({c.label for c in dataset.clips})
    num_classes = max(labels_all) + 1
    fh, fw = encoder.config.rep_size
    head = ClassifierHead(fh * fw * encoder.config.lstm_channels, num_classes, seed=config.head_seed)

    train_ids = dataset.indices("train")
    frames = {i: select_modality(dataset.clips[i].frames, config.modality) for i in train_ids}
    enc_params = encoder.encoder_parameters()
    head_params = head.parameters()
    if scenario is Scenario.FROZEN:
        params, base_rates = head_params, [config.lr] * len(head_params)
    elif scenario is Scenario.FINETUNE:
        params = enc_params + head_params
        base_rates = [config.encoder_lr] * len(enc_params) + [config.lr] * len(head_params)
    else:
        params = enc_params + head_params
        base_rates = [config.lr] * len(params)

    feature_cache: dict[tuple[int, int], np.ndarray] = {}
    adam = AdamState()
    clog = ClsLog()
    rng = np.random.default_rng(config.seed)
    window_loss, window_acc, window_n = 0.0, 0.0, 0
    for step in range(config.steps):
        replace = len(train_ids) < config.batch_size
        chosen = rng.choice(len(train_ids), size=config.batch_size, replace=replace)
        picks = []
        for j in chosen:
            c = train_ids[int(j)]
            picks.append((c, int(rng.integers(_pair_count(frames[c])))))
        labels = np.array([dataset.clips[c].label for c, _ in picks])

        with Tape() as tape:
            if scenario is Scenario.FROZEN:
                missing = [p for p in picks if p not in feature_cache]
                if missing:
                    x1 = np.stack([frames[c][t] for c, t in missing])
                    x2 = np.stack([frames[c][t + 1] for c, t in missing])
                    reps = encoder.representation(x1, x2)
                    for p, r in zip(missing, reps):
                        feature_cache[p] = r
                rep = Tensor(np.stack([feature_cache[p] for p in picks]))
            else:
                x1 = np.stack([frames[c][t] for c, t in picks])
                x2 = np.stack([frames[c][t + 1] for c, t in picks])
                rep = encoder.encode_pair(x1, x2, training=True).h
            logits = head(rep)
            loss = cross_entropy(logits, labels)
        grads = tape.backward(loss, params)
        rates = [staircase_lr(r, step, config.decay_rate, config.decay_steps) for r in base_rates]
        adam_step(params, grads, adam, rates, config.weight_decay)

        window_loss += loss.item()
        window_acc += float(np.mean(logits.data.argmax(axis=1) == labels))
        window_n += 1
        if (step + 1) % 100 == 0 or step + 1 == config.steps:
            clog.rows.append(
                {
                    "step": step + 1,
                    "loss": window_loss / window_n,
                    "accuracy": window_acc / window_n,
                    "lr": staircase_lr(config.lr, step, config.decay_rate, config.decay_steps),
                }
            )
            window_loss, window_acc, window_n = 0.0, 0.0, 0
    return Classifier(encoder, head, scenario, config.modality, clog)


def pair_positions(n_frames: int, num_samples: int = 25) -> np.ndarray:
    """Uniformly spaced, deduplicated pair starts in [0, n_frames - 2]."""
    if n_frames < 2:
        raise ValueError(f"clip needs at least 2 frames, got {n_frames}")
    return np.unique(np.round(np.linspace(0, n_frames - 2, num_samples)).astype(int))


def classify_video(clip_frames: np.ndarray, classifier: Classifier, num_samples: int = 25) -> tuple[np.ndarray, int]:
    """Average post-softmax scores over up to ``num_samples`` frame pairs of one clip.

    ``clip_frames`` are raw RGB-D frames (L, H, W, 4).
    """
    frames = select_modality(np.asarray(clip_frames, dtype=np.float64), classifier.modality)
    pos = pair_positions(frames.shape[0], num_samples)
    probs = classifier.scores(frames[pos], frames[pos + 1])
    avg = probs.mean(axis=0)
    return avg, int(np.argmax(avg))


@dataclass
class ClsEval:
    accuracy: float  # mean per-class accuracy
    per_class: np.ndarray
    confusion: np.ndarray  # rows: true class, cols: predicted

    def confusion_csv(self) -> str:
        n = self.confusion.shape[0]
        lines = ["true\\pred," + ",".join(str(j) for j in range(n))]
        for i in range(n):
            lines.append(f"{i}," + ",".join(str(int(v)) for v in self.confusion[i]))
        return "\n".join(lines) + "\n"


def eval_classifier(classifier: Classifier, dataset: Dataset, split: str = "test", num_samples: int = 25) -> ClsEval:
    n = classifier.head.num_classes
    conf = np.zeros((n, n), dtype=np.int64)
    for i in dataset.indices(split):
        clip = dataset.clips[i]
        _, pred = classify_video(clip.frames, classifier, num_samples)
        conf[clip.label, pred] += 1
    return confusion_summary(conf)


def confusion_summary(conf: np.ndarray) -> ClsEval:
    counts = conf.sum(axis=1)
    if np.any(counts == 0):
        empty = [int(k) for k in np.flatnonzero(counts == 0)]
        raise ValueError(f"classes {empty} have no clips in the evaluation split")
    per_class = np.diag(conf) / counts
    return ClsEval(float(per_class.mean()), per_class, conf)


def save_classifier(clf: Classifier, directory, **meta) -> Path:
    arrays = {f"encoder.{k}": v for k, v in clf.encoder.state_arrays().items()}
    arrays["head.weight"] = clf.head.weight.data
    arrays["head.bias"] = clf.head.bias.data
    meta = {"config": asdict(clf.encoder.config), "scenario": clf.scenario.value, "modality": clf.modality, **meta}
    return save_arrays(directory, arrays, meta)


def load_classifier(directory) -> Classifier:
    arrays, meta = load_arrays(directory)
    encoder = MotionModel(ModelConfig.from_dict(meta["config"]))
    encoder.load_arrays({k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")})
    w = arrays["head.weight"]
    head = ClassifierHead(w.shape[0], w.shape[1])
    head.weight.data, head.bias.data = w, arrays["head.bias"]
    return Classifier(encoder, head, Scenario(meta["scenario"]), meta["modality"], ClsLog())
