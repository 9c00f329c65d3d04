"""Conv -> ConvLSTM encoder, ConvLSTM -> Deconv decoder over atomic-flow logits."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import atf
from .autodiff import Tensor, concat, relu, sigmoid, tanh
from .layers import BatchNormState, batch_norm, conv2d, conv2d_transpose

MODALITY_CHANNELS = {"depth": [3], "rgb": [0, 1, 2], "rgbd": [0, 1, 2, 3]}


def select_modality(frames: np.ndarray, modality: str) -> np.ndarray:
    """Pick input channels from (..., 4) RGB-D frames."""
    try:
        chans = MODALITY_CHANNELS[modality]
    except KeyError:
        raise ValueError(f"unknown modality {modality!r}; expected one of {sorted(MODALITY_CHANNELS)}") from None
    return np.ascontiguousarray(frames[..., chans])


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 1
    enc_filters: tuple = (16, 32, 32)
    rep_channels: int = 32
    lstm_channels: int = 32
    patch: int = 4
    num_classes: int = 125
    dec_channels: int = 32
    dec_layers: int = 3  # including the final 1x1 projection to class logits

    @property
    def rep_size(self) -> tuple[int, int]:
        f = 2 ** len(self.enc_filters)
        return self.height // f, self.width // f

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    def deconv_strides(self) -> list[int]:
        (fh, fw), (gh, gw) = self.rep_size, self.grid_size
        if gh % fh or gw % fw or gh // fh != gw // fw:
            raise ValueError(f"cannot upsample {fh}x{fw} to {gh}x{gw} with integer strides")
        factor = gh // fh
        ups = int(round(math.log2(factor)))
        if 2**ups != factor:
            raise ValueError(f"upsampling factor {factor} is not a power of two")
        n_deconv = self.dec_layers - 1
        if ups > n_deconv:
            raise ValueError(f"{n_deconv} deconv layers cannot upsample by {factor}")
        return [2] * ups + [1] * (n_deconv - ups)

    def validate(self) -> None:
        f = 2 ** len(self.enc_filters)
        if self.height % f or self.width % f:
            raise ValueError(f"input {self.height}x{self.width} not divisible by encoder downsampling {f}")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"input {self.height}x{self.width} not divisible by patch size {self.patch}")
        self.deconv_strides()

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["enc_filters"] = tuple(d["enc_filters"])
        return cls(**d)


@dataclass
class LSTMState:
    h: Tensor
    c: Tensor


def _uniform(rng, shape, fan_in):
    s = math.sqrt(3.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


class MotionModel:
    """Pair-of-frames encoder plus unrolled atomic-flow decoder.

    Parameters live in ``self.params`` (name -> Tensor, insertion ordered);
    batch-norm running statistics live in ``self.bn``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        cfg = config

        cin = cfg.in_channels
        for i, cout in enumerate(cfg.enc_filters):
            self._conv(rng, f"enc.conv{i}", 3, 3, cin, cout)
            self._bn(f"enc.bn{i}", cout)
            cin = cout
        self._conv(rng, "enc.proj", 1, 1, cin, cfg.rep_channels)
        self._bn("enc.proj_bn", cfg.rep_channels)

        for name in ("enc_lstm", "dec_lstm"):
            ch = cfg.lstm_channels
            fan = 9 * (cfg.rep_channels + ch)
            self._add(f"{name}.kernel", _uniform(rng, (3, 3, cfg.rep_channels + ch, 4 * ch), fan))
            bias = np.zeros(4 * ch)
            bias[ch : 2 * ch] = 1.0  # forget gate
            self._add(f"{name}.bias", bias)

        cin = cfg.lstm_channels
        for i, stride in enumerate(cfg.deconv_strides()):
            k = 4 if stride == 2 else 3
            self._add(f"dec.deconv{i}", _uniform(rng, (k, k, cfg.dec_channels, cin), k * k * cin))
            self._bn(f"dec.bn{i}", cfg.dec_channels)
            cin = cfg.dec_channels
        self._conv(rng, "dec.logits", 1, 1, cin, cfg.num_classes)
        self._add("dec.logits_bias", np.zeros(cfg.num_classes))

    # construction helpers
    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _conv(self, rng, name, kh, kw, cin, cout):
        self._add(name, _uniform(rng, (kh, kw, cin, cout), kh * kw * cin))

    def _bn(self, name, ch):
        self._add(f"{name}.gamma", np.ones(ch))
        self._add(f"{name}.beta", np.zeros(ch))
        self.bn[name] = BatchNormState(ch)

    def _norm(self, x, name, training):
        p = self.params
        return batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], training)

    # parameter groups
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("enc.", "enc_lstm."))]

    def encoder_parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.encoder_names()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # forward pieces
    def downsample(self, x, training: bool = True) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.height, cfg.width, cfg.in_channels):
            raise ValueError(
                f"downsample expects (N, {cfg.height}, {cfg.width}, {cfg.in_channels}) input, got {x.shape}"
            )
        for i in range(len(cfg.enc_filters)):
            x = relu(self._norm(conv2d(x, self.params[f"enc.conv{i}"], stride=2), f"enc.bn{i}", training))
        return self._norm(conv2d(x, self.params["enc.proj"]), "enc.proj_bn", training)

    def zero_state(self, n: int) -> LSTMState:
        fh, fw = self.config.rep_size
        z = np.zeros((n, fh, fw, self.config.lstm_channels))
        return LSTMState(Tensor(z), Tensor(z))

    def convlstm_step(self, x: Tensor | None, state: LSTMState, which: str = "enc_lstm") -> LSTMState:
        """One ConvLSTM update; ``x=None`` means an all-zero input."""
        kernel = self.params[f"{which}.kernel"]
        ch = self.config.lstm_channels
        if x is None:
            z = conv2d(state.h, kernel[:, :, -ch:, :])
        else:
            z = conv2d(concat([x, state.h], axis=-1), kernel)
        z = z + self.params[f"{which}.bias"]
        i = sigmoid(z[..., :ch])
        f = sigmoid(z[..., ch : 2 * ch])
        o = sigmoid(z[..., 2 * ch : 3 * ch])
        g = tanh(z[..., 3 * ch :])
        c = f * state.c + i * g
        return LSTMState(o * tanh(c), c)

    def encode_pair(self, x1, x2, training: bool = True) -> LSTMState:
        """Run both frames through the downsampler, then two encoder LSTM steps."""
        x1 = x1.data if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float64)
        x2 = x2.data if isinstance(x2, Tensor) else np.asarray(x2, dtype=np.float64)
        if x1.shape != x2.shape:
            raise ValueError(f"frame pair shapes differ: {x1.shape} vs {x2.shape}")
        n = x1.shape[0]
        feats = self.downsample(np.concatenate([x1, x2]), training)
        state = self.zero_state(n)
        state = self.convlstm_step(feats[:n], state, "enc_lstm")
        return self.convlstm_step(feats[n:], state, "enc_lstm")

    def upsample(self, h: Tensor, training: bool = True) -> Tensor:
        x = h
        for i, stride in enumerate(self.config.deconv_strides()):
            x = relu(self._norm(conv2d_transpose(x, self.params[f"dec.deconv{i}"], stride), f"dec.bn{i}", training))
        return conv2d(x, self.params["dec.logits"]) + self.params["dec.logits_bias"]

    def decode_sequence(self, state: LSTMState, T: int, training: bool = True) -> list[Tensor]:
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        out = []
        for _ in range(T):
            state = self.convlstm_step(None, state, "dec_lstm")
            out.append(self.upsample(state.h, training))
        return out

    def forward(self, x1, x2, T: int, training: bool = True) -> list[Tensor]:
        return self.decode_sequence(self.encode_pair(x1, x2, training), T, training)

    def representation(self, x1, x2) -> np.ndarray:
        """Eval-mode encoder hidden state, (N, f, f, c)."""
        return self.encode_pair(x1, x2, training=False).h.data

    # persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        for n, s in self.bn.items():
            out[f"{n}.running_mean"] = s.mean
            out[f"{n}.running_var"] = s.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            if arrays[n].shape != p.shape:
                raise ValueError(f"checkpoint tensor {n} has shape {arrays[n].shape}, model expects {p.shape}")
            p.data = np.array(arrays[n])
        for n, s in self.bn.items():
            s.mean = np.array(arrays[f"{n}.running_mean"])
            s.var = np.array(arrays[f"{n}.running_var"])

    def copy(self) -> "MotionModel":
        other = MotionModel.__new__(MotionModel)
        other.config = self.config
        other.params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        other.bn = {}
        for n, s in self.bn.items():
            b = BatchNormState(s.mean.size, s.momentum, s.eps)
            b.mean, b.var = s.mean.copy(), s.var.copy()
            other.bn[n] = b
        return other


def save_arrays(directory: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        atf.save(d / f"{name}.atf", arr)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_arrays(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    arrays = {p.name[: -len(".atf")]: atf.load(p) for p in sorted(d.glob("*.atf"))}
    return arrays, meta


def save_model(model: MotionModel, directory, **meta) -> Path:
    meta = {"config": asdict(model.config), **meta}
    return save_arrays(directory, model.state_arrays(), meta)


def load_model(directory) -> tuple[MotionModel, dict]:
    arrays, meta = load_arrays(directory)
    model = MotionModel(ModelConfig.from_dict(meta["config"]))
    model.load_arrays(arrays)
    return model, meta
