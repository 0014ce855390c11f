"""Recurrent emotion classifiers: MFCC LSTM, CNN+LSTM baselines and the DS-LSTM.

All models consume a :class:`Batch` and produce per-branch logits; a
:class:`Model` combines branches by averaging softmax outputs and averaging
their cross-entropy losses.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import BatchNormState, RunningStats, Tensor

N_CLASSES = 4
VARIANTS = ("base1", "base2", "base3", "base4", "base5", "base6", "ds_only", "dual")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "dual"
    hidden: int = 200
    layers: int = 2
    n_classes: int = N_CLASSES
    seed: int = 0
    mfcc_dim: int = 39
    s1_mels: int = 64
    s2_mels: int = 128
    conv_channels: tuple[int, int] = (64, 16)
    kernel: int = 4
    use_rbn: bool = True
    rbn_position: str = "post_sigmoid"
    rbn_gamma: float = 0.1
    rbn_extrapolate: str = "error"
    average: str = "probs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.n_classes != N_CLASSES:
            raise ModelError("class count is fixed at 4")
        if self.rbn_position not in ("post_sigmoid", "pre_sigmoid"):
            raise ModelError(f"rbn_position must be post_sigmoid or pre_sigmoid, got {self.rbn_position!r}")
        if self.rbn_extrapolate not in ("error", "clamp"):
            raise ModelError(f"rbn_extrapolate must be error or clamp, got {self.rbn_extrapolate!r}")
        if self.average not in ("probs", "logits"):
            raise ModelError(f"average must be probs or logits, got {self.average!r}")
        self.conv_channels = tuple(self.conv_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Batch:
    mfcc: np.ndarray  # B × Tmax × 39, zero padded
    mfcc_lengths: np.ndarray  # B
    s1: np.ndarray  # B × n_mels1 × T1
    s2: np.ndarray  # B × n_mels2 × T2
    labels: np.ndarray  # B
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.labels.shape[0]


class Module:
    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, list) and v and isinstance(v[0], Module):
                for i, m in enumerate(v):
                    yield f"{k}{i}", m

    def own_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Tensor) and v.requires_grad}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_own_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        pass

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.own_parameters().items()}
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}/"))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.own_buffers().items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}/"))
        return out

    def load_buffers(self, bufs: dict[str, np.ndarray], prefix: str = "") -> None:
        own = {k[len(prefix):]: v for k, v in bufs.items() if k.startswith(prefix) and "/" not in k[len(prefix):]}
        self.load_own_buffers(own)
        for name, child in self.children():
            child.load_buffers(bufs, f"{prefix}{name}/")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _weight(seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return tn.uniform_init(tn.child_rng(seed, name), shape, fan_in)


# ---------------------------------------------------------------- normalization


class BatchNorm(Module):
    """Single-slot batch norm applied to ``N×F`` rows."""

    def __init__(self, features: int, gamma: float = 1.0):
        self.state = BatchNormState.create(features, gamma=gamma)
        self.gamma, self.beta = self.state.gamma, self.state.beta

    def __call__(self, x: Tensor) -> Tensor:
        self.state.training = self.training
        return self.state(x)

    def own_buffers(self):
        return {"running_mean": self.state.stats.mean, "running_var": self.state.stats.var}

    def load_own_buffers(self, bufs):
        if "running_mean" in bufs:
            self.state.stats = RunningStats(bufs["running_mean"].copy(), bufs["running_var"].copy(), 1)


class RecurrentBatchNorm(Module):
    """Batch norm with shared gamma/beta and separate running statistics per time step."""

    def __init__(self, features: int, gamma: float = 0.1, extrapolate: str = "error"):
        self.features = features
        self.gamma = Tensor(np.full(features, gamma, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(features, dtype=np.float32), requires_grad=True)
        self.slots: list[RunningStats] = []
        self.extrapolate = extrapolate

    def slot(self, t: int) -> RunningStats:
        if self.training:
            while len(self.slots) <= t:
                self.slots.append(RunningStats.fresh(self.features))
            return self.slots[t]
        if t < len(self.slots):
            return self.slots[t]
        if self.extrapolate == "clamp" and self.slots:
            return self.slots[-1]
        raise ModelError(f"time step {t} beyond the {len(self.slots)} recurrent batch-norm slots learned in training")

    def __call__(self, x: Tensor, t: int) -> Tensor:
        return tn.batchnorm(x, self.gamma, self.beta, self.slot(t), self.training)

    def own_buffers(self):
        out = {}
        for i, s in enumerate(self.slots):
            out[f"slot{i:04d}_mean"] = s.mean
            out[f"slot{i:04d}_var"] = s.var
        return out

    def load_own_buffers(self, bufs):
        n = sum(1 for k in bufs if k.endswith("_mean") and k.startswith("slot"))
        self.slots = [RunningStats(bufs[f"slot{i:04d}_mean"].copy(), bufs[f"slot{i:04d}_var"].copy(), 1) for i in range(n)]


# ---------------------------------------------------------------- standard LSTM


class LstmLayer(Module):
    """One LSTM layer; gate weights are ``H×(D+H)`` acting on ``[x, h]``."""

    GATES = ("i", "f", "o", "g")

    def __init__(self, input_dim: int, hidden: int, seed: int, name: str):
        self.input_dim, self.hidden = input_dim, hidden
        fan_in = input_dim + hidden
        for g in self.GATES:
            setattr(self, f"W_{g}", _weight(seed, f"{name}/W_{g}", (hidden, fan_in), fan_in))
            setattr(self, f"b_{g}", tn.zeros_param((hidden,)))

    def _stacked(self):
        W = tn.transpose(tn.concat([getattr(self, f"W_{g}") for g in self.GATES], axis=0))
        b = tn.concat([getattr(self, f"b_{g}") for g in self.GATES], axis=0)
        D = self.input_dim
        return W[:D], W[D:], b

    def step(self, pre: Tensor, h: Tensor, c: Tensor, W_h: Tensor) -> tuple[Tensor, Tensor]:
        H = self.hidden
        z = pre + h @ W_h
        sig = tn.sigmoid(z[:, : 3 * H])
        i, f, o = sig[:, :H], sig[:, H:2 * H], sig[:, 2 * H:]
        g = tn.tanh(z[:, 3 * H:])
        c = f * c + i * g
        return o * tn.tanh(c), c

    def forward(self, xs: Tensor) -> list[Tensor]:
        """``xs`` is ``T×B×D``; returns the T hidden states (each ``B×H``)."""
        T, B, D = xs.shape
        W_x, W_h, b = self._stacked()
        pre = tn.reshape(tn.add(tn.reshape(xs, (T * B, D)) @ W_x, b), (T, B, 4 * self.hidden))
        h = c = Tensor(np.zeros((B, self.hidden), dtype=xs.dtype))
        hs = []
        for t in range(T):
            h, c = self.step(pre[t], h, c, W_h)
            hs.append(h)
        return hs


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, layer: LstmLayer) -> tuple[Tensor, Tensor]:
    """Single standard LSTM step on ``B×D`` input."""
    W_x, W_h, b = layer._stacked()
    return layer.step(tn.add(x @ W_x, b), h, c, W_h)


# ---------------------------------------------------------------- dual-sequence LSTM


@dataclass
class DsLstmState:
    h: Tensor
    C: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int, dtype=np.float32) -> "DsLstmState":
        z = np.zeros((batch, hidden), dtype=dtype)
        return cls(Tensor(z), Tensor(z.copy()))


class DsLstmLayer(Module):
    """Six-gated cell over two aligned input streams ``x`` (dx) and ``y`` (dy).

    Forget, both input and output gates see ``[x, y, h]`` and pass through a
    per-gate recurrent batch norm; the two candidate cells see ``[x, h]`` and
    ``[y, h]`` respectively.
    """

    NORMED = ("f", "iT", "iF", "o")

    def __init__(self, dx: int, dy: int, hidden: int, seed: int, name: str, cfg: ModelConfig):
        self.dx, self.dy, self.hidden = dx, dy, hidden
        self.use_rbn = cfg.use_rbn
        self.rbn_position = cfg.rbn_position
        full = dx + dy + hidden
        for g in self.NORMED:
            setattr(self, f"W_{g}", _weight(seed, f"{name}/W_{g}", (hidden, full), full))
        self.W_T = _weight(seed, f"{name}/W_T", (hidden, dx + hidden), dx + hidden)
        self.W_F = _weight(seed, f"{name}/W_F", (hidden, dy + hidden), dy + hidden)
        for g in (*self.NORMED, "T", "F"):
            setattr(self, f"b_{g}", tn.zeros_param((hidden,)))
        if self.use_rbn:
            for g in self.NORMED:
                setattr(self, f"rbn_{g}", RecurrentBatchNorm(hidden, cfg.rbn_gamma, cfg.rbn_extrapolate))
        self.out_bn = BatchNorm(hidden)

    def weight_names(self) -> list[str]:
        return [f"W_{g}" for g in (*self.NORMED, "T", "F")]

    def projections(self):
        """Split every weight into its input part and its recurrent part.

        Returns ``(W_xy, W_Tx, W_Fy, W_h, b)`` where one ``h @ W_h`` yields all
        six recurrent contributions, ordered f, iT, iF, o, T, F.
        """
        dx, dy = self.dx, self.dy
        Wg = tn.transpose(tn.concat([getattr(self, f"W_{g}") for g in self.NORMED], axis=0))
        WT, WF = tn.transpose(self.W_T), tn.transpose(self.W_F)
        W_h = tn.concat([Wg[dx + dy:], WT[dx:], WF[dy:]], axis=1)
        b = tn.concat([getattr(self, f"b_{g}") for g in (*self.NORMED, "T", "F")], axis=0)
        return Wg[: dx + dy], WT[:dx], WF[:dy], W_h, b

    def input_preactivations(self, x: Tensor, y: Tensor, proj) -> Tensor:
        """``N×dx`` and ``N×dy`` rows → ``N×6H`` input contributions plus biases."""
        W_xy, W_Tx, W_Fy, _, b = proj
        gates = tn.concat([x, y], axis=1) @ W_xy
        return tn.add(tn.concat([gates, x @ W_Tx, y @ W_Fy], axis=1), b)

    def _gate(self, z: Tensor, name: str, t: int) -> Tensor:
        if not self.use_rbn:
            return tn.sigmoid(z)
        rbn = getattr(self, f"rbn_{name}")
        if self.rbn_position == "post_sigmoid":
            return rbn(tn.sigmoid(z), t)
        return tn.sigmoid(rbn(z, t))

    def step(self, pre: Tensor, prev: DsLstmState, W_h: Tensor, t: int) -> DsLstmState:
        H = self.hidden
        z = pre + prev.h @ W_h
        f, i_T, i_F, o = (self._gate(z[:, k * H:(k + 1) * H], g, t) for k, g in enumerate(self.NORMED))
        cand = tn.tanh(z[:, 4 * H:])
        C_T, C_F = cand[:, :H], cand[:, H:]
        C = f * prev.C + i_T * C_T + i_F * C_F
        return DsLstmState(o * tn.tanh(C), C)

    def forward(self, xs: Tensor, ys: Tensor) -> Tensor:
        """``T×B×dx`` and ``T×B×dy`` → batch-normalized hidden states ``T×B×H``."""
        T, B, _ = xs.shape
        if ys.shape[:2] != (T, B):
            raise ModelError(f"DS-LSTM inputs disagree in length/batch: {xs.shape} vs {ys.shape}")
        proj = self.projections()
        pre = self.input_preactivations(
            tn.reshape(xs, (T * B, self.dx)), tn.reshape(ys, (T * B, self.dy)), proj
        )
        pre = tn.reshape(pre, (T, B, 6 * self.hidden))
        state = DsLstmState.zeros(B, self.hidden, xs.dtype)
        hs = []
        for t in range(T):
            state = self.step(pre[t], state, proj[3], t)
            hs.append(state.h)
        flat = tn.reshape(tn.stack(hs, axis=0), (T * B, self.hidden))
        return tn.reshape(self.out_bn(flat), (T, B, self.hidden))


def ds_lstm_cell(x_t: Tensor, y_t: Tensor, prev: DsLstmState, layer: DsLstmLayer, t: int = 0) -> DsLstmState:
    """One DS-LSTM step for ``B×dx`` / ``B×dy`` inputs at time index ``t``."""
    proj = layer.projections()
    return layer.step(layer.input_preactivations(x_t, y_t, proj), prev, proj[3], t)


# ---------------------------------------------------------------- CNN + alignment


def _pool_out(n: int, k: int) -> int:
    return (n - k + 1) // 2


def cnn_output_size(n: int, kernel: int = 4) -> int:
    """Length of one spatial axis after conv→pool→conv→pool."""
    return _pool_out(_pool_out(n, kernel), kernel)


def cnn_min_input(kernel: int = 4) -> int:
    n = 1
    while cnn_output_size(n, kernel) < 1 or _pool_out(n, kernel) < kernel:
        n += 1
    return n


class CnnBlock(Module):
    """conv(4×4) → maxpool(2×2) → conv(4×4) → maxpool(2×2), no padding."""

    def __init__(self, channels: tuple[int, int], kernel: int, seed: int, name: str):
        c1, c2 = channels
        self.kernel = kernel
        self.K1 = _weight(seed, f"{name}/K1", (c1, 1, kernel, kernel), kernel * kernel)
        self.K2 = _weight(seed, f"{name}/K2", (c2, c1, kernel, kernel), c1 * kernel * kernel)

    def feature_dim(self, n_mels: int) -> int:
        return self.K2.shape[0] * cnn_output_size(n_mels, self.kernel)

    def forward(self, spec: np.ndarray) -> Tensor:
        """``B×F×T`` spectrograms → ``T'×B×(channels·F')`` feature sequence."""
        B, F, T = spec.shape
        need = cnn_min_input(self.kernel)
        if F < need or T < need:
            raise ModelError(f"spectrogram too small: {F}×{T}, both axes need at least {need}")
        x = Tensor(spec[:, None, :, :])
        x = tn.maxpool2d(tn.conv2d(x, self.K1))
        x = tn.maxpool2d(tn.conv2d(x, self.K2))
        _, C, Fp, Tp = x.shape
        x = tn.permute(x, (3, 0, 1, 2))  # T' × B × C × F'
        return tn.reshape(x, (Tp, B, C * Fp))


def align_time(xs: Tensor, ys: Tensor) -> tuple[Tensor, Tensor]:
    """Average adjacent steps of ``xs`` (time-major) then truncate both to a common length."""
    T1, T2 = xs.shape[0], ys.shape[0]
    if T1 < 2 or T2 < 1:
        raise ModelError(f"align_time needs T1 >= 2 and T2 >= 1, got T1={T1}, T2={T2}")
    half = T1 // 2
    paired = tn.scale(tn.add(xs[0:2 * half:2], xs[1:2 * half:2]), 0.5)
    if T1 % 2:
        paired = tn.concat([paired, xs[T1 - 1:T1]], axis=0)
    T3 = min(paired.shape[0], T2)
    return paired[:T3], ys[:T3]


# ---------------------------------------------------------------- branches


class Classifier(Module):
    def __init__(self, dim: int, n_classes: int, seed: int, name: str):
        self.W = _weight(seed, f"{name}/W", (n_classes, dim), dim)
        self.b = tn.zeros_param((n_classes,))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.add(x @ tn.transpose(self.W), self.b)


def _mean_time(seq: Tensor) -> Tensor:
    return tn.mean(seq, axis=0)


class LstmBranch(Module):
    """Two-layer LSTM with mean pooling over time; optionally fed by a CNN block."""

    def __init__(self, source: str, cfg: ModelConfig, name: str):
        self.source = source
        self.cnn = None
        if source == "mfcc":
            dim = cfg.mfcc_dim
        else:
            self.cnn = CnnBlock(cfg.conv_channels, cfg.kernel, cfg.seed, f"{name}/cnn")
            dim = self.cnn.feature_dim(cfg.s1_mels if source == "s1" else cfg.s2_mels)
        self.lstm = []
        for k in range(cfg.layers):
            self.lstm.append(LstmLayer(dim, cfg.hidden, cfg.seed, f"{name}/lstm{k}"))
            dim = cfg.hidden
        self.classifier = Classifier(dim, cfg.n_classes, cfg.seed, f"{name}/classifier")

    def forward(self, batch: Batch) -> Tensor:
        if self.source == "mfcc":
            seq = Tensor(np.ascontiguousarray(batch.mfcc.transpose(1, 0, 2)))
            lengths = np.asarray(batch.mfcc_lengths)
            if np.any(lengths < 1):
                raise ModelError("empty MFCC sequence in batch")
        else:
            seq = self.cnn.forward(batch.s1 if self.source == "s1" else batch.s2)
            lengths = None
        for layer in self.lstm:
            seq = tn.stack(layer.forward(seq), axis=0)
        if lengths is None:
            pooled = _mean_time(seq)
        else:
            # padded steps trail the valid ones, so they never feed back into valid outputs
            T, B, H = seq.shape
            mask = (np.arange(T)[:, None] < lengths[None, :]).astype(seq.dtype)
            masked = tn.mul(seq, Tensor(np.broadcast_to(mask[:, :, None], (T, B, H)).copy()))
            inv_len = np.broadcast_to((1.0 / lengths)[:, None], (B, H)).astype(seq.dtype)
            pooled = tn.mul(tn.sum(masked, axis=0), Tensor(inv_len))
        return self.classifier(pooled)


class DsLstmBranch(Module):
    """Two CNN blocks, time alignment, stacked DS-LSTM layers, mean pooling."""

    def __init__(self, cfg: ModelConfig, name: str):
        self.cnn_s1 = CnnBlock(cfg.conv_channels, cfg.kernel, cfg.seed, f"{name}/cnn_s1")
        self.cnn_s2 = CnnBlock(cfg.conv_channels, cfg.kernel, cfg.seed, f"{name}/cnn_s2")
        dx, dy = self.cnn_s1.feature_dim(cfg.s1_mels), self.cnn_s2.feature_dim(cfg.s2_mels)
        self.ds = []
        for k in range(cfg.layers):
            self.ds.append(DsLstmLayer(dx, dy, cfg.hidden, cfg.seed, f"{name}/ds{k}", cfg))
            dx = dy = cfg.hidden
        self.classifier = Classifier(dx, cfg.n_classes, cfg.seed, f"{name}/classifier")

    def forward(self, batch: Batch) -> Tensor:
        xs, ys = align_time(self.cnn_s1.forward(batch.s1), self.cnn_s2.forward(batch.s2))
        for layer in self.ds:
            out = layer.forward(xs, ys)
            # the upper layer sees the normalized hidden sequence as both streams
            xs = ys = out
        return self.classifier(_mean_time(xs))


# ---------------------------------------------------------------- full model

_LAYOUT = {
    "base1": [("lstm_mfcc", 1.0)],
    "base2": [("cnnlstm_s1", 1.0)],
    "base3": [("cnnlstm_s2", 1.0)],
    "base4": [("cnnlstm_s1", 0.5), ("cnnlstm_s2", 0.5)],
    "base5": [("lstm_mfcc", 0.5), ("cnnlstm_s1", 0.25), ("cnnlstm_s2", 0.25)],
    "base6": [("lstm_mfcc", 0.5), ("cnnlstm_s1", 0.5)],
    "ds_only": [("dslstm", 1.0)],
    "dual": [("lstm_mfcc", 0.5), ("dslstm", 0.5)],
}


def _make_branch(name: str, cfg: ModelConfig) -> Module:
    if name == "lstm_mfcc":
        return LstmBranch("mfcc", cfg, name)
    if name == "cnnlstm_s1":
        return LstmBranch("s1", cfg, name)
    if name == "cnnlstm_s2":
        return LstmBranch("s2", cfg, name)
    if name == "dslstm":
        return DsLstmBranch(cfg, name)
    raise ModelError(f"unknown branch {name!r}")


@dataclass
class ForwardResult:
    probs: np.ndarray
    loss: Tensor | None
    logits: dict[str, Tensor]

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


class InputNorm(Module):
    """Per-feature standardization fitted on training data (identity until fitted)."""

    KEYS = ("mfcc", "s1", "s2")

    def __init__(self, cfg: ModelConfig):
        dims = {"mfcc": cfg.mfcc_dim, "s1": cfg.s1_mels, "s2": cfg.s2_mels}
        self.stats = {k: (np.zeros(d, np.float32), np.ones(d, np.float32)) for k, d in dims.items()}

    def own_buffers(self):
        out = {}
        for k, (m, s) in self.stats.items():
            out[f"{k}_mean"], out[f"{k}_std"] = m, s
        return out

    def load_own_buffers(self, bufs):
        for k in self.KEYS:
            if f"{k}_mean" in bufs:
                self.stats[k] = (bufs[f"{k}_mean"].astype(np.float32), bufs[f"{k}_std"].astype(np.float32))

    def apply(self, batch: Batch) -> Batch:
        m, s = self.stats["mfcc"]
        T = batch.mfcc.shape[1]
        valid = (np.arange(T)[None, :] < np.asarray(batch.mfcc_lengths)[:, None])[:, :, None]
        mfcc = np.where(valid, (batch.mfcc - m) / s, 0.0).astype(np.float32)
        m1, s1 = self.stats["s1"]
        m2, s2 = self.stats["s2"]
        return Batch(
            mfcc,
            batch.mfcc_lengths,
            ((batch.s1 - m1[:, None]) / s1[:, None]).astype(np.float32),
            ((batch.s2 - m2[:, None]) / s2[:, None]).astype(np.float32),
            batch.labels,
            batch.ids,
        )


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        self.weights = {name: w for name, w in _LAYOUT[cfg.variant]}
        self.branches = {name: _make_branch(name, cfg) for name in self.weights}
        self.input_norm = InputNorm(cfg)

    def children(self):
        yield from self.branches.items()
        yield "input_norm", self.input_norm

    def check_inputs(self, batch: Batch) -> None:
        cfg = self.config
        if batch.mfcc.ndim != 3 or batch.mfcc.shape[2] != cfg.mfcc_dim:
            raise ModelError(f"tensor 'mfcc' has shape {batch.mfcc.shape}, model expects B×T×{cfg.mfcc_dim}")
        for key, rows in (("s1", cfg.s1_mels), ("s2", cfg.s2_mels)):
            arr = getattr(batch, key)
            if arr.ndim != 3 or arr.shape[1] != rows:
                raise ModelError(f"tensor '{key}' has shape {arr.shape}, model expects B×{rows}×T")

    def forward(self, batch: Batch, with_loss: bool = True) -> ForwardResult:
        self.check_inputs(batch)
        batch = self.input_norm.apply(batch)
        logits = {name: br.forward(batch) for name, br in self.branches.items()}
        names = list(logits)
        if self.config.average == "logits" and len(names) > 1:
            avg = sum(self.weights[n] * logits[n].data for n in names)
            probs = tn._softmax(avg)
        else:
            probs = sum(self.weights[n] * tn._softmax(logits[n].data) for n in names)
        loss = None
        if with_loss:
            terms = [tn.scale(tn.cross_entropy(logits[n], batch.labels), self.weights[n]) for n in names]
            loss = terms[0]
            for term in terms[1:]:
                loss = tn.add(loss, term)
        return ForwardResult(np.asarray(probs), loss, logits)

    def parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()


def build_variant(cfg: ModelConfig) -> Model:
    return Model(cfg)


def combine_branch_outputs(logits: list[np.ndarray], labels, weights=None) -> tuple[np.ndarray, float]:
    """Weighted average of branch softmaxes and of branch cross-entropies."""
    weights = [1.0 / len(logits)] * len(logits) if weights is None else weights
    probs = sum(w * tn._softmax(np.asarray(l)) for w, l in zip(weights, logits))
    loss = sum(w * tn.cross_entropy(Tensor(np.asarray(l)), labels).item() for w, l in zip(weights, logits))
    return probs, float(loss)


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.named_parameters().values()))


def parameter_table(model: Model) -> list[tuple[str, int]]:
    """Learnable-scalar counts grouped by branch and layer."""
    groups: dict[str, int] = {}
    for name, p in model.named_parameters().items():
        parts = name.split("/")
        key = "/".join(parts[:2]) if len(parts) > 2 else parts[0]
        groups[key] = groups.get(key, 0) + p.size
    return list(groups.items())


def ds_layer_closed_form(hidden: int, dx: int, dy: int) -> int:
    """Weights and biases of one DS-LSTM layer, excluding normalization parameters."""
    H = hidden
    return 4 * H * (dx + dy + H) + H * (dx + H) + H * (dy + H) + 6 * H
