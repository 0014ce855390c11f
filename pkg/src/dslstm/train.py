"""Adam, k-fold cross-validation, WA/UA metrics and the per-fold training loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .dataset_io import LABELS, FeatureRecord, read_checkpoint, write_checkpoint
from .model import Batch, Model, ModelConfig, build_variant

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, tn.Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update using each parameter's ``.grad`` (missing grads count as zero)."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
        grads[name] = g
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


def clip_grad_norm(params: dict[str, tn.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        k = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(k)
    return total


# ---------------------------------------------------------------- folds


@dataclass
class FoldPlan:
    k: int
    strategy: str
    folds: list[tuple[list[str], list[str]]]  # (train ids, test ids)


def make_folds(ids, labels, k: int = 5, strategy: str = "stratified_random", seed: int = 0, groups=None) -> FoldPlan:
    ids, labels = [str(i) for i in ids], list(labels)
    if k < 2:
        raise ValueError(f"need at least 2 folds, got k={k}")
    if len(ids) < k:
        raise ValueError(f"dataset of {len(ids)} items cannot be split into {k} folds")
    if len(set(ids)) != len(ids):
        raise ValueError("utterance ids must be unique")
    rng = np.random.default_rng(seed)
    assign: dict[str, int] = {}
    if strategy == "stratified_random":
        counter = 0
        for c in sorted(set(labels)):
            members = sorted(i for i, l in zip(ids, labels) if l == c)
            if len(members) < k:
                log.warning("class %s has %d members, fewer than %d folds", c, len(members), k)
            for uid in rng.permutation(members):
                assign[str(uid)] = counter % k
                counter += 1
    elif strategy == "by_group":
        if groups is None:
            raise ValueError("by_group strategy needs a group key per utterance")
        groups = [str(g) for g in groups]
        uniq = sorted(set(groups))
        if len(uniq) < k:
            raise ValueError(f"only {len(uniq)} groups for {k} folds")
        order = [uniq[i] for i in rng.permutation(len(uniq))]
        gfold = {g: n % k for n, g in enumerate(order)}
        assign = {uid: gfold[g] for uid, g in zip(ids, groups)}
    else:
        raise ValueError(f"unknown split strategy {strategy!r}")
    folds = []
    for f in range(k):
        test = [uid for uid in ids if assign[uid] == f]
        train = [uid for uid in ids if assign[uid] != f]
        folds.append((train, test))
    return FoldPlan(k, strategy, folds)


# ---------------------------------------------------------------- metrics


@dataclass
class EvalResult:
    wa: float
    ua: float
    confusion: np.ndarray
    predictions: np.ndarray

    @property
    def recalls(self) -> np.ndarray:
        counts = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.diag(self.confusion) / counts


def confusion_matrix(y_true, y_pred, n_classes: int = 4) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def accuracy_metrics(confusion: np.ndarray) -> tuple[float, float]:
    """Weighted accuracy (overall) and unweighted accuracy (mean per-class recall)."""
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty test set")
    wa = np.trace(confusion) / total
    counts = confusion.sum(axis=1)
    present = counts > 0
    if not present.all():
        log.warning("classes %s absent from test set; UA averages present classes only", np.flatnonzero(~present).tolist())
    ua = np.mean(np.diag(confusion)[present] / counts[present])
    return float(wa), float(ua)


# ---------------------------------------------------------------- batching


def make_batch(records: list[FeatureRecord]) -> Batch:
    lengths = np.array([r.mfcc.shape[0] for r in records])
    mfcc = np.zeros((len(records), lengths.max(), records[0].mfcc.shape[1]), dtype=np.float32)
    for i, r in enumerate(records):
        mfcc[i, : lengths[i]] = r.mfcc
    try:
        s1 = np.stack([r.s1 for r in records]).astype(np.float32)
        s2 = np.stack([r.s2 for r in records]).astype(np.float32)
    except ValueError as e:
        raise ValueError(f"spectrogram shapes differ within a batch: {e}") from None
    labels = np.array([r.label for r in records], dtype=np.int64)
    return Batch(mfcc, lengths, s1, s2, labels, [r.utterance_id for r in records])


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batches; a trailing singleton is merged so batch norm always sees >= 2 rows."""
    edges = list(range(0, n, batch_size)) + [n]
    sl = [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]
    if len(sl) > 1 and sl[-1].stop - sl[-1].start == 1:
        sl[-2:] = [slice(sl[-2].start, n)]
    return sl


def fit_input_norm(model: Model, records: list[FeatureRecord]) -> None:
    mf = np.concatenate([r.mfcc for r in records]).astype(np.float64)
    s1 = np.concatenate([r.s1 for r in records], axis=1).astype(np.float64)
    s2 = np.concatenate([r.s2 for r in records], axis=1).astype(np.float64)

    def stats(x, axis):
        return x.mean(axis=axis).astype(np.float32), np.maximum(x.std(axis=axis), 1e-3).astype(np.float32)

    model.input_norm.stats = {"mfcc": stats(mf, 0), "s1": stats(s1, 1), "s2": stats(s2, 1)}


def predict(model: Model, records: list[FeatureRecord], batch_size: int = 32) -> tuple[np.ndarray, float]:
    """Eval-mode class probabilities and mean loss."""
    model.eval()
    probs, loss_sum = [], 0.0
    for sl in batch_slices(len(records), batch_size):
        res = model.forward(make_batch(records[sl]))
        probs.append(res.probs)
        loss_sum += res.loss.item() * (sl.stop - sl.start)
    return np.concatenate(probs), loss_sum / len(records)


def evaluate(model: Model, records: list[FeatureRecord], batch_size: int = 32) -> EvalResult:
    if not records:
        raise ValueError("empty test set")
    probs, _ = predict(model, records, batch_size)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix([r.label for r in records], pred, model.config.n_classes)
    wa, ua = accuracy_metrics(cm)
    return EvalResult(wa, ua, cm, pred)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    patience: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    val_fraction: float = 0.1


def train_step(model: Model, batch: Batch, opt: AdamState, clip_norm: float = 5.0) -> float:
    model.train()
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    res = model.forward(batch)
    loss = res.loss.item()
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")
    res.loss.backward()
    clip_grad_norm(params, clip_norm)
    adam_step(params, opt)
    return loss


def stratified_holdout(records: list[FeatureRecord], fraction: float, rng: np.random.Generator):
    if fraction <= 0:
        return records, []
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    val = set()
    for c in sorted(by_class):
        idx = by_class[c]
        n = int(round(fraction * len(idx)))
        if len(idx) > 1:
            n = max(1, n)
        val.update(int(i) for i in rng.permutation(idx)[:n])
    return [r for i, r in enumerate(records) if i not in val], [r for i, r in enumerate(records) if i in val]


def _snapshot(model: Model):
    return (
        {k: p.data.copy() for k, p in model.parameters().items()},
        {k: np.array(v, copy=True) for k, v in model.named_buffers().items()},
    )


def _restore(model: Model, snap) -> None:
    params, bufs = snap
    for k, p in model.parameters().items():
        p.data = params[k].copy()
    model.load_buffers(bufs)


@dataclass
class FoldResult:
    fold: int
    wa: float
    ua: float
    confusion: np.ndarray
    epochs_run: int
    best_val_loss: float
    train_loss: float
    test_ids: list[str]


def train_model(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    records: list[FeatureRecord],
    seed: int,
) -> tuple[Model, dict]:
    """Train from scratch with early stopping on a stratified holdout; returns the best model."""
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": seed})
    model = build_variant(model_cfg)
    rng = tn.child_rng(seed, "data")
    fit_recs, val_recs = stratified_holdout(records, train_cfg.val_fraction, rng)
    if len(fit_recs) < 2:
        raise ValueError("need at least 2 training utterances")
    fit_input_norm(model, fit_recs)
    opt = AdamState(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    best, best_loss, stale, epoch, last_train = None, math.inf, 0, 0, math.nan
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(fit_recs))
        losses = []
        for sl in batch_slices(len(order), train_cfg.batch_size):
            batch = make_batch([fit_recs[i] for i in order[sl]])
            losses.append(train_step(model, batch, opt, train_cfg.clip_norm) * len(batch))
        last_train = float(np.sum(losses) / len(order))
        if val_recs:
            _, val_loss = predict(model, val_recs, train_cfg.batch_size)
        else:
            val_loss = last_train
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss became {val_loss} at epoch {epoch}")
        log.info("seed %d epoch %d train %.4f val %.4f", seed, epoch, last_train, val_loss)
        if val_loss < best_loss:
            best, best_loss, stale = _snapshot(model), val_loss, 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    if best is not None:
        _restore(model, best)
    model.eval()
    return model, {"epochs_run": epoch, "best_val_loss": best_loss, "train_loss": last_train}


def _run_fold(args):
    fold, model_cfg, train_cfg, records, train_ids, test_ids, seed, out_dir = args
    by_id = {r.utterance_id: r for r in records}
    model, info = train_model(model_cfg, train_cfg, [by_id[i] for i in train_ids], seed + fold)
    res = evaluate(model, [by_id[i] for i in test_ids], train_cfg.batch_size)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / f"fold{fold}.dslp", model, {"fold": fold, "test_ids": list(test_ids), "train": asdict(train_cfg)})
    return FoldResult(fold, res.wa, res.ua, res.confusion, info["epochs_run"], info["best_val_loss"], info["train_loss"], list(test_ids))


@dataclass
class MetricsReport:
    variant: str
    folds: list[FoldResult]
    complete: bool = True
    error: str | None = None

    def _stat(self, key: str) -> tuple[float, float]:
        xs = np.array([getattr(f, key) for f in self.folds])
        if xs.size == 0:
            return math.nan, math.nan
        return float(xs.mean()), float(xs.std(ddof=1)) if xs.size > 1 else 0.0

    @property
    def mean_wa(self) -> float:
        return self._stat("wa")[0]

    @property
    def mean_ua(self) -> float:
        return self._stat("ua")[0]

    @property
    def std_wa(self) -> float:
        return self._stat("wa")[1]

    @property
    def std_ua(self) -> float:
        return self._stat("ua")[1]

    def table(self) -> str:
        lines = [f"variant: {self.variant}" + ("" if self.complete else "  [INCOMPLETE]"), "fold      WA      UA  epochs"]
        for f in self.folds:
            lines.append(f"{f.fold:>4}  {100 * f.wa:6.2f}  {100 * f.ua:6.2f}  {f.epochs_run:>6}")
        lines.append(f"mean  {100 * self.mean_wa:6.2f}  {100 * self.mean_ua:6.2f}")
        lines.append(f"std   {100 * self.std_wa:6.2f}  {100 * self.std_ua:6.2f}  (n-1 estimator)")
        lines.append(f"WA {100 * self.mean_wa:.1f} ± {100 * self.std_wa:.1f}   UA {100 * self.mean_ua:.1f} ± {100 * self.std_ua:.1f}")
        if self.error:
            lines.append(f"error: {self.error}")
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        kv = [("variant", self.variant), ("complete", str(self.complete).lower()), ("folds", len(self.folds))]
        for f in self.folds:
            kv += [(f"fold{f.fold}.wa", f"{f.wa:.6f}"), (f"fold{f.fold}.ua", f"{f.ua:.6f}"), (f"fold{f.fold}.epochs", f.epochs_run)]
        kv += [
            ("mean_wa", f"{self.mean_wa:.6f}"),
            ("std_wa", f"{self.std_wa:.6f}"),
            ("mean_ua", f"{self.mean_ua:.6f}"),
            ("std_ua", f"{self.std_ua:.6f}"),
        ]
        return "".join(f"{k}={v}\n" for k, v in kv)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.table())
        (out / "metrics.txt").write_text(self.records())
        for f in self.folds:
            write_confusion_csv(out / f"confusion_fold{f.fold}.csv", f.confusion)


def write_confusion_csv(path: str | Path, cm: np.ndarray) -> None:
    rows = ["true\\pred," + ",".join(LABELS)]
    rows += [LABELS[i] + "," + ",".join(str(int(v)) for v in cm[i]) for i in range(cm.shape[0])]
    Path(path).write_text("\n".join(rows) + "\n")


def train_run(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    records: list[FeatureRecord],
    plan: FoldPlan,
    seed: int = 0,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> MetricsReport:
    """Cross-validate ``model_cfg``; fold ``i`` trains with seed ``seed + i``."""
    if plan.k < 2:
        raise ValueError("cross-validation needs k >= 2")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(i, model_cfg, train_cfg, records, tr, te, seed, out_dir) for i, (tr, te) in enumerate(plan.folds)]
    report = MetricsReport(model_cfg.variant, [])
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for res in pool.map(_run_fold, tasks):
                    report.folds.append(res)
        else:
            for t in tasks:
                report.folds.append(_run_fold(t))
    except (TrainingDiverged, FloatingPointError) as e:
        report.complete = False
        report.error = f"fold {len(report.folds)}: {e}"
        if out_dir is not None:
            report.write(out_dir)
        raise TrainingDiverged(report.error) from e
    if out_dir is not None:
        report.write(out_dir)
    return report


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> None:
    tensors = {f"param/{k}": p.data for k, p in model.parameters().items()}
    tensors.update({f"buffer/{k}": v for k, v in model.named_buffers().items()})
    write_checkpoint(path, {"model": model.config.to_dict(), **(extra or {})}, tensors)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    meta, tensors = read_checkpoint(path)
    model = build_variant(ModelConfig.from_dict(meta["model"]))
    params = model.parameters()
    for k, p in params.items():
        key = f"param/{k}"
        if key not in tensors:
            raise ValueError(f"checkpoint {path} lacks tensor {key}")
        if tensors[key].shape != p.shape:
            raise ValueError(f"checkpoint tensor {key} has shape {tensors[key].shape}, model expects {p.shape}")
        p.data = tensors[key].astype(p.data.dtype)
    model.load_buffers({k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")})
    model.eval()
    return model, meta
