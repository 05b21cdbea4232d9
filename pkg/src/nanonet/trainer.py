"""Training loop, Adam, step LR schedule, evaluation, k-fold driver, checkpoints."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import network
from .arch import ArchSpec, count_params, spec_from_dict, spec_to_dict, validate_and_toposort
from .data import (NUM_CLASSES, AugmentConfig, DataError, FoldPlan, Sample, augment,
                   check_disjoint_subjects, labels_of, make_folds, sample_rng, stack_images)
from .network import NonFiniteError
from .tensor_ops import LayerParams, softmax_xent

logger = logging.getLogger(__name__)

DEFAULT_MULTIPLIERS = ((81, 1e-1), (121, 1e-2), (161, 1e-3), (181, 0.5e-3))
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    base_lr: float = 1e-3
    lr_multipliers: tuple[tuple[int, float], ...] = DEFAULT_MULTIPLIERS
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    class_weights: bool = False

    def __post_init__(self):
        self.lr_multipliers = tuple((int(e), float(m)) for e, m in self.lr_multipliers)
        marks = [e for e, _ in self.lr_multipliers]
        if any(b <= a for a, b in zip(marks, marks[1:])):
            raise ValueError(f"LR milestone epochs must be strictly increasing: {marks}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and marks and marks[-1] >= self.epochs:
            raise ValueError(f"LR milestone {marks[-1]} is not below epochs={self.epochs}")

    def with_epochs(self, epochs: int) -> "TrainConfig":
        """Same recipe on a shorter or longer budget; milestones rescale proportionally."""
        marks, last = [], -1
        for e, m in self.lr_multipliers:
            scaled = int(round(e * epochs / self.epochs)) if self.epochs else e
            if last < scaled < epochs:
                marks.append((scaled, m))
                last = scaled
        return replace(self, epochs=epochs, lr_multipliers=tuple(marks))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("epochs", "base_lr", "batch_size", "beta1", "beta2",
                                           "eps", "seed", "class_weights")}
        d["lr_multipliers"] = [list(p) for p in self.lr_multipliers]
        d["augment"] = None if self.augment is None else vars(self.augment).copy()
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Base rate times the multiplier of the last milestone <= ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    mult = 1.0
    for mark, m in cfg.lr_multipliers:
        if epoch >= mark:
            mult = m
    return cfg.base_lr * mult


@dataclass
class ModelState:
    spec: ArchSpec
    params: dict[str, LayerParams]
    m: dict[str, LayerParams]
    v: dict[str, LayerParams]
    step: int = 0

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _zeros_like(params):
    return {k: LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias)) for k, p in params.items()}


def init_state(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> ModelState:
    params = network.init_params(spec, np.random.default_rng(seed), dtype=dtype)
    return ModelState(spec, params, _zeros_like(params), _zeros_like(params), 0)


def state_from_params(spec: ArchSpec, params: dict[str, LayerParams]) -> ModelState:
    network.check_params(spec, params)
    return ModelState(spec, params, _zeros_like(params), _zeros_like(params), 0)


def inherit_params(child: ArchSpec, parent: ModelState, seed: int = 0) -> ModelState:
    """Fresh state for ``child`` that copies every parent tensor whose shape still fits."""
    state = init_state(child, seed, dtype=next(iter(parent.params.values())).weights.dtype)
    for nid, p in state.params.items():
        old = parent.params.get(nid)
        if old is not None and old.weights.shape == p.weights.shape:
            state.params[nid] = LayerParams(old.weights.copy(), old.bias.copy())
    return state


def adam_step(state: ModelState, grads: dict[str, LayerParams], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelState:
    """One bias-corrected Adam update, applied in place; returns ``state``."""
    for nid, g in grads.items():
        if nid not in state.params:
            raise KeyError(f"gradient for unknown node {nid!r}")
        if not (np.isfinite(g.weights).all() and np.isfinite(g.bias).all()):
            raise NonFiniteError(f"non-finite gradient at node {nid!r}", node=nid)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for nid, g in grads.items():
        p, m, v = state.params[nid], state.m[nid], state.v[nid]
        for name in ("weights", "bias"):
            gi = getattr(g, name)
            mi, vi, pi = getattr(m, name), getattr(v, name), getattr(p, name)
            mi *= beta1
            mi += (1.0 - beta1) * gi
            vi *= beta2
            vi += (1.0 - beta2) * gi * gi
            pi -= (lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(pi.dtype, copy=False)
    return state


class TrainingDiverged(NonFiniteError):
    def __init__(self, epoch: int, batch: int, node: str | None):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}"
                         f" (first non-finite activation: {node})", node=node)


def _class_weights(labels: np.ndarray) -> np.ndarray:
    counts = np.bincount(labels, minlength=NUM_CLASSES).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / NUM_CLASSES, 0.0)
    return w


def _check_head(spec: ArchSpec) -> None:
    out = spec.node(spec.node(spec.output_node).inputs[0])
    if out.kind != "dense" or out.out_channels != NUM_CLASSES:
        raise ValueError(f"spec must end in dense({NUM_CLASSES}) -> softmax_head")


def train(spec: ArchSpec, train_samples: Sequence[Sample], val_samples: Sequence[Sample] | None,
          cfg: TrainConfig, state: ModelState | None = None,
          on_epoch: Callable[[dict], None] | None = None):
    """Train ``spec`` and return ``(state, history)``.

    ``history`` holds one dict per epoch with the learning rate, mean training
    loss, running training accuracy and (when validation samples are given)
    validation accuracy of the end-of-epoch weights.
    """
    if not train_samples:
        raise DataError("training set is empty")
    _check_head(spec)
    order = validate_and_toposort(spec)
    if state is None:
        state = init_state(spec, cfg.seed)
    network.check_params(spec, state.params)
    history: list[dict] = []
    x_all = stack_images(train_samples)
    y_all = labels_of(train_samples)
    weights = _class_weights(y_all) if cfg.class_weights else None
    augmenting = cfg.augment is not None and any(vars(cfg.augment).values())
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    n = len(train_samples)
    dtype = next(iter(state.params.values())).weights.dtype

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            if augmenting:
                xb = np.concatenate([
                    augment(train_samples[i], sample_rng(cfg.seed, epoch, i), cfg.augment).image
                    for i in idx], axis=0)
            else:
                xb = x_all[idx]
            xb = xb.astype(dtype, copy=False)
            yb = y_all[idx]
            logits, cache = network.forward(spec, state.params, xb, order=order)
            loss, grad, probs = softmax_xent(logits, yb, weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b, network.first_nonfinite(cache) or spec.output_node)
            grads = network.backward(spec, state.params, cache, grad)
            adam_step(state, grads, lr, cfg.beta1, cfg.beta2, cfg.eps)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == yb).sum())
        rec = {"epoch": epoch, "lr": lr, "loss": loss_sum / n, "train_acc": correct / n}
        if val_samples:
            rec["val_acc"] = evaluate(state, val_samples)[0]
        history.append(rec)
        logger.debug("epoch %d %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(rec)
    return state, history


def predict(state: ModelState, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
    x = stack_images(samples)
    dtype = next(iter(state.params.values())).weights.dtype
    probs = network.predict_proba(state.spec, state.params, x.astype(dtype, copy=False), batch_size)
    return probs.argmax(axis=1)


def evaluate(state: ModelState, samples: Sequence[Sample]):
    """Return ``(accuracy, confusion)``; confusion rows are true classes."""
    if not samples:
        raise DataError("cannot evaluate on an empty dataset")
    pred = predict(state, samples)
    true = labels_of(samples)
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    return float((pred == true).mean()), confusion


@dataclass
class CVResult:
    fold_accuracies: list[float]
    test_counts: list[int]
    plan: FoldPlan
    confusion: np.ndarray
    histories: list[list[dict]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    def to_dict(self) -> dict:
        return {"k": self.plan.k, "fold_accuracies": self.fold_accuracies,
                "mean_accuracy": self.mean, "test_counts": self.test_counts,
                "confusion": self.confusion.tolist()}


def _run_fold(spec, train_s, test_s, cfg, fold):
    state = init_state(spec, int(np.random.SeedSequence([cfg.seed, fold]).generate_state(1)[0]))
    state, hist = train(spec, train_s, None, cfg, state=state)
    acc, conf = evaluate(state, test_s)
    return acc, conf, hist


def cross_validate(spec: ArchSpec, samples: Sequence[Sample], k: int, cfg: TrainConfig,
                   plan: FoldPlan | None = None, workers: int = 1,
                   on_fold: Callable[[int, float], None] | None = None) -> CVResult:
    """Subject-independent k-fold evaluation, one freshly initialised model per fold."""
    if k < 2:
        raise ValueError("cross-validation needs k >= 2 (no held-out set otherwise)")
    plan = plan or make_folds(samples, k, seed=cfg.seed)
    splits = []
    tested: list[int] = []
    for fold in range(k):
        train_s, test_s = plan.split(samples, fold)
        check_disjoint_subjects(train_s, test_s)
        if not test_s or not train_s:
            raise DataError(f"fold {fold} has an empty train or test side")
        tested.extend(id(s) for s in test_s)
        splits.append((train_s, test_s))
    if len(tested) != len(samples) or set(tested) != {id(s) for s in samples}:
        raise AssertionError("folds do not test every sample exactly once")

    results = [None] * k
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_fold, spec, tr, te, cfg, f) for f, (tr, te) in enumerate(splits)]
            for f, fut in enumerate(futures):
                results[f] = fut.result()
                if on_fold:
                    on_fold(f, results[f][0])
    else:
        for f, (tr, te) in enumerate(splits):
            results[f] = _run_fold(spec, tr, te, cfg, f)
            logger.info("fold %d/%d accuracy %.4f", f + 1, k, results[f][0])
            if on_fold:
                on_fold(f, results[f][0])
    return CVResult([r[0] for r in results], [len(te) for _, te in splits], plan,
                    sum(r[1] for r in results), [r[2] for r in results])


# --------------------------------------------------------------------------
# checkpoints: JSON header line, then little-endian f32 blocks in topological order

class CheckpointError(ValueError):
    pass


def save_checkpoint(state: ModelState, path) -> None:
    order = [n.id for n in validate_and_toposort(state.spec) if n.id in state.params]
    header = {"format": CHECKPOINT_VERSION, "spec_hash": state.spec.content_hash(),
              "spec": spec_to_dict(state.spec), "step": state.step,
              "blocks": [{"node": nid, "weights": list(state.params[nid].weights.shape),
                          "bias": int(state.params[nid].bias.size)} for nid in order]}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for nid in order:
            p = state.params[nid]
            fh.write(np.ascontiguousarray(p.weights, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(p.bias, dtype="<f4").tobytes())


def load_checkpoint(path, spec: ArchSpec | None = None) -> ModelState:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header") from exc
    if header.get("format") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    stored = spec_from_dict(header["spec"])
    if stored.content_hash() != header["spec_hash"]:
        raise CheckpointError(f"{path}: embedded spec does not match its hash")
    if spec is not None and spec.content_hash() != header["spec_hash"]:
        raise CheckpointError(f"{path}: checkpoint was written for a different architecture")
    params = {}
    offset = nl + 1
    for blk in header["blocks"]:
        wshape = tuple(blk["weights"])
        nw, nb = int(np.prod(wshape)), int(blk["bias"])
        if offset + 4 * (nw + nb) > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data")
        w = np.frombuffer(raw, "<f4", nw, offset).astype(np.float32).reshape(wshape)
        offset += 4 * nw
        b = np.frombuffer(raw, "<f4", nb, offset).astype(np.float32)
        offset += 4 * nb
        params[blk["node"]] = LayerParams(w, b)
    state = state_from_params(stored, params)
    state.step = int(header.get("step", 0))
    if state.param_count != count_params(stored).param_count:
        raise CheckpointError(f"{path}: parameter count does not match the architecture")
    return state
