"""Optimizer, loss, and the training and evaluation loops.

Each instance contributes a joint loss: cross-entropy for answer selection
plus cross-entropy for rationale selection. Gradients are averaged over a
batch before every update. One checkpoint and one report line are written
per epoch; reported losses are per-task means, so an untrained model starts
at ln 4.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from vcrnet import tensor as T
from vcrnet.config import TrainConfig
from vcrnet.data import (
    TASK_Q2A,
    TASK_QA2R,
    DataError,
    VcrInstance,
    Vocab,
    metrics_report,
)
from vcrnet.model import VcrModel
from vcrnet.tensor import Tape, Tensor

CHECKPOINT_NAME = "model.canckpt"
CONFIG_NAME = "config.json"
VOCAB_NAME = "vocab.json"
LOG_NAME = "train_log.jsonl"

_PROFILE_DTYPES = {"f64": np.float64, "f32": np.float32}


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the reports so far."""

    def __init__(self, message: str, reports: list):
        super().__init__(message)
        self.reports = reports


def task_loss(logits: Tensor, gold: int) -> Tensor:
    """Four-way cross-entropy: the negative log softmax probability of gold."""
    n = logits.data.shape[0]
    if not 0 <= gold < n:
        raise DataError(f"gold index {gold} out of range for {n} candidates")
    probs = T.softmax(logits, axis=0)
    return T.neg(T.log(probs.slice(0, gold, gold + 1))).sum()


class Adam:
    """Adam with bias correction; moment state is keyed by parameter name."""

    def __init__(
        self,
        params,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def scale_grads(self, factor: float) -> None:
        for _, p in self.params:
            if p.grad is not None:
                p.grad = p.grad * factor

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    train_q2a: float
    train_qa2r: float
    val_q2a: float
    val_qa2r: float
    wall_time: float

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    def core(self) -> dict:
        """All fields except wall time, which cannot reproduce across runs."""
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainResult:
    model: VcrModel
    vocab: Vocab
    reports: list
    out_dir: Path

    @property
    def final_report(self) -> EpochReport:
        return self.reports[-1]


def predict_all(model: VcrModel, instances: Sequence[VcrInstance]) -> tuple:
    """Greedy predictions for both tasks over a dataset (no gradient taping)."""
    q2a = [model.predict(inst, TASK_Q2A) for inst in instances]
    qa2r = [model.predict(inst, TASK_QA2R) for inst in instances]
    return q2a, qa2r


def evaluate(model: VcrModel, instances: Sequence[VcrInstance]) -> dict:
    q2a, qa2r = predict_all(model, instances)
    return metrics_report(q2a, qa2r)


def apply_profile(config: TrainConfig) -> None:
    T.set_default_dtype(_PROFILE_DTYPES[config.profile])


def _object_width(instances: Sequence[VcrInstance]) -> int:
    widths = {inst.objects.shape[1] for inst in instances}
    if len(widths) != 1:
        raise DataError(f"inconsistent object feature widths: {sorted(widths)}")
    return widths.pop()


def train(
    config: TrainConfig,
    train_insts: Sequence[VcrInstance],
    val_insts: Sequence[VcrInstance],
    out_dir,
    progress: Optional[Callable[[EpochReport], None]] = None,
) -> TrainResult:
    """Fit a fresh model; writes config, vocab, per-epoch checkpoint and log.

    Stops early when the validation answer accuracy fails to improve for
    `patience` epochs, or as soon as the training set is fit perfectly.
    Raises TrainingDiverged on a non-finite loss.
    """
    config.validate()
    if not train_insts:
        raise DataError("cannot train on an empty dataset")
    apply_profile(config)

    vocab = Vocab.build(train_insts)
    d_o = _object_width(list(train_insts) + list(val_insts))
    rng = np.random.default_rng(config.seed)
    model = VcrModel.build(config, vocab, d_o, rng)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(config.to_json() + "\n", encoding="utf-8")
    (out_dir / VOCAB_NAME).write_text(vocab.to_json() + "\n", encoding="utf-8")
    log_path = out_dir / LOG_NAME
    log_path.write_text("", encoding="utf-8")

    opt = Adam(model.named_parameters(), lr=config.lr)
    reports: list = []
    best_val = -math.inf
    best_epoch = 0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_insts))
        per_task_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            opt.zero_grad()
            for idx in batch:
                inst = train_insts[idx]
                with Tape() as tape:
                    f_a = model.forward_task(inst, TASK_Q2A, training=True, rng=rng)
                    f_r = model.forward_task(inst, TASK_QA2R, training=True, rng=rng)
                    loss = task_loss(f_a.logits, f_a.example.gold) + task_loss(
                        f_r.logits, f_r.example.gold
                    )
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch}", reports
                        )
                    tape.backward(loss)
                per_task_losses.append(value / 2.0)
            opt.scale_grads(1.0 / len(batch))
            opt.step()

        train_metrics = evaluate(model, train_insts)
        val_metrics = evaluate(model, val_insts) if val_insts else train_metrics
        report = EpochReport(
            epoch=epoch,
            mean_loss=float(np.mean(per_task_losses)),
            train_q2a=train_metrics["q2a"],
            train_qa2r=train_metrics["qa2r"],
            val_q2a=val_metrics["q2a"],
            val_qa2r=val_metrics["qa2r"],
            wall_time=time.perf_counter() - t0,
        )
        reports.append(report)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(report.to_json_dict(), sort_keys=True) + "\n")
        model.save(out_dir / CHECKPOINT_NAME)
        if progress is not None:
            progress(report)

        if report.train_q2a == 1.0 and report.train_qa2r == 1.0:
            break
        if report.val_q2a > best_val:
            best_val = report.val_q2a
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break

    return TrainResult(model=model, vocab=vocab, reports=reports, out_dir=out_dir)


def load_run(ckpt_path) -> tuple:
    """Rebuild (model, config, vocab) from a checkpoint and its sidecar files.

    The config and vocabulary are expected beside the checkpoint under their
    standard names.
    """
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt_path}")
    run_dir = ckpt_path.parent
    config_path = run_dir / CONFIG_NAME
    vocab_path = run_dir / VOCAB_NAME
    for path in (config_path, vocab_path):
        if not path.is_file():
            raise FileNotFoundError(f"missing sidecar file {path}")
    config = TrainConfig.from_json(config_path.read_text(encoding="utf-8"))
    apply_profile(config)
    vocab = Vocab.from_json(vocab_path.read_text(encoding="utf-8"))
    model = VcrModel.load(ckpt_path, config, vocab)
    return model, config, vocab
