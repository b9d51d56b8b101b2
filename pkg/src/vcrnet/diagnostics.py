"""Gradient integrity checks.

Two levels: `layer_checks` sweeps every building block in isolation, and
`end_to_end_checks` sweeps every parameter coordinate of a small but
complete model against central differences of the real training loss.

The end-to-end sweep reuses the model's forward stages: a perturbed
parameter only requires recomputing from the stage it feeds, and the stage
composition is asserted (exactly, not approximately) to reproduce the full
forward before any sweeping starts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from vcrnet import layers as L
from vcrnet import tensor as T
from vcrnet.attention import guided_attention_unit, init_attn_unit, sdpa
from vcrnet.config import TrainConfig
from vcrnet.data import TASK_Q2A, TaggedToken, VcrInstance, Vocab, make_task
from vcrnet.grounding import align_tags
from vcrnet.model import VcrModel
from vcrnet.reduction import candidate_logit, fuse, init_reduction, reduce
from vcrnet.tensor import Tensor, Tape, grad_check
from vcrnet.training import task_loss


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    coords: int
    seconds: float

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_err": self.max_rel_err,
            "coords": self.coords,
            "seconds": round(self.seconds, 3),
        }


def _timed(name: str, coords: int, fn: Callable[[], float]) -> CheckResult:
    t0 = time.perf_counter()
    err = fn()
    # plain floats: numpy scalars leak into JSON reports otherwise
    return CheckResult(name, float(err), coords, time.perf_counter() - t0)


def _installed(obj, key, fn: Callable[[], Tensor]) -> Callable[[Tensor], Tensor]:
    """Adapt `fn` for grad_check by temporarily installing its probe tensor."""

    def wrapped(t: Tensor) -> Tensor:
        if isinstance(key, int):
            old, obj[key] = obj[key], t
        else:
            old = getattr(obj, key)
            setattr(obj, key, t)
        try:
            return fn()
        finally:
            if isinstance(key, int):
                obj[key] = old
            else:
                setattr(obj, key, old)

    return wrapped


def layer_checks(h: float = 1e-5) -> list:
    """Per-coordinate gradient sweeps for each building block in isolation."""
    T.set_default_dtype(np.float64)
    rng = np.random.default_rng(42)
    results = []

    def check(name, fn, x):
        results.append(_timed(name, x.data.size, lambda: grad_check(fn, x, h=h)))

    # linear
    lin = L.init_linear(rng, 5, 3)
    x = Tensor(rng.standard_normal((4, 5)))
    check("linear/x", lambda t: L.linear(t, lin), x)
    check("linear/weight", _installed(lin, "weight", lambda: L.linear(x, lin)), lin.weight)
    check("linear/bias", _installed(lin, "bias", lambda: L.linear(x, lin)), lin.bias)

    # layer norm
    ln = L.init_layer_norm(6)
    ln.gamma.data = rng.uniform(0.5, 1.5, 6)
    ln.beta.data = rng.standard_normal(6)
    x = Tensor(rng.standard_normal((3, 6)))
    check("layer_norm/x", lambda t: L.layer_norm(t, ln), x)
    check("layer_norm/gamma", _installed(ln, "gamma", lambda: L.layer_norm(x, ln)), ln.gamma)
    check("layer_norm/beta", _installed(ln, "beta", lambda: L.layer_norm(x, ln)), ln.beta)

    # feed-forward
    ffn = L.init_feed_forward(rng, 8, 32, 0.0)
    x = Tensor(rng.standard_normal((3, 8)))
    check("feed_forward/x", lambda t: L.feed_forward(t, ffn), x)
    for name, tensor in ffn.named("feed_forward"):
        holder, attr = _locate(ffn, name.split("/")[-1].split(".")[1:])
        check(name, _installed(holder, attr, lambda: L.feed_forward(x, ffn)), tensor)

    # score MLP
    mlp_p = L.init_mlp(rng, [8, 4, 1])
    x = Tensor(rng.standard_normal((5, 8)))
    check("mlp/x", lambda t: L.mlp(t, mlp_p), x)

    # bidirectional LSTM, including the fused backward-through-time rule
    bi = L.init_bilstm(rng, 5, 3)
    x = Tensor(rng.standard_normal((4, 5)))
    check("bilstm/x", lambda t: L.bilstm(t, bi), x)
    for name, tensor in bi.named("bilstm"):
        direction = bi.fwd if ".fwd." in name else bi.bwd
        attr = name.rsplit(".", 1)[1]
        check(name, _installed(direction, attr, lambda: L.bilstm(x, bi)), tensor)

    # scaled dot-product attention with a partially masked key axis
    q = Tensor(rng.standard_normal((3, 4)))
    k = Tensor(rng.standard_normal((5, 4)))
    v = Tensor(rng.standard_normal((5, 4)))
    mask = np.array([True, True, False, True, False])
    check("sdpa/q", lambda t: sdpa(t, k, v, mask)[0], q)
    check("sdpa/k", lambda t: sdpa(q, t, v, mask)[0], k)
    check("sdpa/v", lambda t: sdpa(q, k, t, mask)[0], v)

    # one full guided attention unit, every parameter
    unit = init_attn_unit(rng, 8, 2, 32, 0.0)
    x = Tensor(rng.standard_normal((3, 8)))
    guide = Tensor(rng.standard_normal((4, 8)))
    gmask = np.array([True, False, True, True])

    def unit_out():
        return guided_attention_unit(x, guide, unit, mask=gmask)[0]

    check("attn_unit/x", lambda t: guided_attention_unit(t, guide, unit, mask=gmask)[0], x)
    check("attn_unit/guide", lambda t: guided_attention_unit(x, t, unit, mask=gmask)[0], guide)
    for name, tensor in unit.named("attn_unit"):
        holder, attr = _locate(unit, name.split(".")[1:])
        check(name, _installed(holder, attr, unit_out), tensor)

    # tag alignment
    emb = Tensor(rng.standard_normal((3, 4)))
    objs = Tensor(rng.standard_normal((2, 5)))
    tokens = [TaggedToken("a"), TaggedToken("b", 1), TaggedToken("c", 0)]
    check("align_tags/emb", lambda t: align_tags(tokens, t, objs), emb)
    check("align_tags/objects", lambda t: align_tags(tokens, emb, t), objs)

    # pooling, fusion, and the candidate head
    red = init_reduction(rng, 8, 8)
    red.clf.weight.data = rng.uniform(-0.5, 0.5, red.clf.weight.data.shape)
    red.clf.bias.data = rng.uniform(-0.5, 0.5, red.clf.bias.data.shape)
    Z = Tensor(rng.standard_normal((5, 8)))
    zmask = np.array([True, True, True, False, True])
    check("reduce/Z", lambda t: reduce(t, zmask, red.mlp_q)[0], Z)
    z_q = Tensor(rng.standard_normal((1, 8)))
    z_r = Tensor(rng.standard_normal((1, 8)))
    check("fuse/z_q", lambda t: fuse(t, z_r, red), z_q)
    check("fuse/z_r", lambda t: fuse(z_q, t, red), z_r)
    check("fuse/w1", _installed(red, "w1", lambda: fuse(z_q, z_r, red)), red.w1)
    check("head/clf_weight",
          _installed(red.clf, "weight", lambda: candidate_logit(fuse(z_q, z_r, red), red)),
          red.clf.weight)

    # four-way cross-entropy
    logits = Tensor(rng.standard_normal(4))
    check("task_loss/logits", lambda t: task_loss(t, 2), logits)

    return results


def _locate(root, path: list):
    """Walk a dotted parameter path, returning (holder, final key)."""
    holder = root
    for part in path[:-1]:
        holder = holder[int(part)] if part.isdigit() else getattr(holder, part)
    last = path[-1]
    if last.isdigit():
        return holder, int(last)
    if not hasattr(holder, last):
        # per-head projections are named wq0, wk1, ... over list attributes
        stem = last.rstrip("0123456789")
        return getattr(holder, stem), int(last[len(stem):])
    return holder, last


# -- end-to-end ------------------------------------------------------------


def probe_instance() -> VcrInstance:
    """Smallest instance that exercises everything: 3-token sequences, 2 objects."""

    def tok(text, tag=None):
        return TaggedToken(text, tag)

    def seq(a, b, tag):
        return [tok(a), tok(b, tag), tok("a")]

    return VcrInstance(
        instance_id="probe-0",
        objects=np.arange(4, dtype=float).reshape(2, 2) * 0.1,
        object_labels=["b", "c"],
        question=[tok("a"), tok("b"), tok("c")],
        answers=[seq("a", "b", 0), seq("b", "c", 1), seq("c", "b", 0), seq("d", "c", 1)],
        rationales=[seq("d", "b", 0), seq("a", "c", 1), seq("b", "b", 0), seq("c", "c", 1)],
        gold_answer=1,
        gold_rationale=2,
    ).validate()


def probe_model(inst: Optional[VcrInstance] = None) -> VcrModel:
    """Small full model with a randomized head so every gradient is live."""
    inst = inst or probe_instance()
    config = TrainConfig(d_model=8, d_token=8, heads=2, layers=1, dropout=0.0)
    model = VcrModel.build(
        config, Vocab.build([inst]), inst.objects.shape[1], np.random.default_rng(3)
    )
    # the classifier ships zero-initialized, which would zero every upstream
    # gradient and make the sweep vacuous
    rng = np.random.default_rng(9)
    lim = 1.0 / np.sqrt(model.config.d_model)
    model.reduction.clf.weight.data = rng.uniform(-lim, lim, model.reduction.clf.weight.data.shape)
    model.reduction.clf.bias.data = rng.uniform(-lim, lim, model.reduction.clf.bias.data.shape)
    return model


_STAGE_OF = (
    (("embedding", "obj_proj", "ground"), "encode"),
    (("fuse",), "fuse"),
    (("coattn", "encoder"), "joint"),
    (("reduce",), "head"),
)


def _stage_name(param_name: str) -> str:
    top = param_name.split(".", 1)[0]
    for tops, stage in _STAGE_OF:
        if top in tops:
            return stage
    raise ValueError(f"no stage known for parameter {param_name!r}")


def end_to_end_checks(h: float = 1e-5) -> list:
    """Sweep every model parameter coordinate against the training loss.

    Returns one result per forward stage; the union covers every coordinate
    of every parameter exactly once.
    """
    T.set_default_dtype(np.float64)
    inst = probe_instance()
    model = probe_model(inst)
    ex = make_task(inst, TASK_Q2A)
    objects, labels = inst.objects, inst.object_labels

    with Tape() as tape:
        loss = task_loss(model.forward_example(ex, objects, labels).logits, ex.gold)
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in model.named_parameters()
    }
    model.zero_grad()

    def head_loss(encoded) -> float:
        return float(task_loss(model._stage_head(ex, encoded).logits, ex.gold).data)

    def loss_full() -> float:
        f = model.forward_example(ex, objects, labels)
        return float(task_loss(f.logits, ex.gold).data)

    s1 = model._stage_encode(ex, objects, labels)
    fused = model._stage_fuse(s1)
    encoded = model._stage_joint(fused)

    evaluators = {
        "encode": loss_full,
        "fuse": lambda: head_loss(model._stage_joint(model._stage_fuse(s1))),
        "joint": lambda: head_loss(model._stage_joint(fused)),
        "head": lambda: head_loss(encoded),
    }

    # the staged shortcuts must reproduce the full loss bit for bit
    base = loss_full()
    if float(loss.data) != base:
        raise AssertionError("taped and untaped losses disagree")
    for stage, evaluator in evaluators.items():
        if evaluator() != base:
            raise AssertionError(f"stage shortcut {stage!r} does not reproduce the loss")

    worst = {stage: 0.0 for stage in evaluators}
    coords = {stage: 0 for stage in evaluators}
    seconds = {stage: 0.0 for stage in evaluators}

    for name, p in model.named_parameters():
        stage = _stage_name(name)
        evaluator = evaluators[stage]
        t0 = time.perf_counter()
        flat = p.data.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluator()
            flat[i] = orig - h
            down = evaluator()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
            if err > worst[stage]:
                worst[stage] = err
        coords[stage] += flat.size
        seconds[stage] += time.perf_counter() - t0

    return [
        CheckResult(f"end_to_end/{stage}", float(worst[stage]), coords[stage],
                    seconds[stage])
        for stage in evaluators
    ]


def run_all(h: float = 1e-5) -> list:
    """Layer sweeps followed by the staged end-to-end sweep."""
    return layer_checks(h) + end_to_end_checks(h)
