"""Joint quality + latency training of the segment model.

Each example gets its own tape; batch gradients are accumulated in a fixed
order and averaged, so a run is reproducible from its seed.  The optimizer
is plain gradient descent with linear warmup to a constant step size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor
from .losses import (
    LossConfig,
    LossReport,
    al_constraint,
    cross_entropy,
    cw_constraint,
    total_loss,
)
from .mapping import (
    MappingState,
    aggregation_posterior,
    attention_mapping,
    emission_posterior,
    expected_segment_reps,
    force_final_emission,
)
from .model import SegmentModel
from .vocab import BOS, EOS


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_report: LossReport | None):
        super().__init__(f"non-finite loss at step {step}; last finite report: {last_report}")
        self.step = step
        self.last_report = last_report


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 0.2
    warmup: int = 200
    latency_delay: int = 800
    latency_ramp: int = 800
    seed: int = 0
    eval_every: int = 500


@dataclass
class StepLog:
    step: int
    report: LossReport
    lr: float
    dev_accuracy: float | None = None


def example_objective(model: SegmentModel, graph: Graph, bound, source, target,
                      loss_cfg: LossConfig, rng=None,
                      latency_scale: float = 1.0) -> tuple[Tensor, LossReport, MappingState]:
    """Loss tensor, its report, and the mapping state for one example.

    The decoder is teacher-forced on [bos] + target and supervised on
    target + [eos]; the latency terms therefore count the end marker as a
    target position.  `latency_scale` ramps the latency terms in early
    training; the report always carries the unscaled terms.
    """
    prefix = [BOS] + list(target)
    refs = list(target) + [EOS]

    enc = model.encode(graph, bound, source, rng=rng)
    alpha = model.aggregation_probs(bound, enc)
    p_x, f_x = aggregation_posterior(alpha)
    seg = expected_segment_reps(p_x, enc, bound["w_src_seg"])
    dec_in = model.decoder_inputs(graph, bound, prefix)
    beta = force_final_emission(model.emission_probs(bound, dec_in, seg))
    p_y = emission_posterior(beta)
    m = attention_mapping(p_y, f_x)
    state = MappingState(alpha=alpha, beta=beta, p_x=p_x, f_x=f_x, p_y=p_y, m=m)

    dists = model.decode(graph, bound, prefix, enc, mapping=m, rng=rng)
    ce = cross_entropy(dists, refs, loss_cfg.label_smoothing)
    cw = cw_constraint(alpha, len(refs), len(source), loss_cfg.lam)
    al = al_constraint(m)
    if latency_scale == 1.0:
        loss = ce + cw + al
    else:
        loss = ce + latency_scale * (cw + al)
    report = total_loss(float(ce.data), float(cw.data), float(al.data))
    return loss, report, state


def batch_gradients(model: SegmentModel, batch, loss_cfg: LossConfig, rng=None,
                    latency_scale: float = 1.0):
    """Mean gradients and mean loss report over a batch, fixed order."""
    acc: dict[str, np.ndarray] = {}
    terms = np.zeros(3)
    for source, target in batch:
        graph = Graph()
        bound = model.bind(graph)
        loss, report, _ = example_objective(model, graph, bound, source, target,
                                            loss_cfg, rng=rng,
                                            latency_scale=latency_scale)
        grads = graph.backward(loss)
        for name, g in grads.items():
            if name in acc:
                acc[name] += g
            else:
                acc[name] = g.copy()
        terms += (report.ce, report.cw_term, report.al_term)
    n = len(batch)
    for name in acc:
        acc[name] /= n
    terms /= n
    return acc, total_loss(*terms)


def train(model: SegmentModel, train_examples, train_cfg: TrainConfig,
          loss_cfg: LossConfig, dev_examples=None, eval_fn=None,
          log_fn=None) -> list[StepLog]:
    """Run the training loop in place on `model.params`.

    `eval_fn(model, dev_examples) -> float` is called every eval_every
    steps and at the end when dev data is given.  Aborts with the step
    number on a non-finite loss.
    """
    order_rng = np.random.default_rng(train_cfg.seed)
    dropout_rng = (np.random.default_rng(train_cfg.seed + 1)
                   if model.config.dropout > 0 else None)
    pairs = [(ex.source, ex.target) for ex in train_examples]
    logs: list[StepLog] = []
    last_finite: LossReport | None = None
    order: list[int] = []

    for step in range(train_cfg.steps):
        while len(order) < train_cfg.batch_size:
            order.extend(order_rng.permutation(len(pairs)).tolist())
        batch = [pairs[i] for i in order[: train_cfg.batch_size]]
        order = order[train_cfg.batch_size:]

        # quality first: latency terms are held at zero, then ramped in, so
        # the mapping heads are shaped by a trained decoder instead of
        # saturating before the cross-entropy carries any signal
        scale = min(1.0, max(0.0, (step - train_cfg.latency_delay)
                             / max(train_cfg.latency_ramp, 1)))
        grads, report = batch_gradients(model, batch, loss_cfg, rng=dropout_rng,
                                        latency_scale=scale)
        if not np.isfinite(report.total):
            raise TrainingDiverged(step, last_finite)
        last_finite = report

        lr = train_cfg.lr * min(1.0, (step + 1) / max(train_cfg.warmup, 1))
        for name, g in grads.items():
            model.params[name] -= lr * g

        entry = StepLog(step=step, report=report, lr=lr)
        due = (step + 1) % train_cfg.eval_every == 0 or step + 1 == train_cfg.steps
        if due and dev_examples is not None and eval_fn is not None:
            entry.dev_accuracy = eval_fn(model, dev_examples)
        logs.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return logs
