"""Latency and quality metrics for simultaneous generation traces.

Latency is measured in read counts: t[i] is the number of source tokens
read before the i-th target token was written.  All functions are plain
float math over those arrays; nothing here touches the autodiff tape.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .vocab import BOS

TRADEOFF_HEADER = ["lambda", "al", "cw", "ap", "dal", "token_acc"]


@dataclass
class LatencyReport:
    al: float
    cw: float
    ap: float
    dal: float
    mean_alignment_delay: float | None = None
    truncated: bool = False


@dataclass
class SegmentationScore:
    precision: float
    recall: float
    r_value: float
    matched: int
    no_predictions: bool = False


def _check_t(t) -> list[int]:
    t = list(t)
    if not t:
        raise ValueError("empty trace")
    return t


def average_lagging(t, source_len: int, target_len: int | None = None) -> float:
    """Mean lag of the writes behind the diagonal schedule.

    Averages t[i] - (i-1) * J/I over i up to the first write made with the
    whole source read; truncated traces (no such write) average over all
    of them.
    """
    t = _check_t(t)
    i_total = target_len if target_len is not None else len(t)
    tau = len(t)
    for i, reads in enumerate(t, start=1):
        if reads >= source_len:
            tau = i
            break
    rate = source_len / i_total
    return sum(t[i - 1] - (i - 1) * rate for i in range(1, tau + 1)) / tau


def consecutive_wait(t, source_len: int) -> float:
    """Source tokens per waiting burst: J / number of strict increases of t."""
    t = _check_t(t)
    prev = 0
    bursts = 0
    for reads in t:
        if reads - prev > 0:
            bursts += 1
        prev = reads
    return source_len / bursts


def average_proportion(t, source_len: int, target_len: int | None = None) -> float:
    """Mean fraction of the source read per write."""
    t = _check_t(t)
    i_total = target_len if target_len is not None else len(t)
    return sum(t) / (source_len * i_total)


def differentiable_average_lagging(t, source_len: int,
                                   target_len: int | None = None) -> float:
    """Monotone-clamped lagging: t'[i] = max(t[i], t'[i-1] + J/I)."""
    t = _check_t(t)
    i_total = target_len if target_len is not None else len(t)
    rate = source_len / i_total
    clamped = []
    for i, reads in enumerate(t):
        clamped.append(reads if i == 0 else max(reads, clamped[-1] + rate))
    return sum(tc - i * rate for i, tc in enumerate(clamped)) / i_total


def mean_alignment_delay(t, gold_positions) -> float:
    """Mean difference between generating moments and gold-aligned positions."""
    t = _check_t(t)
    gold = list(gold_positions)
    if len(gold) != len(t):
        raise ValueError(f"length mismatch: {len(t)} writes vs {len(gold)} gold positions")
    return sum(reads - a for reads, a in zip(t, gold)) / len(t)


def emission_accuracy(t, gold_positions) -> float:
    """Fraction of reference tokens whose aligned source token was read in time.

    Reference positions beyond the hypothesis length count as misses.
    """
    gold = list(gold_positions)
    if not gold:
        raise ValueError("empty gold alignment")
    hits = sum(1 for i, a in enumerate(gold) if i < len(t) and a <= t[i])
    return hits / len(gold)


def segmentation_quality(predicted, gold, tolerance: int = 0) -> SegmentationScore:
    """Boundary precision/recall and their composite score.

    Matching is greedy by distance: each gold boundary pairs with at most
    one prediction within the tolerance.  With no predictions, precision
    is reported as 0 and flagged, and the ratio R/P is taken as 0.
    """
    predicted = sorted(predicted)
    gold = sorted(gold)
    if not gold:
        raise ValueError("empty gold boundary set")
    pairs = sorted(
        (abs(p - g), gi, pi)
        for gi, g in enumerate(gold)
        for pi, p in enumerate(predicted)
        if abs(p - g) <= tolerance
    )
    used_g, used_p = set(), set()
    matched = 0
    for _, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        matched += 1
    if not predicted:
        return SegmentationScore(0.0, 0.0, _r_value(0.0, 0.0, ratio=0.0), 0,
                                 no_predictions=True)
    precision = matched / len(predicted)
    recall = matched / len(gold)
    ratio = recall / precision if precision > 0 else 0.0
    return SegmentationScore(precision, recall, _r_value(precision, recall, ratio), matched)


def _r_value(precision: float, recall: float, ratio: float) -> float:
    r1 = math.sqrt((1.0 - recall) ** 2 + (ratio - 1.0) ** 2)
    r2 = (-(ratio - 1.0) + recall - 1.0) / math.sqrt(2.0)
    return 1.0 - (abs(r1) + abs(r2)) / 2.0


def generation_quality(hypothesis, reference) -> tuple[float, int]:
    """Token accuracy over max-length positions, and exact match."""
    hyp = list(hypothesis)
    ref = list(reference)
    if not hyp and not ref:
        return 1.0, 1
    matches = sum(1 for a, b in zip(hyp, ref) if a == b)
    acc = matches / max(len(hyp), len(ref))
    return acc, int(hyp == ref)


def score_trace(t, source_len: int, gold_alignment=None,
                truncated: bool = False) -> LatencyReport:
    """All latency metrics of one trace."""
    return LatencyReport(
        al=average_lagging(t, source_len),
        cw=consecutive_wait(t, source_len),
        ap=average_proportion(t, source_len),
        dal=differentiable_average_lagging(t, source_len),
        mean_alignment_delay=(mean_alignment_delay(t, gold_alignment[: len(t)])
                              if gold_alignment is not None and len(t) > 0 else None),
        truncated=truncated,
    )


def write_tradeoff_csv(rows, path) -> None:
    """CSV of (lambda, AL, CW, AP, DAL, token accuracy) rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRADEOFF_HEADER)
        for row in rows:
            writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])


# -- representation similarity ---------------------------------------------------


@dataclass
class SimilarityReport:
    source_target: float
    source_segment: float
    segment_target: float
    segments: int
    vectors: list[dict]  # raw per-segment vectors for external visualization


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def representation_similarity(model, examples, policy_config=None) -> SimilarityReport:
    """Mean pairwise cosine similarity between per-segment summed source
    representations, target representations, and the latent segment
    representations, measured on adaptive-policy runs.

    Only segments that both contain source tokens and emitted target
    tokens contribute.  Raw vectors are returned for visualization.
    """
    from .policy import PolicyConfig, Session, run_adaptive

    policy_config = policy_config or PolicyConfig(kind="adaptive")
    sims = np.zeros(3)
    count = 0
    vectors = []
    for ex_index, ex in enumerate(examples):
        trace = run_adaptive(model, ex.source, policy_config)
        if not trace.hypothesis:
            continue
        session = Session(model, ex.source)
        graph = Graph()
        bound = model.bind(graph)
        dec_in = model.decoder_inputs(graph, bound, [BOS] + trace.hypothesis).data

        starts = [0] + list(trace.boundaries)
        for seg_idx, (start, end) in enumerate(zip(starts, trace.boundaries), start=1):
            emitted = [i for i, s in enumerate(trace.segment_of_write) if s == seg_idx]
            if end <= start or not emitted:
                continue
            src_vec = session.enc_states[start:end].sum(axis=0)
            seg_vec = src_vec @ session.w_src_seg
            tgt_vec = dec_in[[i + 1 for i in emitted]].sum(axis=0)
            sims += (_cosine(src_vec, tgt_vec), _cosine(src_vec, seg_vec),
                     _cosine(seg_vec, tgt_vec))
            count += 1
            vectors.append({
                "example": ex_index,
                "segment": seg_idx,
                "source": src_vec.tolist(),
                "segment_rep": seg_vec.tolist(),
                "target": tgt_vec.tolist(),
            })
    if count == 0:
        raise ValueError("no usable segments: every trace was empty")
    means = sims / count
    return SimilarityReport(source_target=means[0], source_segment=means[1],
                            segment_target=means[2], segments=count, vectors=vectors)
