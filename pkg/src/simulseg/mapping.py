"""Source/target segment posteriors and the expected attention mapping.

Source tokens are aggregated into consecutive latent segments by Bernoulli
close-decisions (probabilities alpha); each segment then emits consecutive
target tokens by Bernoulli emit-decisions (probabilities beta).  Training
marginalizes both decision sequences in closed form with two dynamic
programs, producing for every target token the probability that each
source token is already available when it is generated.

All entry points record on the operands' Graph, so everything here is
differentiable in alpha and beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch, Tensor, concat, linear_scan, stack


@dataclass
class MappingState:
    """All mapping quantities for one example, with K = J candidate segments.

    p_x[j, k]: probability that source token j belongs to segment k.
    f_x[j, k]: probability that source token j belongs to segments 1..k.
    p_y[i, k]: probability that target token i is emitted from segment k.
    m[i, j]:   probability that source token j is available when target
               token i is generated.
    """

    alpha: Tensor
    beta: Tensor
    p_x: Tensor
    f_x: Tensor
    p_y: Tensor
    m: Tensor


def aggregation_posterior(alpha: Tensor) -> tuple[Tensor, Tensor]:
    """Segment-membership posterior of the source tokens.

    Row j is built from row j-1: token j lands in segment k either by
    closing segment k-1 at token j-1 (prob alpha[j-1]) or by staying in
    segment k (prob 1 - alpha[j-1]).  Token 1 is always in segment 1.
    Returns (p_x, f_x), both [J, J]; entries above the diagonal of p_x are
    exactly zero, so no probability mass is ever shifted off the end.
    """
    if alpha.data.ndim != 1 or alpha.shape[0] == 0:
        raise ValueError(f"aggregation_posterior: need a nonempty vector, got {alpha.shape}")
    g = alpha.graph
    j_total = alpha.shape[0]

    first = np.zeros(j_total)
    first[0] = 1.0
    rows = [g.tensor(first)]
    zero = g.tensor([0.0])
    for j in range(1, j_total):
        close = alpha[j - 1:j]
        prev = rows[-1]
        shifted = concat([zero, prev[: j_total - 1]])
        rows.append(shifted * close + prev * (1.0 - close))
    p_x = stack(rows)
    return p_x, p_x.cumsum(axis=1)


def expected_segment_reps(p_x: Tensor, encoder_states: Tensor, w_src_seg: Tensor) -> Tensor:
    """Expected latent segment representations, [K, d_seg].

    seg_k = (sum_j p_x[j, k] * state_j) @ W, the probability-weighted
    sum of source representations projected into segment space.
    """
    if p_x.shape[0] != encoder_states.shape[0]:
        raise ShapeMismatch(
            f"expected_segment_reps: {p_x.shape[0]} posterior rows vs "
            f"{encoder_states.shape[0]} encoder states")
    if encoder_states.shape[1] != w_src_seg.shape[0]:
        raise ShapeMismatch(
            f"expected_segment_reps: state width {encoder_states.shape[1]} vs "
            f"projection input {w_src_seg.shape[0]}")
    return (p_x.T @ encoder_states) @ w_src_seg


def force_final_emission(beta: Tensor) -> Tensor:
    """Replace the last column of beta with ones.

    Guarantees every target token is emitted by segment K at the latest,
    so each emission posterior row is a proper distribution.  Mirrors the
    inference rule that generation becomes unconditional once the source
    is exhausted.
    """
    i_total, k_total = beta.shape
    ones = beta.graph.tensor(np.ones((i_total, 1)))
    if k_total == 1:
        return ones
    return concat([beta[:, : k_total - 1], ones], axis=1)


def emission_posterior(beta: Tensor) -> Tensor:
    """Segment-membership posterior of the target tokens, [I, K].

    Uses the O(I*K) reachability recursion: with r[i, 1] = p(y_{i-1} in
    seg_1) and r[i, k] = r[i, k-1] * (1 - beta[i, k-1]) + p(y_{i-1} in
    seg_k), the posterior is p(y_i in seg_k) = beta[i, k] * r[i, k].
    The virtual previous token y_0 sits in segment 1, which reproduces
    the first-row initialization beta[1, k] * prod_{m<k}(1 - beta[1, m]).
    """
    if beta.data.ndim != 2 or beta.shape[1] == 0:
        raise ValueError(f"emission_posterior: need a nonempty [I, K] matrix, got {beta.shape}")
    g = beta.graph
    i_total, k_total = beta.shape

    start = np.zeros(k_total)
    start[0] = 1.0
    prev = g.tensor(start)
    rows = []
    for i in range(i_total):
        beta_row = beta[i]
        reach = linear_scan(1.0 - beta_row[: k_total - 1], prev)
        row = beta_row * reach
        rows.append(row)
        prev = row
    return stack(rows)


def attention_mapping(p_y: Tensor, f_x: Tensor) -> Tensor:
    """Availability matrix M[i, j] = sum_k p_y[i, k] * f_x[j, k], shape [I, J]."""
    if p_y.shape[1] != f_x.shape[1]:
        raise ShapeMismatch(
            f"attention_mapping: segment axes differ, p_y {p_y.shape} vs f_x {f_x.shape}")
    return p_y @ f_x.T


def expected_mapping(alpha: Tensor, beta: Tensor) -> MappingState:
    """Run both posteriors and the mapping for one example.

    `beta` is the raw emission head output; its final column is forced to
    one here so the target posterior rows normalize.
    """
    p_x, f_x = aggregation_posterior(alpha)
    forced = force_final_emission(beta)
    p_y = emission_posterior(forced)
    return MappingState(alpha=alpha, beta=forced, p_x=p_x, f_x=f_x, p_y=p_y,
                        m=attention_mapping(p_y, f_x))


def hard_segmentation(a) -> tuple[list[int], list[int]]:
    """Deterministic segmentation from binary close-decisions.

    Returns 1-based segment indices per source token and the 1-based
    positions that end each segment.  A trailing run with no close
    decision forms the final segment, so the boundary list always ends
    at J for nonempty input.
    """
    decisions = [int(v) for v in a]
    if any(v not in (0, 1) for v in decisions):
        raise ValueError("hard_segmentation: decisions must be binary")
    segment_ids = []
    seg = 1
    for d in decisions:
        segment_ids.append(seg)
        seg += d
    boundaries = [j + 1 for j, d in enumerate(decisions) if d == 1]
    if decisions and (not boundaries or boundaries[-1] != len(decisions)):
        boundaries.append(len(decisions))
    return segment_ids, boundaries
