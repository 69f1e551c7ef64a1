"""Streaming inference policies and their traces.

The adaptive policy alternates WAIT (read source tokens until the close
probability fires or the source is exhausted, then aggregate them into a
segment) and GENERATE (emit target tokens while the segment's emission
probability stays above threshold, unconditionally once the source is
exhausted, until end-of-sequence).  Heuristic baselines reuse the same
trained decoder under hard availability masks, so only the read/write
schedule differs.

Because the encoder is causal, encoding the full source once and slicing
prefixes is exactly equal to re-encoding each prefix; sessions exploit
that.  One decoding session is single-threaded; distinct sessions are
independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .vocab import BOS, EOS, token_str

SEGMENT_EMIT_CAP = 32  # per-segment emission cap; guards against a stuck beta


def default_max_target(source_len: int) -> int:
    return 2 * source_len + 16


@dataclass
class PolicyConfig:
    kind: str = "adaptive"  # adaptive | wait_k | fixed_segment | wait_k_stride_n
    k: int = 3
    stride: int = 1
    segment_length: int = 4
    beam: int = 1
    max_target: int | None = None

    def __post_init__(self):
        kinds = ("adaptive", "wait_k", "fixed_segment", "wait_k_stride_n")
        if self.kind not in kinds:
            raise ValueError(f"unknown policy kind {self.kind!r}; choose from {kinds}")
        for name in ("k", "stride", "segment_length", "beam"):
            if getattr(self, name) < 1:
                raise ValueError(f"policy {name} must be >= 1")


@dataclass
class StreamTrace:
    """Ordered read/write record of one simultaneous decoding run.

    `t[i]` is the number of reads before the i-th content write; the
    end-of-sequence write appears in `events` but not in `t` or
    `hypothesis`.  `boundaries` are the 1-based source positions ending
    each aggregated segment; `segment_of_write[i]` is the 1-based segment
    that emitted token i.
    """

    events: list[tuple[str, int]] = field(default_factory=list)
    t: list[int] = field(default_factory=list)
    hypothesis: list[int] = field(default_factory=list)
    boundaries: list[int] = field(default_factory=list)
    segment_of_write: list[int] = field(default_factory=list)
    truncated: bool = False

    def read(self, index: int) -> None:
        self.events.append(("read", index))

    def write(self, token: int, reads: int, segment: int) -> None:
        self.events.append(("write", token))
        if token != EOS:
            self.t.append(reads)
            self.hypothesis.append(token)
            self.segment_of_write.append(segment)


class Session:
    """Per-source decoding state: cached causal encodings and greedy steps."""

    def __init__(self, model, source):
        if len(source) == 0:
            raise ValueError("empty source")
        self.model = model
        self.source = list(source)
        graph = Graph()
        bound = model.bind(graph)
        enc = model.encode(graph, bound, self.source)
        self.enc_states = enc.data
        self.alpha = model.aggregation_probs(bound, enc).data
        self.w_src_seg = model.params["w_src_seg"]

    def segment_rep(self, start: int, end: int) -> np.ndarray:
        """Hard segment representation for source tokens start..end-1 (0-based)."""
        if end <= start:
            return np.zeros(self.model.config.d)
        return self.enc_states[start:end].sum(axis=0) @ self.w_src_seg

    def emission_prob(self, written: list[int], seg_rep: np.ndarray) -> float:
        """beta for the next target position given the committed+candidate tokens."""
        graph = Graph()
        bound = self.model.bind(graph)
        prefix = [BOS] + written
        dec_in = self.model.decoder_inputs(graph, bound, prefix)
        beta = self.model.emission_probs(bound, dec_in, graph.tensor(seg_rep[None, :]))
        return float(beta.data[len(prefix) - 1, 0])

    def next_distribution(self, written: list[int], row_reads: list[int],
                          current_reads: int) -> np.ndarray:
        """Distribution over the next token; one availability row per query.

        Historical rows reuse the read counts their tokens were generated
        under, so recomputation reproduces the streaming states exactly.
        """
        prefix = [BOS] + written
        reads = list(row_reads) + [current_reads] * (len(prefix) - len(row_reads))
        avail = np.zeros((len(prefix), len(self.source)), dtype=bool)
        for r, n in enumerate(reads):
            avail[r, :n] = True
        graph = Graph()
        bound = self.model.bind(graph)
        enc = graph.tensor(self.enc_states)
        dists = self.model.decode(graph, bound, prefix, enc, availability=avail)
        return dists.data[-1]


@dataclass
class _Beam:
    tokens: list[int]
    logp: float

    def score(self) -> float:
        # length-normalized log-probability; an empty beam scores 0 but is
        # only ever selected when every beam stopped before emitting
        return self.logp / len(self.tokens) if self.tokens else 0.0


def segment_beam_emit(session: Session, written: list[int], row_reads: list[int],
                      seg_rep: np.ndarray, reads: int, exhausted: bool,
                      beam_width: int, budget: int) -> list[int]:
    """Emit the tokens of one segment with per-segment beam search.

    Beams expand token by token; a beam stops when the emission
    probability for its next position drops below 0.5 (unless the source
    is exhausted, which makes emission unconditional), when it emits
    end-of-sequence, or at the per-segment cap.  The committed beam is
    the stopped one with the highest length-normalized log-probability;
    committed tokens are never revised.  `budget` caps total emissions
    (remaining room before the max target length).
    """
    cap = min(SEGMENT_EMIT_CAP, budget)
    active = [_Beam([], 0.0)]
    finished: list[_Beam] = []
    while active:
        expansions: list[_Beam] = []
        for beam in active:
            if len(beam.tokens) >= cap:
                finished.append(beam)
                continue
            if not exhausted:
                beta = session.emission_prob(written + beam.tokens, seg_rep)
                if beta < 0.5:
                    finished.append(beam)
                    continue
            dist = session.next_distribution(written + beam.tokens, row_reads, reads)
            order = np.argsort(-dist, kind="stable")[:beam_width]
            for tok in order:
                child = _Beam(beam.tokens + [int(tok)],
                              beam.logp + float(np.log(max(dist[tok], 1e-300))))
                if int(tok) == EOS:
                    finished.append(child)
                else:
                    expansions.append(child)
        expansions.sort(key=lambda b: -b.logp)
        active = expansions[:beam_width]
    best = max(finished, key=lambda b: b.score())
    return best.tokens


def run_adaptive(model, source, config: PolicyConfig, session: Session | None = None) -> StreamTrace:
    """The learned wait/generate state machine."""
    session = session or Session(model, source)
    decisions = session.alpha >= 0.5
    j_total = len(source)
    max_target = config.max_target or default_max_target(j_total)

    trace = StreamTrace()
    j = 0
    seg_start = 0
    segment = 0
    while True:
        # WAIT: always take one fresh token for a new segment, then keep
        # reading until the close decision fires or the source runs out
        while j < j_total and (j == seg_start or not decisions[j - 1]):
            j += 1
            trace.read(j)
        segment += 1
        if j > seg_start:
            trace.boundaries.append(j)
        seg_rep = session.segment_rep(seg_start, j)
        seg_start = j
        exhausted = j == j_total

        emitted = segment_beam_emit(
            session, trace.hypothesis, trace.t, seg_rep, j, exhausted,
            config.beam, budget=max_target - len(trace.hypothesis))
        saw_eos = False
        for tok in emitted:
            trace.write(tok, reads=j, segment=segment)
            if tok == EOS:
                saw_eos = True
        if saw_eos:
            return trace
        if len(trace.hypothesis) >= max_target:
            trace.truncated = True
            return trace


def _greedy_one(session: Session, trace: StreamTrace, reads: int, segment: int) -> bool:
    """Emit one greedy token; returns True if it was end-of-sequence."""
    dist = session.next_distribution(trace.hypothesis, trace.t, reads)
    tok = int(np.argmax(dist))
    trace.write(tok, reads=reads, segment=segment)
    return tok == EOS


def _schedule_trace(model, source, config: PolicyConfig, schedule,
                    session: Session | None = None) -> StreamTrace:
    """Run a fixed read/write schedule: (initial_reads, reads_per_round, writes_per_round)."""
    session = session or Session(model, source)
    j_total = len(source)
    max_target = config.max_target or default_max_target(j_total)
    first, step_reads, step_writes = schedule

    trace = StreamTrace()
    j = 0
    segment = 0

    def read_block(n):
        nonlocal j, segment
        took = 0
        while j < j_total and took < n:
            j += 1
            took += 1
            trace.read(j)
        if took:
            segment += 1
            trace.boundaries.append(j)

    read_block(first)
    while True:
        emitted = 0
        while emitted < step_writes or j == j_total:
            if _greedy_one(session, trace, j, segment):
                return trace
            emitted += 1
            if len(trace.hypothesis) >= max_target:
                trace.truncated = True
                return trace
        read_block(step_reads)


def run_waitk(model, source, k: int, config: PolicyConfig | None = None,
              session: Session | None = None) -> StreamTrace:
    """Read k tokens, then alternate one write and one read: t_i = min(k+i-1, J)."""
    config = config or PolicyConfig(kind="wait_k", k=k)
    return _schedule_trace(model, source, config, (k, 1, 1), session=session)


def run_waitk_stride_n(model, source, k: int, n: int,
                       config: PolicyConfig | None = None,
                       session: Session | None = None) -> StreamTrace:
    """Read k tokens, then alternate n writes and n reads."""
    config = config or PolicyConfig(kind="wait_k_stride_n", k=k, stride=n)
    return _schedule_trace(model, source, config, (k, n, n), session=session)


def run_fixed_segment(model, source, segment_length: int, n: int,
                      config: PolicyConfig | None = None,
                      session: Session | None = None) -> StreamTrace:
    """Read fixed-size chunks; emit up to n tokens per chunk."""
    config = config or PolicyConfig(kind="fixed_segment", segment_length=segment_length,
                                    stride=n)
    return _schedule_trace(model, source, config, (segment_length, segment_length, n),
                           session=session)


def offline_decode(model, source, max_target: int | None = None) -> list[int]:
    """Greedy decoding with the whole source available; no trace."""
    trace = run_waitk(model, source, k=len(source),
                      config=PolicyConfig(kind="wait_k", k=len(source),
                                          max_target=max_target))
    return trace.hypothesis


def run_policy(model, source, config: PolicyConfig) -> StreamTrace:
    if config.kind == "adaptive":
        return run_adaptive(model, source, config)
    if config.kind == "wait_k":
        return run_waitk(model, source, config.k, config)
    if config.kind == "wait_k_stride_n":
        return run_waitk_stride_n(model, source, config.k, config.stride, config)
    return run_fixed_segment(model, source, config.segment_length, config.stride, config)


# -- trace (de)serialization ---------------------------------------------------


def trace_to_jsonl(trace: StreamTrace) -> str:
    lines = []
    for kind, value in trace.events:
        if kind == "read":
            lines.append(json.dumps({"type": "read", "index": value}))
        else:
            lines.append(json.dumps({"type": "write", "token": token_str(value)}))
    lines.append(json.dumps({
        "type": "summary",
        "t": trace.t,
        "truncated": trace.truncated,
        "boundaries": trace.boundaries,
        "segments": trace.segment_of_write,
        "hypothesis": trace.hypothesis,
    }))
    return "\n".join(lines)


def summaries_from_jsonl(text: str) -> list[dict]:
    """Extract the summary objects from concatenated trace JSONL."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"trace line {lineno}: {exc}") from None
        if obj.get("type") == "summary":
            out.append(obj)
    return out


def validate_trace(trace: StreamTrace, source_len: int) -> None:
    """Assert the stream invariants; raises AssertionError on violation."""
    reads = [v for kind, v in trace.events if kind == "read"]
    assert reads == list(range(1, len(reads) + 1)), "reads not 1..n in order"
    assert len(reads) <= source_len
    assert all(b - a >= 0 for a, b in zip(trace.t, trace.t[1:])), "t not non-decreasing"
    writes = [v for kind, v in trace.events if kind == "write"]
    if not trace.truncated and writes:
        assert writes[-1] == EOS, "final write is not end-of-sequence"
    # t consistency with event order
    n_reads = 0
    recomputed = []
    for kind, v in trace.events:
        if kind == "read":
            n_reads += 1
        elif v != EOS:
            recomputed.append(n_reads)
    assert recomputed == trace.t, "t does not match event order"
