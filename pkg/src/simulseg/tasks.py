"""Synthetic monotonic transduction tasks with known gold alignments.

Every rule is a deterministic function of the token values (never of the
position), so a model can learn it; the generators therefore also know
the exact source position that produced each target token and the exact
segment boundaries, which is what the alignment-based metrics consume.

Positions in alignments and boundaries are 1-based; token ids share the
reserved-specials convention of the vocab module (content ids start at
NUM_SPECIALS).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .vocab import NUM_SPECIALS

KINDS = ("copy", "expand", "compress", "local_reorder")


@dataclass
class Example:
    source: list[int]
    target: list[int]
    alignment: list[int]   # producing source position per target token
    boundaries: list[int]  # source positions ending gold segments, always ends at J


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 5
    max_len: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {KINDS}")
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4 for the task rules, "
                             f"got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")


def _content_index(token: int) -> int:
    return token - NUM_SPECIALS


def doubles(token: int) -> bool:
    """Expansion rule: tokens with even content index emit twice."""
    return _content_index(token) % 2 == 0


def silent(token: int) -> bool:
    """Compression rule: every fourth content token emits nothing."""
    return _content_index(token) % 4 == 0


def transduce(kind: str, source: list[int],
              swaps: list[bool] | None = None) -> tuple[list[int], list[int], list[int]]:
    """Apply a task rule: returns (target, alignment, boundaries)."""
    j_total = len(source)
    if kind == "copy":
        return list(source), list(range(1, j_total + 1)), list(range(1, j_total + 1))

    if kind == "expand":
        target, alignment = [], []
        for pos, tok in enumerate(source, start=1):
            reps = 2 if doubles(tok) else 1
            target.extend([tok] * reps)
            alignment.extend([pos] * reps)
        return target, alignment, list(range(1, j_total + 1))

    if kind == "compress":
        target, alignment, boundaries = [], [], []
        for pos, tok in enumerate(source, start=1):
            if not silent(tok):
                target.append(tok)
                alignment.append(pos)
                boundaries.append(pos)
        if not boundaries or boundaries[-1] != j_total:
            boundaries.append(j_total)  # trailing silent tokens close the last segment
        return target, alignment, boundaries

    # local_reorder: adjacent pairs may swap; both outputs of a pair become
    # available only once its later token arrived
    target, alignment, boundaries = [], [], []
    pair_count = j_total // 2
    if swaps is None:
        swaps = [False] * pair_count
    for p in range(pair_count):
        a, b = source[2 * p], source[2 * p + 1]
        later = 2 * p + 2
        target.extend([b, a] if swaps[p] else [a, b])
        alignment.extend([later, later])
        boundaries.append(later)
    if j_total % 2:
        target.append(source[-1])
        alignment.append(j_total)
        boundaries.append(j_total)
    return target, alignment, boundaries


def generate(spec: TaskSpec, count: int) -> list[Example]:
    """Deterministic examples from (spec, count)."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = NUM_SPECIALS, NUM_SPECIALS + spec.vocab_size
    examples = []
    while len(examples) < count:
        j_total = int(rng.integers(spec.min_len, spec.max_len + 1))
        source = rng.integers(lo, hi, size=j_total).tolist()
        swaps = rng.random(j_total // 2) < 0.5 if spec.kind == "local_reorder" else None
        target, alignment, boundaries = transduce(
            spec.kind, source, swaps.tolist() if swaps is not None else None)
        if not target:
            continue  # an all-silent compress draw; resample
        examples.append(Example(source, target, alignment, boundaries))
    return examples


# -- JSONL persistence ----------------------------------------------------------

_FIELDS = ("source", "target", "alignment", "boundaries")


def serialize(examples, path) -> None:
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps({k: getattr(ex, k) for k in _FIELDS}) + "\n")


def deserialize(path) -> list[Example]:
    examples = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            missing = [k for k in _FIELDS if k not in obj]
            if missing:
                raise ValueError(f"{path}: line {lineno}: missing fields {missing}")
            examples.append(Example(*(list(obj[k]) for k in _FIELDS)))
    return examples
