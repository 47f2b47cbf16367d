"""Jump-share speculative decoding.

One speculative step batches the main block (tag 0) with a lattice of
candidate-subset blocks into a single forward, applies threshold acceptance
independently inside every block, then resolves an accept-jump chain over
the subset ladder {c1} -> {c1,c2} -> {c1,c2,c3} -> {c1,c2,c3,c4}:

* start at the largest ladder block whose full subset was accepted by the
  main block; failing that, at the best accepted singleton;
* keep jumping while the next ladder block's single missing candidate is
  accepted inside the current block's result.

Entering any non-main block counts as one jump and every chain hop adds one;
jumps feed the effective-NFE metric.  The singleton {c2} can join the ladder
through its one missing candidate; {c3} and {c4} are adoption fallbacks only
(their next ladder block misses two or more candidates).

Stage 1 recomputes every block position per speculative block.  Stage 2
(entered once enough of the block is decoded) keeps only still-masked rows
in speculative blocks and shares the main block's decoded-row K/V with all
of them via the attention mask, so the batched forward itself realizes the
decoded-share strategy in exactly one model evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import cache_view
from .decoder import DecodeState, RunConfig, StepOutcome, masked_greedy, threshold_decide
from .errors import ConfigError, NoCandidatesError, RangeError
from .layout import build_spec_layout
from .model import LogitsView


@dataclass(frozen=True)
class Candidate:
    position: int
    token: int
    confidence: float


@dataclass(frozen=True)
class CandidateSet:
    """Top rejected entries, confidence descending (ties by position)."""

    candidates: tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.candidates)

    def __getitem__(self, i: int) -> Candidate:
        return self.candidates[i]


def select_candidates(outcome: StepOutcome, k: int) -> CandidateSet:
    """Pick up to k speculative candidates from a step's rejections.

    rejected_top is already confidence-sorted with position tiebreaks, so the
    head of the list is the candidate order c1..ck.
    """
    if k not in (2, 4):
        raise ConfigError(f"candidate budget must be 2 or 4, got {k}")
    if not outcome.rejected_top:
        raise NoCandidatesError("no rejected entries to speculate on")
    picked = outcome.rejected_top[: k]
    return CandidateSet(
        candidates=tuple(Candidate(int(p), int(t), float(c)) for p, t, c in picked)
    )


@dataclass(frozen=True)
class SpecSet:
    """The lattice of speculative blocks evaluated in one forward.

    ``blocks`` lists (tag, subset) with subsets as 1-based candidate ordinals:
    {c1}, then for each further candidate cj the singleton {cj} and the
    prefix {c1..cj}.  Two candidates give the 3-block stage-1 lattice; four
    give the 7-block stage-2 lattice.  The main block (empty subset, tag 0)
    is implicit.
    """

    stage: int
    candidates: tuple[Candidate, ...]
    blocks: tuple[tuple[int, tuple[int, ...]], ...]

    @classmethod
    def build(cls, candidate_set: CandidateSet, stage: int) -> "SpecSet":
        m = len(candidate_set)
        if m == 0:
            raise NoCandidatesError("cannot build a speculative set without candidates")
        limit = 2 if stage == 1 else 4
        if m > limit:
            raise ConfigError(f"stage {stage} allows at most {limit} candidates, got {m}")
        blocks: list[tuple[int, tuple[int, ...]]] = [(1, (1,))]
        tag = 2
        for j in range(2, m + 1):
            blocks.append((tag, (j,)))
            tag += 1
            blocks.append((tag, tuple(range(1, j + 1))))
            tag += 1
        return cls(stage=stage, candidates=candidate_set.candidates, blocks=tuple(blocks))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def subset_of(self, tag: int) -> tuple[int, ...]:
        if tag == 0:
            return ()
        for t, subset in self.blocks:
            if t == tag:
                return subset
        raise RangeError(f"no speculative block with tag {tag}")

    def tag_of(self, subset: tuple[int, ...]) -> int | None:
        wanted = tuple(sorted(subset))
        for t, s in self.blocks:
            if tuple(sorted(s)) == wanted:
                return t
        return None


def resolve_jump(block_results: dict[int, StepOutcome], spec_set: SpecSet) -> tuple[int, int]:
    """Ladder resolution over per-block threshold outcomes.

    A candidate is "accepted in block X" when X's threshold acceptance
    unmasked the candidate's position to the candidate's exact token.
    Returns (adopted tag, jump count).
    """
    m = len(spec_set.candidates)

    def accepted_in(tag: int, ordinal: int) -> bool:
        cand = spec_set.candidates[ordinal - 1]
        return any(
            p == cand.position and t == cand.token
            for p, t, _ in block_results[tag].accepted
        )

    a0 = {j for j in range(1, m + 1) if accepted_in(0, j)}

    def prefix_tag(j: int) -> int | None:
        return spec_set.tag_of(tuple(range(1, j + 1)))

    current: frozenset[int] | None = None
    current_tag = 0
    jumps = 0
    for j in range(m, 0, -1):
        if set(range(1, j + 1)) <= a0 and prefix_tag(j) is not None:
            current = frozenset(range(1, j + 1))
            current_tag = prefix_tag(j)
            jumps = 1
            break
    if current is None:
        for i in range(2, m + 1):
            tag = spec_set.tag_of((i,))
            if i in a0 and tag is not None:
                current = frozenset({i})
                current_tag = tag
                jumps = 1
                break
    if current is None:
        return 0, 0

    while True:
        top = max(current)
        j_next = top if frozenset(range(1, top + 1)) != current else top + 1
        if j_next > m:
            break
        nxt_tag = prefix_tag(j_next)
        if nxt_tag is None:
            break
        missing = frozenset(range(1, j_next + 1)) - current
        if len(missing) != 1:
            break
        if not accepted_in(current_tag, next(iter(missing))):
            break
        current = frozenset(range(1, j_next + 1))
        current_tag = nxt_tag
        jumps += 1
    return current_tag, jumps


def spec_step(
    model,
    state: DecodeState,
    cache,
    candidates: CandidateSet,
    stage: int,
    config: RunConfig,
    *,
    epoch: int,
    step: int = 0,
) -> tuple[StepOutcome, int, int]:
    """One batched speculative forward plus jump resolution.

    Counts as a single model evaluation; blocks_evaluated reports the lattice
    width.  The adopted block's candidate subset plus its own threshold
    acceptances become the step's accepted set.  Returns (outcome, query
    rows, context+query key count) for cost accounting.
    """
    if len(candidates) == 0:
        raise NoCandidatesError("speculative step needs at least one candidate")
    block_range = state.block_range()
    start, end = block_range
    masked_abs = state.block_masked_positions()
    decoded_abs = state.block_decoded_positions()
    masked_set = {int(p) for p in masked_abs}
    for cand in candidates.candidates:
        if cand.position not in masked_set:
            raise RangeError(f"candidate position {cand.position} is not masked")
    if stage == 2 and decoded_abs.size < config.stage2_threshold:
        raise RangeError(
            f"stage 2 needs >= {config.stage2_threshold} decoded tokens, have {decoded_abs.size}"
        )

    spec_set = SpecSet.build(candidates, stage)
    view = cache_view(cache, epoch=epoch)
    layout = build_spec_layout(block_range, spec_set, stage, decoded_abs, view.positions)

    cand_token = {c.position: c.token for c in spec_set.candidates}
    subset_positions = {
        tag: {spec_set.candidates[j - 1].position for j in subset}
        for tag, subset in spec_set.blocks
    }
    tokens = np.empty(layout.n_queries, dtype=np.int64)
    for i, (pos, tag) in enumerate(zip(layout.query_positions, layout.query_tags)):
        if tag != 0 and pos in subset_positions[tag]:
            tokens[i] = cand_token[pos]
        else:
            tokens[i] = state.tokens[pos]

    logits, _ = model.forward(tokens, layout, view, step=step)

    results: dict[int, StepOutcome] = {}
    for tag in [0] + [t for t, _ in spec_set.blocks]:
        if tag == 0:
            decision_pos = [int(p) for p in masked_abs]
        else:
            decision_pos = [int(p) for p in masked_abs if int(p) not in subset_positions[tag]]
        if not decision_pos:
            results[tag] = StepOutcome(accepted=[], rejected_top=[])
            continue
        rows = [logits.row(p, tag) for p in decision_pos]
        sub = logits.logits[rows]
        sub_view = LogitsView(
            sub,
            np.asarray(decision_pos, dtype=np.int64),
            np.zeros(len(decision_pos), dtype=np.int64),
        )
        toks, confs = masked_greedy(sub_view, state.mask_token_id)
        entries = [
            (p, int(t), float(c)) for p, t, c in zip(decision_pos, toks, confs)
        ]
        accepted, rejected = threshold_decide(entries, config.accept_threshold)
        results[tag] = StepOutcome(accepted=accepted, rejected_top=rejected)

    adopted_tag, jump_count = resolve_jump(results, spec_set)
    adopted = results[adopted_tag]
    subset = spec_set.subset_of(adopted_tag)
    committed = [
        (c.position, c.token, c.confidence)
        for c in (spec_set.candidates[j - 1] for j in subset)
    ]
    accepted_all = sorted(committed + list(adopted.accepted), key=lambda e: e[0])
    outcome = StepOutcome(
        accepted=accepted_all,
        rejected_top=list(adopted.rejected_top),
        jump_count=jump_count,
        adopted_tag=adopted_tag,
        stage=stage,
        blocks_evaluated=1 + spec_set.n_blocks,
        candidates=[(c.position, c.token, c.confidence) for c in spec_set.candidates],
    )
    t_rows = layout.n_queries
    c_keys = view.size + t_rows
    return outcome, t_rows, c_keys
