"""Adaptive length prediction: EOS scanning over the prefill draft.

At every cache refresh the full-sequence draft already contains a prediction
for each still-masked position.  A confident EOS prediction at or beyond the
active block's end means the model expects the response to finish there, so
the remaining generation length is truncated (rounded up to a block multiple,
keeping the EOS position).  Lengths only ever shrink.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .cache import PrefillDraft
from .decoder import DecodeState, masked_greedy
from .errors import RangeError

log = logging.getLogger(__name__)


@dataclass
class TruncationEvent:
    refresh_epoch: int
    eos_position: int          # absolute sequence index
    eos_confidence: float
    old_gen_length: int
    new_gen_length: int

    def to_dict(self) -> dict:
        return {
            "refresh_epoch": self.refresh_epoch,
            "eos_position": self.eos_position,
            "eos_confidence": float(self.eos_confidence),
            "old_gen_length": self.old_gen_length,
            "new_gen_length": self.new_gen_length,
        }


def scan_eos(
    draft: PrefillDraft, state: DecodeState, truncate_threshold: float
) -> tuple[int, float] | None:
    """Earliest confident EOS prediction beyond the active block.

    Scans response positions at or after the active block's end whose greedy
    draft prediction is the EOS token with confidence strictly above the
    threshold.  Returns (response offset, confidence) or None; thresholds
    above 1.0 therefore never fire.  Total function.
    """
    if truncate_threshold <= 0.0:
        raise RangeError("truncate threshold must be positive")
    if draft.seq_len != state.seq_len:
        raise RangeError("draft does not cover the current sequence")
    _, block_end = state.block_range()
    if block_end >= state.seq_len:
        return None
    tokens, confs = masked_greedy(draft.view, draft.mask_token_id)
    positions = draft.view.positions
    hit = (
        (positions >= block_end)
        & (tokens == draft.eos_token_id)
        & (confs > truncate_threshold)
    )
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        return None
    first = int(idx[0])
    return int(positions[first]) - state.prompt_len, float(confs[first])


def apply_truncation(
    state: DecodeState, cut: tuple[int, float], refresh_epoch: int = 0
) -> tuple[DecodeState, TruncationEvent | None]:
    """Shrink the generation length to cover a confident EOS.

    new_gen_length = ceil((offset + 1) / block_size) * block_size, clamped to
    the active block's end.  Never deletes an unmasked token and never cuts
    the active block; cuts that do not strictly shrink are no-ops.
    """
    offset, confidence = cut
    block_end_offset = (state.active_block + 1) * state.block_size
    if offset < block_end_offset:
        log.warning("truncation at offset %d inside decoded region; ignored", offset)
        return state, None
    if offset >= state.gen_length:
        raise RangeError(f"cut offset {offset} beyond gen_length {state.gen_length}")
    new_gen = math.ceil((offset + 1) / state.block_size) * state.block_size
    new_gen = max(new_gen, block_end_offset)
    if new_gen >= state.gen_length:
        return state, None
    drop_from = state.prompt_len + new_gen
    if not np.all(state.masked[drop_from:]):
        log.warning("truncation would delete unmasked tokens; ignored")
        return state, None
    new_state = state.copy()
    new_state.tokens = new_state.tokens[:drop_from]
    new_state.masked = new_state.masked[:drop_from]
    old_gen = state.gen_length
    new_state.gen_length = new_gen
    event = TruncationEvent(
        refresh_epoch=refresh_epoch,
        eos_position=state.prompt_len + offset,
        eos_confidence=confidence,
        old_gen_length=old_gen,
        new_gen_length=new_gen,
    )
    return new_state, event
