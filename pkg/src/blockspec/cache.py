"""DualCache (prefix + suffix KV) and the shared decoded-token KV store.

A refresh runs one full-sequence forward, keeps the K/V of every position
outside the active block, and hands back the full-sequence logits draft so
EOS scanning costs no extra forward.  Within one block cycle the cache is
frozen (the deliberate staleness of block-wise decoding); a new cycle bumps
``refresh_epoch`` and views built for older epochs are refused.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySharedError, RangeError, ShapeError, StaleCacheError
from .layout import CACHE, SHARED, AttentionLayout, build_block_layout, full_sequence_layout
from .model import LogitsView


@dataclass
class PrefillDraft:
    """Full-sequence logits from a cache refresh, before re-masking.

    The draft is the model's whole-response attempt at refresh time; the
    length predictor scans it for confident EOS predictions.  The token ids
    needed for that scan travel with the draft.
    """

    view: LogitsView
    seq_len: int
    epoch: int
    eos_token_id: int
    mask_token_id: int

    def greedy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.view.greedy()


@dataclass
class DualCache:
    """Per-layer K/V for the prefix [0, block_start) and suffix
    [block_end, seq_len) regions, stamped with a refresh epoch."""

    positions: np.ndarray            # absolute positions, ascending
    keys: list[np.ndarray]           # per layer [n_cached, heads, d_head]
    values: list[np.ndarray]
    block_range: tuple[int, int]
    refresh_epoch: int
    snapshot_len: int

    def __post_init__(self):
        start, end = self.block_range
        inside = (self.positions >= start) & (self.positions < end)
        if np.any(inside):
            raise RangeError("cache covers positions inside the active block")
        if len(self.keys) != len(self.values):
            raise ShapeError("key/value layer counts differ")

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_prefix(self) -> int:
        return int(np.sum(self.positions < self.block_range[0]))

    @property
    def n_suffix(self) -> int:
        return self.size - self.n_prefix

    def nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))

    def truncated(self, new_seq_len: int) -> "DualCache":
        """Drop suffix entries at or beyond the new sequence length.

        Used when the length predictor shrinks the response mid-cycle; the
        epoch is unchanged (same refresh snapshot, shorter tail).
        """
        keep = self.positions < new_seq_len
        return DualCache(
            positions=self.positions[keep],
            keys=[k[keep] for k in self.keys],
            values=[v[keep] for v in self.values],
            block_range=self.block_range,
            refresh_epoch=self.refresh_epoch,
            snapshot_len=min(self.snapshot_len, new_seq_len),
        )


@dataclass
class SharedKV:
    """K/V of the active block's decoded positions, computed once in the main
    block's context and shared read-only by every speculative block."""

    positions: np.ndarray
    keys: list[np.ndarray]
    values: list[np.ndarray]
    epoch: int

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])


@dataclass
class CacheView:
    """Concatenated key/value context for one forward.

    Entries are ordered cache (ascending position) then shared; indexing is
    what matters, nothing is copied out of band.
    """

    positions: np.ndarray
    sources: tuple[str, ...]
    keys: list[np.ndarray]
    values: list[np.ndarray]
    epoch: int

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])

    def check_compatible(self, config, layout: AttentionLayout) -> None:
        if layout.n_context != self.size:
            raise ShapeError(
                f"layout expects {layout.n_context} context keys, view has {self.size}"
            )
        if tuple(int(p) for p in self.positions) != layout.context_positions:
            raise ShapeError("context positions disagree between layout and cache view")
        if self.sources != layout.context_sources:
            raise ShapeError("context sources disagree between layout and cache view")
        if len(self.keys) != config.n_layers:
            raise ShapeError(
                f"cache has {len(self.keys)} layers, model has {config.n_layers}"
            )
        for k in self.keys:
            if k.shape[1:] != (config.n_heads, config.d_head):
                raise ShapeError("cache head dims disagree with model config")


def refresh_dual_cache(model, state, block_range: tuple[int, int], epoch: int = 1, step: int = 0):
    """Full-sequence forward; cache everything outside the block.

    Returns (DualCache, PrefillDraft).  Counts as one prefill forward with
    T = full sequence length; the draft is the same forward's logits.
    """
    start, end = block_range
    seq_len = state.seq_len
    if not (state.prompt_len <= start < end <= seq_len):
        raise RangeError(f"block [{start}, {end}) outside response region")
    layout = full_sequence_layout(seq_len)
    view, new_kv = model.forward(state.tokens, layout, None, step=step)
    positions = np.arange(seq_len, dtype=np.int64)
    outside = (positions < start) | (positions >= end)
    cache = DualCache(
        positions=positions[outside],
        keys=[k[outside] for k, _ in new_kv],
        values=[v[outside] for _, v in new_kv],
        block_range=(start, end),
        refresh_epoch=epoch,
        snapshot_len=seq_len,
    )
    return cache, PrefillDraft(
        view=view,
        seq_len=seq_len,
        epoch=epoch,
        eos_token_id=model.config.eos_token_id,
        mask_token_id=model.config.mask_token_id,
    )


def build_shared_kv(model, state, block_range: tuple[int, int], cache: DualCache, step: int = 0) -> SharedKV:
    """K/V of the block's decoded positions from one main-block forward.

    Decoded tokens attend to the dual cache plus all block positions, exactly
    as they do inside the main block; the extracted K/V can then stand in for
    those rows in any speculative block's context.
    """
    start, end = block_range
    block_positions = np.arange(start, end, dtype=np.int64)
    decoded = block_positions[~state.masked[start:end]]
    if decoded.size == 0:
        raise EmptySharedError("no decoded positions in the active block")
    layout = build_block_layout(block_range, cache.positions)
    view = cache_view(cache, epoch=cache.refresh_epoch)
    _, new_kv = model.forward(state.tokens[start:end], layout, view, step=step)
    rows = decoded - start
    return SharedKV(
        positions=decoded,
        keys=[k[rows] for k, _ in new_kv],
        values=[v[rows] for _, v in new_kv],
        epoch=cache.refresh_epoch,
    )


def cache_view(cache: DualCache, shared: SharedKV | None = None, *, epoch: int | None = None) -> CacheView:
    """Assemble the key/value context: cache entries then shared entries.

    `epoch` is the caller's current block-cycle epoch; a mismatch with the
    cache (or shared) stamp raises StaleCacheError so views never leak across
    refreshes.
    """
    expected = cache.refresh_epoch if epoch is None else epoch
    if cache.refresh_epoch != expected:
        raise StaleCacheError(
            f"cache epoch {cache.refresh_epoch} != current epoch {expected}"
        )
    if shared is not None and shared.epoch != expected:
        raise StaleCacheError(
            f"shared KV epoch {shared.epoch} != current epoch {expected}"
        )
    positions = cache.positions
    sources: tuple[str, ...] = (CACHE,) * cache.size
    keys = list(cache.keys)
    values = list(cache.values)
    if shared is not None:
        positions = np.concatenate([positions, shared.positions])
        sources = sources + (SHARED,) * shared.size
        keys = [np.concatenate([c, s], axis=0) for c, s in zip(keys, shared.keys)]
        values = [np.concatenate([c, s], axis=0) for c, s in zip(values, shared.values)]
    return CacheView(positions=positions, sources=sources, keys=keys, values=values, epoch=expected)
