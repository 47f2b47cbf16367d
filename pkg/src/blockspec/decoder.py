"""Reverse-diffusion steps, confidence-threshold decoding, and the block loop.

Three strategies share one state machine:

* ``vanilla`` -- full-sequence forward every step, no cache.  With
  ``tau_steps`` set it runs the reverse-transition sampler on a uniform time
  grid; otherwise it does block-wise threshold decoding without caching.
* ``fast``    -- DualCache block decoding: one full-sequence refresh per
  block cycle, then cached block forwards with threshold acceptance.
* ``odb``     -- fast plus adaptive length prediction at each refresh and
  jump-share speculative steps once a step leaves rejected candidates.

Decode decisions never emit the mask token: its logit is dropped before
argmax/softmax so an acceptance always unmasks (``logits_to_prediction``
itself stays vocab-complete).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cache import cache_view, refresh_dual_cache
from .errors import (
    BlockCompleteError,
    ConfigError,
    ProgressError,
    RangeError,
    ShapeError,
)
from .layout import build_block_layout, full_sequence_layout
from .model import LogitsView, softmax
from .trajectory import StepRecord, Trajectory

STRATEGIES = ("vanilla", "fast", "odb")

RUN_CONFIG_KEYS = (
    "strategy",
    "gen_length",
    "block_size",
    "accept_threshold",
    "truncate_threshold",
    "stage2_min_decoded",
    "seed",
    "tau_steps",
)


@dataclass(frozen=True)
class RunConfig:
    strategy: str
    gen_length: int
    block_size: int
    accept_threshold: float = 0.9
    truncate_threshold: float = 0.9
    stage2_min_decoded: int | None = None
    seed: int = 0
    tau_steps: int | None = None
    speculation: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.gen_length < 1 or self.block_size < 1:
            raise ConfigError("gen_length and block_size must be positive")
        if self.gen_length % self.block_size != 0:
            raise ConfigError(
                f"gen_length {self.gen_length} not a multiple of block_size {self.block_size}"
            )
        if self.tau_steps is not None:
            if self.strategy != "vanilla":
                raise ConfigError("tau_steps applies to the vanilla strategy only")
            if self.tau_steps < 1:
                raise ConfigError("tau_steps must be positive")
        if self.stage2_min_decoded is not None and not (
            1 <= self.stage2_min_decoded <= self.block_size
        ):
            raise ConfigError("stage2_min_decoded must lie in [1, block_size]")

    @property
    def stage2_threshold(self) -> int:
        if self.stage2_min_decoded is not None:
            return self.stage2_min_decoded
        return max(1, self.block_size // 4)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = set(RUN_CONFIG_KEYS) | {"speculation"}
        extra = [k for k in raw if k not in known]
        if extra:
            raise ConfigError(f"run config has unknown keys: {extra}")
        if "strategy" not in raw or "gen_length" not in raw or "block_size" not in raw:
            raise ConfigError("run config needs strategy, gen_length and block_size")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "gen_length": self.gen_length,
            "block_size": self.block_size,
            "accept_threshold": self.accept_threshold,
            "truncate_threshold": self.truncate_threshold,
            "stage2_min_decoded": self.stage2_threshold,
            "seed": self.seed,
            "tau_steps": self.tau_steps,
            "speculation": self.speculation,
        }


@dataclass
class DecodeState:
    """Token sequence, per-position mask flags and block bookkeeping."""

    tokens: np.ndarray
    masked: np.ndarray
    prompt_len: int
    gen_length: int
    block_size: int
    active_block: int = 0
    t: float = 1.0
    mask_token_id: int = 0

    @classmethod
    def new(cls, prompt_tokens, gen_length: int, block_size: int, mask_token_id: int) -> "DecodeState":
        prompt = np.asarray(prompt_tokens, dtype=np.int64).reshape(-1)
        if prompt.size == 0:
            raise ConfigError("prompt must be non-empty")
        if gen_length % block_size != 0 or gen_length < 1:
            raise ConfigError("gen_length must be a positive multiple of block_size")
        tokens = np.concatenate(
            [prompt, np.full(gen_length, mask_token_id, dtype=np.int64)]
        )
        masked = np.zeros(tokens.shape[0], dtype=bool)
        masked[prompt.size :] = True
        return cls(
            tokens=tokens,
            masked=masked,
            prompt_len=int(prompt.size),
            gen_length=gen_length,
            block_size=block_size,
            mask_token_id=mask_token_id,
        )

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_blocks(self) -> int:
        return self.gen_length // self.block_size

    def block_range(self, block: int | None = None) -> tuple[int, int]:
        b = self.active_block if block is None else block
        start = self.prompt_len + b * self.block_size
        return start, start + self.block_size

    def block_masked_positions(self) -> np.ndarray:
        start, end = self.block_range()
        pos = np.arange(start, end, dtype=np.int64)
        return pos[self.masked[start:end]]

    def block_decoded_positions(self) -> np.ndarray:
        start, end = self.block_range()
        pos = np.arange(start, end, dtype=np.int64)
        return pos[~self.masked[start:end]]

    def masked_positions(self) -> np.ndarray:
        return np.nonzero(self.masked)[0].astype(np.int64)

    def copy(self) -> "DecodeState":
        return DecodeState(
            tokens=self.tokens.copy(),
            masked=self.masked.copy(),
            prompt_len=self.prompt_len,
            gen_length=self.gen_length,
            block_size=self.block_size,
            active_block=self.active_block,
            t=self.t,
            mask_token_id=self.mask_token_id,
        )

    def check_invariants(self) -> None:
        resp = slice(self.prompt_len, self.seq_len)
        is_mask = self.tokens[resp] == self.mask_token_id
        if not np.array_equal(is_mask, self.masked[resp]):
            raise ProgressError("mask flags out of sync with mask tokens")
        if np.any(self.masked[: self.prompt_len]):
            raise ProgressError("prompt positions must never be masked")


@dataclass
class StepOutcome:
    """Result of one decode decision: what was unmasked and what remains."""

    accepted: list                      # (position, token, confidence)
    rejected_top: list                  # remaining masked, confidence desc
    jump_count: int = 0
    adopted_tag: int = 0
    stage: int = 0
    blocks_evaluated: int = 1
    candidates: list = field(default_factory=list)


def masked_greedy(view: LogitsView, mask_token_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy (tokens, confidences) with the mask token removed from the
    distribution, so committed tokens always unmask."""
    logits = view.logits.copy()
    logits[:, mask_token_id] = -np.inf
    tokens = np.argmax(logits, axis=1)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    probs = e / np.sum(e, axis=1, keepdims=True)
    confs = probs[np.arange(logits.shape[0]), tokens]
    return tokens.astype(np.int64), confs.astype(np.float32)


def threshold_decide(entries: list[tuple[int, int, float]], threshold: float):
    """Split (position, token, confidence) entries into accepted/rejected.

    Accept strictly above the threshold; when nothing clears it, accept the
    single highest-confidence entry so every step makes progress.  Ties break
    to the lower position.
    """
    if not entries:
        return [], []
    above = [e for e in entries if e[2] > threshold]
    if above:
        accepted = sorted(above, key=lambda e: e[0])
    else:
        accepted = [min(entries, key=lambda e: (-e[2], e[0]))]
    taken = {e[0] for e in accepted}
    rejected = sorted(
        (e for e in entries if e[0] not in taken), key=lambda e: (-e[2], e[0])
    )
    return accepted, rejected


def threshold_step(state: DecodeState, logits: LogitsView, threshold: float) -> StepOutcome:
    """Confidence-threshold parallel decoding over the active block.

    `logits` must cover exactly the block's masked positions; unmasked block
    tokens contribute context in the forward, never decisions.
    """
    masked_pos = state.block_masked_positions()
    if masked_pos.size == 0:
        raise BlockCompleteError("active block has no masked positions")
    if set(int(p) for p in logits.positions) != set(int(p) for p in masked_pos):
        raise ShapeError("logits must cover exactly the masked block positions")
    ordered = logits.select(masked_pos)
    tokens, confs = masked_greedy(ordered, state.mask_token_id)
    entries = [
        (int(p), int(tok), float(c)) for p, tok, c in zip(masked_pos, tokens, confs)
    ]
    accepted, rejected = threshold_decide(entries, threshold)
    return StepOutcome(accepted=accepted, rejected_top=rejected)


def apply_outcome(state: DecodeState, outcome: StepOutcome) -> None:
    for pos, tok, _conf in outcome.accepted:
        if not state.masked[pos]:
            raise ProgressError(f"position {pos} accepted twice")
        if tok == state.mask_token_id:
            raise ProgressError("acceptance must not commit the mask token")
        state.tokens[pos] = tok
        state.masked[pos] = False


def tau_leaping_step(state: DecodeState, logits: LogitsView, s: float, rng) -> DecodeState:
    """One reverse transition from noise level t to s < t.

    Unmasked positions are untouched; each masked position independently
    stays masked with probability s/t, otherwise it unmasks by sampling from
    the softmax of its logits (mask token excluded).  Consumes one uniform
    draw per masked position for the stay/unmask choice, then one per masked
    position for token sampling, in position order.
    """
    t = state.t
    if not (0.0 <= s < t <= 1.0):
        raise RangeError(f"need 0 <= s < t <= 1, got s={s} t={t}")
    new_state = state.copy()
    new_state.t = s
    masked_pos = state.masked_positions()
    if masked_pos.size == 0:
        return new_state
    rows = logits.select(masked_pos)
    stay = rng.random(masked_pos.size) < (s / t)
    probs = softmax(rows.logits, axis=1).astype(np.float64)
    probs[:, state.mask_token_id] = 0.0
    probs /= probs.sum(axis=1, keepdims=True)
    draws = rng.random(masked_pos.size)
    cum = np.cumsum(probs, axis=1)
    sampled = (cum < draws[:, None]).sum(axis=1)
    for pos, keep, tok in zip(masked_pos, stay, sampled):
        if not keep:
            new_state.tokens[pos] = int(tok)
            new_state.masked[pos] = False
    return new_state


def _masked_block_logits(view: LogitsView, state: DecodeState) -> LogitsView:
    return view.select(state.block_masked_positions())


def decode(model, prompt, config: RunConfig) -> Trajectory:
    """Run one request under the configured strategy; returns the full
    trajectory including per-step (T, C) cost inputs."""
    cfg = model.config
    state = DecodeState.new(prompt, config.gen_length, config.block_size, cfg.mask_token_id)
    traj = Trajectory(
        strategy=config.strategy,
        run_config=config.to_dict(),
        model_config=cfg.to_dict(),
        prompt_len=state.prompt_len,
        gen_length_initial=config.gen_length,
        block_size=config.block_size,
    )
    if config.strategy == "vanilla":
        if config.tau_steps is not None:
            state = _decode_vanilla_tau(model, state, config, traj)
        else:
            state = _decode_vanilla_threshold(model, state, config, traj)
    else:
        state = _decode_blockwise(model, state, config, traj)
    state.check_invariants()
    traj.final_tokens = [int(x) for x in state.tokens]
    traj.gen_length_final = state.gen_length
    traj.completed = True
    return traj


def _log_step(traj, *, phase, kind, state, t_tokens, c_tokens, epoch, outcome=None,
              cache_bytes=0):
    rec = StepRecord(
        index=len(traj.steps),
        phase=phase,
        kind=kind,
        block=state.active_block,
        epoch=epoch,
        t_tokens=t_tokens,
        c_tokens=c_tokens,
        cache_bytes=cache_bytes,
    )
    if outcome is not None:
        rec.accepted = list(outcome.accepted)
        rec.jump_count = outcome.jump_count
        rec.stage = outcome.stage
        rec.blocks_evaluated = outcome.blocks_evaluated
        rec.candidates = list(outcome.candidates)
        rec.adopted_tag = outcome.adopted_tag
    traj.add_step(rec)
    return rec


def _decode_vanilla_tau(model, state, config, traj):
    rng = np.random.default_rng(config.seed)
    k = config.tau_steps
    for i in range(k):
        if not np.any(state.masked):
            break
        layout = full_sequence_layout(state.seq_len)
        view, _ = model.forward(state.tokens, layout, None, step=i)
        s = 1.0 - (i + 1) / k
        new_state = tau_leaping_step(state, view, s, rng)
        unmasked_now = [
            (int(p), int(new_state.tokens[p]), 0.0)
            for p in np.nonzero(state.masked & ~new_state.masked)[0]
        ]
        state.tokens = new_state.tokens
        state.masked = new_state.masked
        state.t = new_state.t
        _log_step(
            traj,
            phase="decode",
            kind="tau",
            state=state,
            t_tokens=state.seq_len,
            c_tokens=state.seq_len,
            epoch=0,
            outcome=StepOutcome(accepted=unmasked_now, rejected_top=[]),
        )
    return state


def _decode_vanilla_threshold(model, state, config, traj):
    while state.active_block < state.n_blocks:
        guard = 0
        while state.block_masked_positions().size > 0:
            layout = full_sequence_layout(state.seq_len)
            view, _ = model.forward(state.tokens, layout, None, step=guard)
            outcome = threshold_step(
                state, _masked_block_logits(view, state), config.accept_threshold
            )
            apply_outcome(state, outcome)
            _log_step(
                traj,
                phase="decode",
                kind="threshold",
                state=state,
                t_tokens=state.seq_len,
                c_tokens=state.seq_len,
                epoch=0,
                outcome=outcome,
            )
            guard += 1
            if guard > state.block_size:
                raise ProgressError("block failed to complete within block_size steps")
        state.active_block += 1
    return state


def _decode_blockwise(model, state, config, traj):
    from .alp import apply_truncation, scan_eos
    from .speculative import select_candidates, spec_step

    is_odb = config.strategy == "odb"
    epoch = 0
    while state.active_block < state.n_blocks:
        epoch += 1
        block_range = state.block_range()
        refresh_len = state.seq_len
        # scripted models read refresh drafts by refresh ordinal, decode
        # steps by their in-block ordinal
        cache, draft = refresh_dual_cache(
            model, state, block_range, epoch=epoch, step=epoch - 1
        )
        _log_step(
            traj,
            phase="prefill",
            kind="refresh",
            state=state,
            t_tokens=refresh_len,
            c_tokens=refresh_len,
            epoch=epoch,
            cache_bytes=cache.nbytes(),
        )
        if is_odb:
            cut = scan_eos(draft, state, config.truncate_threshold)
            if cut is not None:
                state, event = apply_truncation(state, cut, refresh_epoch=epoch)
                if event is not None:
                    traj.truncations.append(event)
                    cache = cache.truncated(state.seq_len)

        prev_outcome = None
        block_step = 0
        while state.block_masked_positions().size > 0:
            masked_before = int(state.masked.sum())
            use_spec = (
                is_odb
                and config.speculation
                and prev_outcome is not None
                and len(prev_outcome.rejected_top) > 0
            )
            if use_spec:
                decoded = state.block_decoded_positions().size
                stage = 2 if decoded >= config.stage2_threshold else 1
                k = 4 if stage == 2 else 2
                candidates = select_candidates(prev_outcome, k)
                outcome, t_rows, c_keys = spec_step(
                    model, state, cache, candidates, stage, config,
                    epoch=epoch, step=block_step,
                )
                kind = "spec"
            else:
                view = cache_view(cache, epoch=epoch)
                layout = build_block_layout(block_range, view.positions)
                start, end = block_range
                logits, _ = model.forward(
                    state.tokens[start:end], layout, view, step=block_step
                )
                outcome = threshold_step(
                    state, _masked_block_logits(logits, state), config.accept_threshold
                )
                t_rows = layout.n_queries
                c_keys = view.size + t_rows
                kind = "threshold"
            apply_outcome(state, outcome)
            if int(state.masked.sum()) >= masked_before:
                raise ProgressError("decode step unmasked zero tokens")
            _log_step(
                traj,
                phase="decode",
                kind=kind,
                state=state,
                t_tokens=t_rows,
                c_tokens=c_keys,
                epoch=epoch,
                outcome=outcome,
            )
            prev_outcome = outcome
            block_step += 1
        state.active_block += 1
    return state
