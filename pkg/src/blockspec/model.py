"""Deterministic toy transformer and scripted logit models.

Two interchangeable model backends drive the decode loop:

* ``ToyModel`` -- a small bidirectional pre-norm transformer with rotary
  position encoding driven by the layout's absolute position IDs.  Weights
  are materialized from a seeded generator, so identical (config, seed)
  yields bit-identical weights and trajectories.
* ``ScriptedModel`` -- emits logit vectors whose argmax/softmax reproduce a
  hand-authored (token, confidence) schedule, for exact test scenarios.

Everything runs in 32-bit floats; forwards are pure functions of
(weights, tokens, layout, cache view).
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .layout import AttentionLayout

MODEL_CONFIG_KEYS = (
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "mask_token_id",
    "eos_token_id",
    "seed",
)

_LN_EPS = np.float32(1e-5)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    mask_token_id: int
    eos_token_id: int
    seed: int

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})"
            )
        if self.mask_token_id == self.eos_token_id:
            raise ConfigError("mask_token_id and eos_token_id must differ")
        for name in ("mask_token_id", "eos_token_id"):
            tid = getattr(self, name)
            if not (0 <= tid < self.vocab_size):
                raise ConfigError(f"{name} ({tid}) outside vocab")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        missing = [k for k in MODEL_CONFIG_KEYS if k not in raw]
        extra = [k for k in raw if k not in MODEL_CONFIG_KEYS]
        if missing:
            raise ConfigError(f"model config missing keys: {missing}")
        if extra:
            raise ConfigError(f"model config has unknown keys: {extra}")
        return cls(**{k: int(raw[k]) for k in MODEL_CONFIG_KEYS})

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in MODEL_CONFIG_KEYS}


def count_params(config: ModelConfig) -> int:
    """Parameter count of the toy architecture.

    embedding V*d + per layer (4 attention projections d*d + MLP d*d_ff and
    d_ff*d) + output projection d*V.  Layer norms carry no parameters.
    """
    d, v = config.d_model, config.vocab_size
    per_layer = 4 * d * d + 2 * d * config.d_ff
    return v * d + config.n_layers * per_layer + d * v


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax in float32."""
    x = np.asarray(x, dtype=np.float32)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def logits_to_prediction(logits: np.ndarray) -> tuple[int, float]:
    """Greedy (token, confidence) from one score vector.

    Confidence is the softmax probability of the argmax token; ties break to
    the lowest token id (np.argmax returns the first maximum).
    """
    logits = np.asarray(logits, dtype=np.float32).reshape(-1)
    if logits.size == 0:
        raise ShapeError("empty logit vector")
    if not np.all(np.isfinite(logits)):
        raise ShapeError("non-finite logits")
    token = int(np.argmax(logits))
    probs = softmax(logits)
    return token, float(probs[token])


@dataclass
class LogitsView:
    """Per-row score vectors with the map back to absolute positions.

    Rows correspond 1:1 to the forward layout's query rows; ``positions`` and
    ``tags`` identify them.  Speculative layouts repeat a position across
    tags, so lookups take (position, tag).
    """

    logits: np.ndarray
    positions: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float32)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.tags = np.asarray(self.tags, dtype=np.int64)
        if self.logits.ndim != 2:
            raise ShapeError("logits must be [rows, vocab]")
        if not (self.logits.shape[0] == self.positions.shape[0] == self.tags.shape[0]):
            raise ShapeError("row count mismatch between logits and position map")
        if not np.all(np.isfinite(self.logits)):
            raise ShapeError("non-finite logits in view")

    @property
    def n_rows(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]

    def row(self, position: int, tag: int = 0) -> int:
        hits = np.nonzero((self.positions == position) & (self.tags == tag))[0]
        if hits.size != 1:
            raise ShapeError(f"position {position} tag {tag}: {hits.size} rows")
        return int(hits[0])

    def prediction_at(self, position: int, tag: int = 0) -> tuple[int, float]:
        return logits_to_prediction(self.logits[self.row(position, tag)])

    def select(self, positions, tag: int = 0) -> "LogitsView":
        rows = [self.row(p, tag) for p in positions]
        return LogitsView(self.logits[rows], self.positions[rows], np.zeros(len(rows), dtype=np.int64))

    def greedy(self) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized (tokens, confidences) over all rows."""
        tokens = np.argmax(self.logits, axis=1)
        probs = softmax(self.logits, axis=1)
        confs = probs[np.arange(self.n_rows), tokens]
        return tokens.astype(np.int64), confs.astype(np.float32)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float32)
    var = x.var(axis=-1, keepdims=True, dtype=np.float32)
    return ((x - mean) / np.sqrt(var + _LN_EPS)).astype(np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(math.sqrt(2.0 / math.pi))
    return (np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))).astype(np.float32)


def _rope_tables(positions: np.ndarray, d_head: int) -> tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    inv_freq = (10000.0 ** (-np.arange(half, dtype=np.float64) / max(half, 1))).astype(np.float32)
    angles = positions.astype(np.float32)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotary encoding over the leading even span of each head dim.

    x: [rows, heads, d_head]; cos/sin: [rows, d_head // 2].
    """
    half = cos.shape[1]
    x1 = x[:, :, :half]
    x2 = x[:, :, half : 2 * half]
    rot1 = x1 * cos[:, None, :] - x2 * sin[:, None, :]
    rot2 = x1 * sin[:, None, :] + x2 * cos[:, None, :]
    out = x.copy()
    out[:, :, :half] = rot1
    out[:, :, half : 2 * half] = rot2
    return out


class ToyModel:
    """Bidirectional pre-norm transformer over laid-out token batches.

    Weights are immutable after init and shareable across threads; forward
    never mutates the model or its cache view.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        scale = np.float32(1.0 / math.sqrt(config.d_model))
        d, dff, v = config.d_model, config.d_ff, config.vocab_size

        def mat(*shape):
            return (rng.standard_normal(shape, dtype=np.float32) * scale).astype(np.float32)

        self.emb = mat(v, d)
        self.layers = []
        for _ in range(config.n_layers):
            self.layers.append(
                {
                    "wq": mat(d, d),
                    "wk": mat(d, d),
                    "wv": mat(d, d),
                    "wo": mat(d, d),
                    "w1": mat(d, dff),
                    "w2": mat(dff, d),
                }
            )
        self.wout = mat(d, v)

    @property
    def n_params(self) -> int:
        return count_params(self.config)

    def weight_checksum(self) -> int:
        """CRC over all weights in init order; determinism probe."""
        crc = 0
        crc = zlib.crc32(self.emb.tobytes(), crc)
        for layer in self.layers:
            for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
                crc = zlib.crc32(layer[name].tobytes(), crc)
        return zlib.crc32(self.wout.tobytes(), crc)

    def forward(self, tokens, layout: AttentionLayout, cache=None, step: int = 0):
        """Run the batched forward described by `layout`.

        Returns (LogitsView over query rows, per-layer fresh (K, V) of those
        rows).  `cache` supplies K/V for the layout's context entries; `step`
        is ignored (scripted models use it).
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        r = layout.n_queries
        if tokens.shape[0] != r:
            raise ShapeError(f"{tokens.shape[0]} tokens for {r} query rows")
        if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
            raise ShapeError("token id outside vocab")
        n_ctx = layout.n_context
        if n_ctx:
            if cache is None:
                raise ShapeError("layout has context entries but no cache view given")
            cache.check_compatible(cfg, layout)
        h_dim, dh = cfg.n_heads, cfg.d_head

        qpos = np.asarray(layout.query_positions, dtype=np.int64)
        cos, sin = _rope_tables(qpos, dh)
        mask = layout.dense_mask()

        x = self.emb[tokens]
        new_kv = []
        inv_sqrt = np.float32(1.0 / math.sqrt(dh))
        for li, layer in enumerate(self.layers):
            h = _layer_norm(x)
            q = _apply_rope((h @ layer["wq"]).reshape(r, h_dim, dh), cos, sin)
            k = _apply_rope((h @ layer["wk"]).reshape(r, h_dim, dh), cos, sin)
            v = (h @ layer["wv"]).reshape(r, h_dim, dh)
            new_kv.append((k, v))
            if n_ctx:
                keys = np.concatenate([cache.keys[li], k], axis=0)
                values = np.concatenate([cache.values[li], v], axis=0)
            else:
                keys, values = k, v
            scores = np.einsum("rhd,mhd->rhm", q, keys, optimize=True) * inv_sqrt
            scores = np.where(mask[:, None, :], scores, np.float32(-np.inf))
            weights = softmax(scores, axis=-1)
            ctx_out = np.einsum("rhm,mhd->rhd", weights, values, optimize=True)
            x = x + ctx_out.reshape(r, cfg.d_model) @ layer["wo"]
            x = x + _gelu(_layer_norm(x) @ layer["w1"]) @ layer["w2"]
        logits = _layer_norm(x) @ self.wout
        view = LogitsView(logits, qpos, np.asarray(layout.query_tags, dtype=np.int64))
        return view, new_kv


def init_toy_model(config: ModelConfig) -> ToyModel:
    return ToyModel(config)


# --- scripted model ---------------------------------------------------------

# Floor keeps the two-level construction's argmax on the scripted token while
# realizing a near-zero confidence for default (never-accept) entries.
def _conf_floor(vocab_size: int) -> float:
    return 2.0 / vocab_size


@dataclass
class ScriptedSchedule:
    """Deterministic per-step (token, confidence) assignments.

    `steps[n]` maps absolute position -> (token id, confidence).  Positions
    absent from a step fall back to (mask_token_id, ~0), which no threshold
    ever accepts.  EOS entries in the JSON form are folded into the position
    map at load time.
    """

    steps: list[dict[int, tuple[int, float]]]
    vocab_size: int
    mask_token_id: int
    eos_token_id: int | None = None

    def __post_init__(self):
        for n, entry in enumerate(self.steps):
            for pos, (tok, conf) in entry.items():
                if not (0.0 <= conf <= 1.0):
                    raise ConfigError(f"step {n} pos {pos}: confidence {conf} outside [0,1]")
                if not (0 <= tok < self.vocab_size):
                    raise ConfigError(f"step {n} pos {pos}: token {tok} outside vocab")

    def __len__(self) -> int:
        return len(self.steps)

    def entry(self, step: int) -> dict[int, tuple[int, float]]:
        if not (0 <= step < len(self.steps)):
            raise RangeError(f"step {step} outside schedule of length {len(self.steps)}")
        return self.steps[step]

    @classmethod
    def from_json(cls, path, vocab_size: int, mask_token_id: int, eos_token_id: int | None = None) -> "ScriptedSchedule":
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw, vocab_size, mask_token_id, eos_token_id)

    @classmethod
    def from_dict(cls, raw: dict, vocab_size: int, mask_token_id: int, eos_token_id: int | None = None) -> "ScriptedSchedule":
        if not isinstance(raw, dict):
            raise ConfigError("schedule document must be an object keyed by step index")
        steps = []
        for idx in sorted(raw, key=int):
            entry_raw = raw[idx]
            entry: dict[int, tuple[int, float]] = {}
            for pos, pair in entry_raw.get("positions", {}).items():
                entry[int(pos)] = (int(pair[0]), float(pair[1]))
            eos_entries = entry_raw.get("eos", [])
            if eos_entries and eos_token_id is None:
                raise ConfigError("schedule has eos entries but no eos_token_id was given")
            for pos, conf in eos_entries:
                entry[int(pos)] = (int(eos_token_id), float(conf))
            steps.append(entry)
        return cls(
            steps=steps,
            vocab_size=vocab_size,
            mask_token_id=mask_token_id,
            eos_token_id=eos_token_id,
        )


def _two_level_logits(vocab_size: int, mask_token_id: int, token: int, conf: float) -> np.ndarray:
    """Logit vector whose softmax puts `conf` on `token`, uniform elsewhere.

    The mask token gets a huge negative logit (unless it is the target), so
    the confidence reads the same whether or not the decode path strips the
    mask token before deciding.  Inverting the two-level softmax with n
    uniform competitors: p = e^a / (e^a + n), so a = ln(p n / (1 - p)).
    Confidence is clamped to keep the argmax on the target.
    """
    floor = _conf_floor(vocab_size)
    c = min(max(conf, floor), 1.0 - 1e-9)
    row = np.zeros(vocab_size, dtype=np.float32)
    if token == mask_token_id:
        n = vocab_size - 1
    else:
        n = vocab_size - 2
        row[mask_token_id] = np.float32(-1e30)
    a = math.log(c * n / (1.0 - c))
    row[token] = np.float32(a)
    return row


def scripted_forward(schedule: ScriptedSchedule, step: int, positions) -> LogitsView:
    """Logits reproducing the scheduled (token, confidence) pairs.

    Positions outside the step's entry get the default (mask token, ~0).
    Strict on step bounds; ScriptedModel clamps instead.
    """
    entry = schedule.entry(step)
    rows = []
    for pos in positions:
        tok, conf = entry.get(int(pos), (schedule.mask_token_id, 0.0))
        rows.append(_two_level_logits(schedule.vocab_size, schedule.mask_token_id, tok, conf))
    arr = np.stack(rows) if rows else np.zeros((0, schedule.vocab_size), dtype=np.float32)
    return LogitsView(arr, np.asarray(list(positions), dtype=np.int64), np.zeros(len(rows), dtype=np.int64))


class ScriptedModel:
    """Model backend that replays a ScriptedSchedule.

    The decode loop passes `step` as the in-block decode ordinal (refreshes
    pass their refresh ordinal), and steps beyond the schedule's length
    repeat the final entry, so short schedules describe steady-state
    behavior.  K/V outputs are zeros of the configured shape; the cache
    machinery runs unchanged but carries no information.
    """

    def __init__(self, config: ModelConfig, schedule: ScriptedSchedule):
        if schedule.vocab_size != config.vocab_size:
            raise ConfigError("schedule vocab differs from model config")
        self.config = config
        self.schedule = schedule

    def forward(self, tokens, layout: AttentionLayout, cache=None, step: int = 0):
        cfg = self.config
        r = layout.n_queries
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.shape[0] != r:
            raise ShapeError(f"{tokens.shape[0]} tokens for {r} query rows")
        clamped = min(step, len(self.schedule) - 1)
        entry = self.schedule.entry(clamped)
        rows = np.zeros((r, cfg.vocab_size), dtype=np.float32)
        for i, pos in enumerate(layout.query_positions):
            tok, conf = entry.get(int(pos), (cfg.mask_token_id, 0.0))
            rows[i] = _two_level_logits(cfg.vocab_size, cfg.mask_token_id, tok, conf)
        view = LogitsView(
            rows,
            np.asarray(layout.query_positions, dtype=np.int64),
            np.asarray(layout.query_tags, dtype=np.int64),
        )
        kv_shape = (r, cfg.n_heads, cfg.d_head)
        new_kv = [
            (np.zeros(kv_shape, dtype=np.float32), np.zeros(kv_shape, dtype=np.float32))
            for _ in range(cfg.n_layers)
        ]
        return view, new_kv
