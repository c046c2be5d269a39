"""Score-producing models for weekly cross-sectional ranking.

The central architecture is an encoder stack: a linear input projection
followed by self-attention encoder layers, scored per instrument by a
small fully connected head. Variants differ in how a pre-trained stack
from a larger market is reused:

* ``EncoderRanker``       - one stack and a head (the source model and
                            the self-attention ranker baseline)
* ``TransferEncoderRanker`` - a pre-trained stack re-headed for the new
                            market, optionally behind a width-matching
                            bridge (plain parameter sharing)
* ``FusedEncoderRanker``  - pre-trained source stack and a fresh target
                            stack run in parallel; their outputs are
                            concatenated before the head (the fused
                            model)
* ``MlpRanker``           - pointwise regress-then-rank baseline

There are no positional encodings anywhere, so every list-aware model is
permutation equivariant over instrument rows.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ConfigError,
    GraphError,
    Parameter,
    Tensor,
    concat_cols,
    dropout,
    elu,
    glorot_uniform,
    layer_norm,
    load_checkpoint,
    matmul,
    save_checkpoint,
    softmax_rows,
    transpose,
)

ONE_WEEK_FEATURE = "norm_1"


@dataclass
class ModelConfig:
    """Architecture knobs shared by the encoder models."""

    d_model: int = 32
    d_ff: int = 32
    n_layers: int = 1
    n_heads: int = 1
    dropout: float = 0.0
    head_hidden: int = 32

    def validate(self) -> "ModelConfig":
        if self.n_layers < 1:
            raise ConfigError(f"encoder stacks need at least one layer, got {self.n_layers}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"head count {self.n_heads} must divide feature width {self.d_model} exactly"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        if self.d_ff < 1 or self.head_hidden < 1:
            raise ConfigError("widths must be positive")
        return self


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class AttentionParams:
    w_q: list[Parameter]
    w_k: list[Parameter]
    w_v: list[Parameter]
    w_o: Parameter

    @property
    def n_heads(self) -> int:
        return len(self.w_q)


@dataclass
class EncoderLayerParams:
    attention: AttentionParams
    ff_in: Parameter
    ff_out: Parameter
    norm1_gain: Parameter
    norm1_bias: Parameter
    norm2_gain: Parameter
    norm2_bias: Parameter
    dropout: float


@dataclass
class EncoderStackParams:
    projection: Parameter
    projection_bias: Parameter
    layers: list[EncoderLayerParams] = field(default_factory=list)

    @property
    def input_width(self) -> int:
        return self.projection.data.shape[0]

    @property
    def d_model(self) -> int:
        return self.projection.data.shape[1]


@dataclass
class HeadParams:
    """Per-row scoring head: hidden layer with ELU, then a scalar projection."""

    w_hidden: Parameter
    w_out: Parameter


def init_attention(rng: np.random.Generator, d_model: int, n_heads: int) -> AttentionParams:
    d_head = d_model // n_heads
    w_q, w_k, w_v = [], [], []
    for _ in range(n_heads):
        w_q.append(Parameter(glorot_uniform(rng, d_model, d_head)))
        w_k.append(Parameter(glorot_uniform(rng, d_model, d_head)))
        w_v.append(Parameter(glorot_uniform(rng, d_model, d_head)))
    w_o = Parameter(glorot_uniform(rng, n_heads * d_head, d_model))
    return AttentionParams(w_q, w_k, w_v, w_o)


def init_encoder_layer(rng: np.random.Generator, cfg: ModelConfig) -> EncoderLayerParams:
    return EncoderLayerParams(
        attention=init_attention(rng, cfg.d_model, cfg.n_heads),
        ff_in=Parameter(glorot_uniform(rng, cfg.d_model, cfg.d_ff)),
        ff_out=Parameter(glorot_uniform(rng, cfg.d_ff, cfg.d_model)),
        norm1_gain=Parameter(np.ones(cfg.d_model)),
        norm1_bias=Parameter(np.zeros(cfg.d_model)),
        norm2_gain=Parameter(np.ones(cfg.d_model)),
        norm2_bias=Parameter(np.zeros(cfg.d_model)),
        dropout=cfg.dropout,
    )


def init_encoder_stack(rng: np.random.Generator, k: int, cfg: ModelConfig) -> EncoderStackParams:
    cfg.validate()
    return EncoderStackParams(
        projection=Parameter(glorot_uniform(rng, k, cfg.d_model)),
        projection_bias=Parameter(np.zeros(cfg.d_model)),
        layers=[init_encoder_layer(rng, cfg) for _ in range(cfg.n_layers)],
    )


def init_head(rng: np.random.Generator, in_width: int, hidden: int) -> HeadParams:
    return HeadParams(
        w_hidden=Parameter(glorot_uniform(rng, in_width, hidden)),
        w_out=Parameter(glorot_uniform(rng, hidden, 1)),
    )


# ---------------------------------------------------------------------------
# forward passes


def attention(x: Tensor, p: AttentionParams) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product self-attention over instrument rows.

    Scores are scaled by 1/sqrt(d_model). Returns the output rows and the
    post-softmax weight matrix (averaged over heads) for heatmap export.
    """
    d_model = x.data.shape[1]
    if p.w_q[0].data.shape[0] != d_model:
        raise GraphError(
            f"attention weights expect width {p.w_q[0].data.shape[0]}, input has {d_model}"
        )
    scale = 1.0 / np.sqrt(d_model)
    heads = []
    weight_mats = []
    for w_q, w_k, w_v in zip(p.w_q, p.w_k, p.w_v):
        q = matmul(x, w_q)
        k = matmul(x, w_k)
        v = matmul(x, w_v)
        weights = softmax_rows(matmul(q, transpose(k)) * scale)
        weight_mats.append(weights.data)
        heads.append(matmul(weights, v))
    merged = heads[0] if len(heads) == 1 else concat_cols(heads)
    out = matmul(merged, p.w_o)
    return out, np.mean(weight_mats, axis=0)


def encoder_layer(
    x: Tensor,
    p: EncoderLayerParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    """One encoder block: attention and feed-forward sublayers, each with
    dropout, a residual connection and layer normalisation."""
    attended, weights = attention(x, p.attention)
    z = layer_norm(x + dropout(attended, p.dropout, training, rng), p.norm1_gain, p.norm1_bias)
    ff = matmul(elu(matmul(z, p.ff_in)), p.ff_out)
    out = layer_norm(z + dropout(ff, p.dropout, training, rng), p.norm2_gain, p.norm2_bias)
    return out, weights


def encoder_stack(
    x: Tensor,
    p: EncoderStackParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[np.ndarray]]:
    """Input projection followed by the encoder layers in listed order.

    Returns the n×d_model output and each layer's attention weights.
    """
    if x.data.shape[1] != p.input_width:
        raise GraphError(f"stack expects {p.input_width} features, input has {x.data.shape[1]}")
    h = matmul(x, p.projection) + p.projection_bias
    all_weights = []
    for layer in p.layers:
        h, weights = encoder_layer(h, layer, training, rng)
        all_weights.append(weights)
    return h, all_weights


def head_forward(h: Tensor, head: HeadParams) -> Tensor:
    """Per-row scoring: hidden layer with ELU, then scalar projection."""
    return matmul(elu(matmul(h, head.w_hidden)), head.w_out)


def one_week_return_signal(features: np.ndarray, feature_names: list[str]) -> np.ndarray:
    """Trivial baseline: score equals last week's risk-adjusted return."""
    if ONE_WEEK_FEATURE not in feature_names:
        raise ValueError(f"feature column {ONE_WEEK_FEATURE!r} not found in {feature_names}")
    col = feature_names.index(ONE_WEEK_FEATURE)
    return np.asarray(features, dtype=np.float64)[:, col].copy()


# ---------------------------------------------------------------------------
# models


class _BaseModel:
    """Common parameter-walking, checkpointing and cloning machinery."""

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        raise NotImplementedError

    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return self.named_parameters()

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def scores(self, x) -> np.ndarray:
        """Evaluation-mode scores as a flat array."""
        out, _ = self.forward(x, training=False)
        return out.data.reshape(-1).copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint shape {value.shape} != model shape {p.data.shape}"
                )
            p.data = value.copy()

    def save(self, path) -> None:
        save_checkpoint(path, self.named_parameters())

    def load(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))

    def clone(self):
        return copy.deepcopy(self)


def _stack_named(prefix: str, stack: EncoderStackParams) -> list[tuple[str, Parameter]]:
    out = [(f"{prefix}projection.weight", stack.projection), (f"{prefix}projection.bias", stack.projection_bias)]
    for i, layer in enumerate(stack.layers):
        base = f"{prefix}layers.{i}."
        att = layer.attention
        for h in range(att.n_heads):
            out.append((f"{base}attention.h{h}.w_q", att.w_q[h]))
            out.append((f"{base}attention.h{h}.w_k", att.w_k[h]))
            out.append((f"{base}attention.h{h}.w_v", att.w_v[h]))
        out.append((f"{base}attention.w_o", att.w_o))
        out.append((f"{base}ff_in", layer.ff_in))
        out.append((f"{base}ff_out", layer.ff_out))
        out.append((f"{base}norm1.gain", layer.norm1_gain))
        out.append((f"{base}norm1.bias", layer.norm1_bias))
        out.append((f"{base}norm2.gain", layer.norm2_gain))
        out.append((f"{base}norm2.bias", layer.norm2_bias))
    return out


def _head_named(head: HeadParams) -> list[tuple[str, Parameter]]:
    return [("head.w_hidden", head.w_hidden), ("head.w_out", head.w_out)]


class EncoderRanker(_BaseModel):
    """Encoder stack plus scoring head: the source model and the
    self-attention ranking baseline."""

    def __init__(self, stack: EncoderStackParams, head: HeadParams):
        self.stack = stack
        self.head = head

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, cfg: ModelConfig) -> "EncoderRanker":
        stack = init_encoder_stack(rng, k, cfg)
        head = init_head(rng, cfg.d_model, cfg.head_hidden)
        return cls(stack, head)

    def named_parameters(self):
        return _stack_named("stack.", self.stack) + _head_named(self.head)

    def forward(self, x, training=False, rng=None):
        h, weights = encoder_stack(_as_input(x), self.stack, training, rng)
        return head_forward(h, self.head), weights[-1]


class TransferEncoderRanker(_BaseModel):
    """A pre-trained stack reused directly on the new market with a fresh
    head, behind a width-matching bridge when feature counts differ.

    ``freeze_stack`` keeps the transferred stack out of the trainable set;
    the bridge and head always train.
    """

    def __init__(self, stack, head, bridge=None, bridge_bias=None, freeze_stack=True):
        self.stack = stack
        self.head = head
        self.bridge = bridge
        self.bridge_bias = bridge_bias
        self.freeze_stack = freeze_stack

    @classmethod
    def from_source(
        cls,
        source: "EncoderRanker",
        rng: np.random.Generator,
        k_target: int,
        head_hidden: int,
        freeze_stack: bool = True,
    ) -> "TransferEncoderRanker":
        stack = copy.deepcopy(source.stack)
        bridge = bridge_bias = None
        if k_target != stack.input_width:
            bridge = Parameter(glorot_uniform(rng, k_target, stack.input_width))
            bridge_bias = Parameter(np.zeros(stack.input_width))
        head = init_head(rng, stack.d_model, head_hidden)
        return cls(stack, head, bridge, bridge_bias, freeze_stack)

    def named_parameters(self):
        named = []
        if self.bridge is not None:
            named += [("bridge.weight", self.bridge), ("bridge.bias", self.bridge_bias)]
        named += _stack_named("stack.", self.stack)
        named += _head_named(self.head)
        return named

    def trainable_parameters(self):
        if not self.freeze_stack:
            return self.named_parameters()
        frozen = {id(p) for _, p in _stack_named("stack.", self.stack)}
        return [(n, p) for n, p in self.named_parameters() if id(p) not in frozen]

    def forward(self, x, training=False, rng=None):
        t = _as_input(x)
        if self.bridge is not None:
            t = matmul(t, self.bridge) + self.bridge_bias
        h, weights = encoder_stack(t, self.stack, training, rng)
        return head_forward(h, self.head), weights[-1]


class FusedEncoderRanker(_BaseModel):
    """Pre-trained source stack and fresh target stack in parallel.

    The source stack sees the input through an optional bridge; both
    stacks' outputs are concatenated per instrument row and scored by one
    head. With ``freeze_source`` set (the pre-fine-tuning stages), source
    parameters receive no updates.
    """

    def __init__(self, source_stack, target_stack, head, bridge=None, bridge_bias=None,
                 freeze_source=True):
        if bridge is None and source_stack.input_width != target_stack.input_width:
            raise ConfigError(
                "bridge required: source expects "
                f"{source_stack.input_width} features, target {target_stack.input_width}"
            )
        self.source_stack = source_stack
        self.target_stack = target_stack
        self.head = head
        self.bridge = bridge
        self.bridge_bias = bridge_bias
        self.freeze_source = freeze_source

    @classmethod
    def from_source(
        cls,
        source: "EncoderRanker",
        rng: np.random.Generator,
        k_target: int,
        cfg: ModelConfig,
        freeze_source: bool = True,
    ) -> "FusedEncoderRanker":
        source_stack = copy.deepcopy(source.stack)
        bridge = bridge_bias = None
        if k_target != source_stack.input_width:
            bridge = Parameter(glorot_uniform(rng, k_target, source_stack.input_width))
            bridge_bias = Parameter(np.zeros(source_stack.input_width))
        target_stack = init_encoder_stack(rng, k_target, cfg)
        head = init_head(rng, source_stack.d_model + cfg.d_model, cfg.head_hidden)
        return cls(source_stack, target_stack, head, bridge, bridge_bias, freeze_source)

    def named_parameters(self):
        named = []
        if self.bridge is not None:
            named += [("bridge.weight", self.bridge), ("bridge.bias", self.bridge_bias)]
        named += _stack_named("source.", self.source_stack)
        named += _stack_named("target.", self.target_stack)
        named += _head_named(self.head)
        return named

    def trainable_parameters(self):
        if not self.freeze_source:
            return self.named_parameters()
        frozen = {id(p) for _, p in _stack_named("source.", self.source_stack)}
        return [(n, p) for n, p in self.named_parameters() if id(p) not in frozen]

    def forward(self, x, training=False, rng=None):
        t = _as_input(x)
        src_in = t
        if self.bridge is not None:
            src_in = matmul(t, self.bridge) + self.bridge_bias
        src_out, _ = encoder_stack(src_in, self.source_stack, training, rng)
        tgt_out, tgt_weights = encoder_stack(t, self.target_stack, training, rng)
        fused = concat_cols([src_out, tgt_out])
        return head_forward(fused, self.head), tgt_weights[-1]

    def source_attention(self, x) -> np.ndarray:
        """Final-layer attention of the source stack over the target
        cross-section; an opt-in export, not part of default reports."""
        t = _as_input(x)
        src_in = t
        if self.bridge is not None:
            src_in = matmul(t, self.bridge) + self.bridge_bias
        _, weights = encoder_stack(src_in, self.source_stack, False, None)
        return weights[-1]


class MlpRanker(_BaseModel):
    """Pointwise regress-then-rank baseline: one hidden ELU layer with
    dropout, scoring each instrument independently."""

    def __init__(self, w1, b1, w2, b2, dropout_rate=0.0):
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        self.dropout_rate = dropout_rate

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, hidden: int, dropout_rate: float = 0.0) -> "MlpRanker":
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        return cls(
            w1=Parameter(glorot_uniform(rng, k, hidden)),
            b1=Parameter(np.zeros(hidden)),
            w2=Parameter(glorot_uniform(rng, hidden, 1)),
            b2=Parameter(np.zeros(1)),
            dropout_rate=dropout_rate,
        )

    def named_parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def forward(self, x, training=False, rng=None):
        h = elu(matmul(_as_input(x), self.w1) + self.b1)
        h = dropout(h, self.dropout_rate, training, rng)
        return matmul(h, self.w2) + self.b2, None


def _as_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise GraphError(f"model input must be a 2-D instruments-by-features array, got {arr.shape}")
    return Tensor(arr)
