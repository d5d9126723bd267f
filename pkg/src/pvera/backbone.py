"""A small frozen pre-norm transformer encoder with a trainable linear probe.

Every weight in the encoder is a leaf tensor with requires_grad=False, so
freezing is structural: the tape simply never reaches them. Adapters hook
into the Q/K/V projections as additive terms; the probe maps mean-pooled
final tokens to class logits and is the only trainable backbone-side part.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adapters as A
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .rng import RngStream, StreamDomain, stream_for
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 64
    l: int = 17
    n_layers: int = 4
    n_heads: int = 4
    n_classes: int = 2
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("d", "l", "n_layers", "n_heads", "n_classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ConfigError(f"width {self.d} not divisible by {self.n_heads} heads")


@dataclass
class EncoderLayerWeights:
    """Frozen weights of one encoder layer (attention + MLP + two norms)."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    FIELDS = (
        "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
        "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
    )

    def named(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.FIELDS}


@dataclass
class LinearProbe:
    w: Tensor  # d x n_classes, trainable
    b: Tensor  # n_classes, trainable


@dataclass
class BackboneState:
    config: BackboneConfig
    layers: list[EncoderLayerWeights]
    probe: LinearProbe
    seed: int
    positions: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.positions is None:
            self.positions = sinusoidal_positions(self.config.l, self.config.d)

    def named_tensors(self) -> dict[str, Tensor]:
        names = {}
        for i, layer in enumerate(self.layers):
            for key, t in layer.named().items():
                names[f"backbone.layer{i}.{key}"] = t
        names["probe.w"] = self.probe.w
        names["probe.b"] = self.probe.b
        return names

    def frozen_byte_signature(self) -> bytes:
        """Bytes of every frozen weight, for freeze-invariance checks."""
        chunks = []
        for layer in self.layers:
            for t in layer.named().values():
                chunks.append(t.data.tobytes())
        return b"".join(chunks)


def sinusoidal_positions(l: int, d: int) -> np.ndarray:
    """Fixed sinusoidal positional encoding, shape (l, d)."""
    pos = np.arange(l, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def init_backbone(config: BackboneConfig, seed: int) -> BackboneState:
    """Frozen Gaussian weights (std 0.02) plus a small trainable probe."""
    d, hidden = config.d, config.d * config.mlp_ratio
    layers = []
    for i in range(config.n_layers):
        stream = stream_for(seed, StreamDomain.BACKBONE, i)

        def w(*shape, s=stream):
            return Tensor(s.normals(shape) * 0.02)

        layers.append(EncoderLayerWeights(
            w_q=w(d, d), b_q=w(d), w_k=w(d, d), b_k=w(d), w_v=w(d, d), b_v=w(d),
            w_o=w(d, d), b_o=w(d),
            mlp_w1=w(d, hidden), mlp_b1=w(hidden), mlp_w2=w(hidden, d), mlp_b2=w(d),
            ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
            ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)),
        ))
    probe_stream = stream_for(seed, StreamDomain.BACKBONE, config.n_layers)
    probe = LinearProbe(
        w=Tensor(probe_stream.normals((d, config.n_classes)) * 0.02, requires_grad=True),
        b=Tensor(np.zeros(config.n_classes), requires_grad=True),
    )
    return BackboneState(config=config, layers=layers, probe=probe, seed=seed)


@dataclass
class ForwardResult:
    logits: Tensor
    latents: list[dict[str, A.GaussianLatent]] | None = None


def qkv_project(
    x: Tensor,
    layer: EncoderLayerWeights,
    adapter_state: A.AdapterState | None,
    layer_idx: int,
    mode: str,
    rng: RngStream | None,
) -> tuple[dict[str, Tensor], dict[str, A.GaussianLatent]]:
    """Frozen affine Q/K/V maps plus any attached adapter terms.

    Branches without an adapter are exactly the frozen map. Returns the
    per-branch outputs and, for PVeRA, the per-branch latents.
    """
    if x.shape[-1] != layer.w_q.shape[1]:
        raise ConfigError(f"input width {x.shape[-1]} does not match layer width {layer.w_q.shape[1]}")
    weights = {"q": (layer.w_q, layer.b_q), "k": (layer.w_k, layer.b_k), "v": (layer.w_v, layer.b_v)}
    outs: dict[str, Tensor] = {}
    latents: dict[str, A.GaussianLatent] = {}
    for branch in A.BRANCHES:
        w, bias = weights[branch]
        y = T.add(T.matmul(x, T.swapaxes(w, 0, 1)), bias)
        params = None if adapter_state is None or adapter_state.merged else adapter_state.params_at(layer_idx, branch)
        if params is not None:
            cfg = adapter_state.config
            if cfg.kind == "lora":
                y = T.add(y, A.lora_forward(x, params, cfg.alpha, cfg.r))
            elif cfg.kind == "vera":
                y = T.add(y, A.vera_forward(x, adapter_state.basis, params, cfg.alpha))
            elif cfg.kind == "pvera":
                term, lat = A.pvera_forward(
                    x, adapter_state.basis, params, cfg.alpha, mode, rng,
                    sigma_gate=adapter_state.sigma_gate,
                )
                y = T.add(y, term)
                latents[branch] = lat
        outs[branch] = y
    return outs, latents


def attention(x_q: Tensor, x_k: Tensor, x_v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; heads concatenated.

    The output projection is applied by the caller.
    """
    if not (x_q.shape == x_k.shape == x_v.shape):
        raise ShapeError(f"attention branch shapes differ: {x_q.shape}, {x_k.shape}, {x_v.shape}")
    d = x_q.shape[-1]
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead = x_q.shape[:-1]

    def split(t):
        return T.swapaxes(T.reshape(t, lead + (n_heads, dh)), -2, -3)

    qh, kh, vh = split(x_q), split(x_k), split(x_v)
    scores = T.mul(T.matmul(qh, T.swapaxes(kh, -1, -2)), dh ** -0.5)
    weights = T.softmax_rows(scores)
    mixed = T.matmul(weights, vh)
    return T.reshape(T.swapaxes(mixed, -2, -3), lead + (d,))


def backbone_forward(
    tokens: Tensor,
    state: BackboneState,
    adapter_state: A.AdapterState | None = None,
    mode: str = A.DET_INFER,
    rng: RngStream | None = None,
) -> ForwardResult:
    """Run the encoder and probe.

    Pre-norm layers: x + attn(LN(x)) then x + mlp(LN(x)); classification is
    a linear probe over mean-pooled final tokens. Sampling modes draw fresh
    epsilon at every PVeRA site; deterministic inference consumes none.
    """
    if mode not in A.MODES:
        raise ContractError(f"unknown mode {mode!r}; valid: {list(A.MODES)}")
    has_pvera = adapter_state is not None and adapter_state.kind == "pvera" and not adapter_state.merged
    if mode == A.PROB_INFER and not has_pvera:
        raise ContractError("prob_infer needs an unmerged pvera adapter: nothing to sample")
    cfg = state.config
    if tokens.ndim != 3 or tokens.shape[1:] != (cfg.l, cfg.d):
        raise ShapeError(f"tokens must be (batch, {cfg.l}, {cfg.d}), got {tokens.shape}")
    x = T.add(tokens, Tensor(state.positions))
    collected: list[dict[str, A.GaussianLatent]] = []
    for i, layer in enumerate(state.layers):
        normed = T.layer_norm(x, layer.ln1_g, layer.ln1_b)
        branches, latents = qkv_project(normed, layer, adapter_state, i, mode, rng)
        if latents:
            collected.append(latents)
        attn = attention(branches["q"], branches["k"], branches["v"], cfg.n_heads)
        attn = T.add(T.matmul(attn, T.swapaxes(layer.w_o, 0, 1)), layer.b_o)
        x = T.add(x, attn)
        normed = T.layer_norm(x, layer.ln2_g, layer.ln2_b)
        h = T.gelu(T.add(T.matmul(normed, layer.mlp_w1), layer.mlp_b1))
        h = T.add(T.matmul(h, layer.mlp_w2), layer.mlp_b2)
        x = T.add(x, h)
    pooled = T.tensor_mean(x, axis=1)
    logits = T.add(T.matmul(pooled, state.probe.w), state.probe.b)
    return ForwardResult(logits=logits, latents=collected if has_pvera else None)


def merge_adapters(state: BackboneState, adapter_state: A.AdapterState) -> tuple[BackboneState, A.AdapterState]:
    """Fold deterministic adapter terms into the frozen Q/K/V weights.

    Returns a new backbone whose det-inference logits match the unmerged
    path, and the adapter state flagged as merged. Merging twice is refused.
    """
    if adapter_state.merged:
        raise ContractErrorAlreadyMerged()
    if adapter_state.kind == "linear_probe":
        raise ContractError("a linear probe has no adapter weights to merge")
    cfg = adapter_state.config
    new_layers = []
    for i, layer in enumerate(state.layers):
        fields = layer.named()
        updated = dict(fields)
        for branch in cfg.placement:
            params = adapter_state.params_at(i, branch)
            if params is None:
                continue
            key = f"w_{branch}"
            updated[key] = Tensor(A.merged_weight(
                fields[key].data, cfg.kind,
                alpha=cfg.alpha, r=cfg.r,
                basis=adapter_state.basis, params=params,
            ))
        new_layers.append(EncoderLayerWeights(**updated))
    merged_adapters_state = A.AdapterState(
        config=adapter_state.config,
        basis=adapter_state.basis,
        layers=adapter_state.layers,
        seed=adapter_state.seed,
        merged=True,
        sigma_gate=adapter_state.sigma_gate,
    )
    new_state = BackboneState(
        config=state.config, layers=new_layers, probe=state.probe, seed=state.seed,
        positions=state.positions,
    )
    return new_state, merged_adapters_state


def ContractErrorAlreadyMerged() -> Exception:
    from .errors import StateError

    return StateError("adapter weights are already merged; merging twice would double the term")
