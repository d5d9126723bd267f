"""Low-rank adapters: LoRA, VeRA, and the probabilistic PVeRA variant.

All three produce an additive term for a frozen linear branch y = x W^T + b.
LoRA trains a full low-rank pair per site; VeRA freezes one random pair
shared across every layer and trains only scaling vectors; PVeRA widens the
shared down-projection so each token emits a diagonal Gaussian (mu, sigma)
over the latent space and the adaptation is a sample from it.

The sigma half of the PVeRA head is parameterized in log space
(sigma = exp(s)), which keeps sigma positive by construction. sigma_gate
is a 0/1 multiplier on that half: with the gate at 0 the latent collapses
to its mean and no gradient reaches the sigma head, which reduces PVeRA to
VeRA exactly (used by tests and by deterministic ablations).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .rng import RngStream, StreamDomain, stream_for
from .tensor import Tensor

BRANCHES = ("q", "k", "v")
KINDS = ("linear_probe", "lora", "vera", "pvera")

TRAIN = "train"
DET_INFER = "det_infer"
PROB_INFER = "prob_infer"
MODES = (TRAIN, DET_INFER, PROB_INFER)


def normalize_placement(placement) -> tuple[str, ...]:
    """Canonicalize a placement spec ('qv', ['v','q'], ...) to ordered branches."""
    if isinstance(placement, str):
        items = list(placement)
    else:
        items = list(placement)
    items = [p.lower() for p in items]
    bad = [p for p in items if p not in BRANCHES]
    if bad:
        raise ConfigError(f"unknown attention branches {bad}; valid: {list(BRANCHES)}")
    if len(set(items)) != len(items):
        raise ConfigError(f"duplicate branches in placement {items}")
    return tuple(b for b in BRANCHES if b in items)


@dataclass(frozen=True)
class AdapterConfig:
    kind: str
    r: int = 32
    alpha: float = 16.0
    placement: tuple[str, ...] = ("q", "v")
    beta: float = 0.0
    adapter_lr: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}; valid: {list(KINDS)}")
        object.__setattr__(self, "placement", normalize_placement(self.placement))
        if self.kind != "linear_probe":
            if self.r < 1:
                raise ConfigError(f"rank must be >= 1, got {self.r}")
            if not self.placement:
                raise ConfigError("placement must name at least one branch")
            if self.alpha <= 0:
                raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.beta > 0 and self.kind != "pvera":
            raise ConfigError(f"beta > 0 only applies to pvera, not {self.kind}")


@dataclass
class SharedBasis:
    """Frozen random projection pair shared by every layer and branch."""

    a: Tensor  # d x (2r) for pvera, d x r for vera
    b: Tensor  # r x d
    seed: int

    def byte_signature(self) -> bytes:
        return self.a.data.tobytes() + self.b.data.tobytes()


def make_shared_basis(d: int, r: int, kind: str, seed: int) -> SharedBasis:
    """Draw the frozen pair; entries ~ N(0, 1/sqrt(d)) from the seeded stream."""
    cols = 2 * r if kind == "pvera" else r
    stream = stream_for(seed, StreamDomain.BASIS)
    scale = d ** -0.5
    a = Tensor(stream.normals((d, cols)) * scale)
    b = Tensor(stream.normals((r, d)) * scale)
    return SharedBasis(a=a, b=b, seed=seed)


@dataclass
class LoraParams:
    a: Tensor  # d x r, trainable
    b: Tensor  # r x d, trainable; zero at init so the adaptation starts at zero


@dataclass
class VeraParams:
    d_vec: Tensor  # r, trainable
    b_vec: Tensor  # d, trainable; zero at init


@dataclass
class PVeraParams:
    d_vec: Tensor  # 2r, trainable
    b_vec: Tensor  # d, trainable; zero at init


@dataclass
class GaussianLatent:
    """Per-token diagonal Gaussian over the adapter latent space."""

    mu: Tensor
    sigma: Tensor


@dataclass
class AdapterState:
    """All adapter parameters for one model instance."""

    config: AdapterConfig
    basis: SharedBasis | None
    layers: list[dict]  # one {branch: params} dict per encoder layer
    seed: int
    merged: bool = False
    sigma_gate: float = 1.0

    @property
    def kind(self) -> str:
        return self.config.kind

    def params_at(self, layer: int, branch: str):
        return self.layers[layer].get(branch)

    def trainable_tensors(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            for branch in BRANCHES:
                p = layer.get(branch)
                if p is None:
                    continue
                if isinstance(p, LoraParams):
                    out.extend([p.a, p.b])
                else:
                    out.extend([p.d_vec, p.b_vec])
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        names = {}
        if self.basis is not None:
            names["basis.a"] = self.basis.a
            names["basis.b"] = self.basis.b
        for i, layer in enumerate(self.layers):
            for branch in BRANCHES:
                p = layer.get(branch)
                if p is None:
                    continue
                if isinstance(p, LoraParams):
                    names[f"adapter.layer{i}.{branch}.a"] = p.a
                    names[f"adapter.layer{i}.{branch}.b"] = p.b
                else:
                    names[f"adapter.layer{i}.{branch}.d_vec"] = p.d_vec
                    names[f"adapter.layer{i}.{branch}.b_vec"] = p.b_vec
        return names


def init_adapter_state(
    config: AdapterConfig,
    d: int,
    n_layers: int,
    seed: int,
    basis: SharedBasis | None = None,
) -> AdapterState:
    """Build per-layer adapter parameters in their documented initial state.

    LoRA starts with B=0 (zero adaptation); VeRA/PVeRA start with b=0 and a
    d-vector filled with a single uniform draw from [1e-5, 1]. A basis can
    be injected to share one across model variants; otherwise it is drawn
    from the seed.
    """
    kind = config.kind
    if kind == "linear_probe":
        return AdapterState(config=config, basis=None, layers=[{} for _ in range(n_layers)], seed=seed)
    if kind == "lora" and config.r >= d:
        raise ConfigError(f"lora rank {config.r} must be < width {d}")
    if basis is None and kind in ("vera", "pvera"):
        basis = make_shared_basis(d, config.r, kind, seed)
    if kind in ("vera", "pvera"):
        expected_cols = 2 * config.r if kind == "pvera" else config.r
        if basis.a.shape != (d, expected_cols) or basis.b.shape != (config.r, d):
            raise ConfigError(
                f"basis shapes {basis.a.shape}/{basis.b.shape} do not fit "
                f"{kind} with d={d}, r={config.r}"
            )
    layers: list[dict] = []
    for layer_idx in range(n_layers):
        per_branch: dict = {}
        for branch_idx, branch in enumerate(BRANCHES):
            if branch not in config.placement:
                continue
            stream = stream_for(seed, StreamDomain.ADAPTER, layer_idx, branch_idx)
            if kind == "lora":
                a = Tensor(stream.normals((d, config.r)) * d ** -0.5, requires_grad=True)
                b = Tensor(np.zeros((config.r, d)), requires_grad=True)
                per_branch[branch] = LoraParams(a=a, b=b)
            else:
                width = 2 * config.r if kind == "pvera" else config.r
                u = stream.uniform(1e-5, 1.0)
                d_vec = Tensor(np.full(width, u), requires_grad=True)
                b_vec = Tensor(np.zeros(d), requires_grad=True)
                cls = PVeraParams if kind == "pvera" else VeraParams
                per_branch[branch] = cls(d_vec=d_vec, b_vec=b_vec)
        layers.append(per_branch)
    return AdapterState(config=config, basis=basis if kind != "lora" else None, layers=layers, seed=seed)


def lora_forward(x: Tensor, p: LoraParams, alpha: float, r: int) -> Tensor:
    """Additive term (alpha/r) * x A B."""
    return T.mul(T.matmul(T.matmul(x, p.a), p.b), alpha / r)


def vera_forward(x: Tensor, basis: SharedBasis, p: VeraParams, alpha: float) -> Tensor:
    """Additive term alpha * (((x A) .* d) B) .* b."""
    scaled = T.mul(T.matmul(x, basis.a), p.d_vec)
    return T.mul(T.mul(T.matmul(scaled, basis.b), p.b_vec), alpha)


def pvera_heads(x: Tensor, basis: SharedBasis, p: PVeraParams, sigma_gate: float = 1.0) -> GaussianLatent:
    """Split the widened projection into a per-token Gaussian (mu, sigma).

    h = (x A) .* d has 2r columns; the first r are mu, and the last r hold
    log sigma, mapped through exp so sigma > 0 whenever the gate is 1.
    """
    h = T.mul(T.matmul(x, basis.a), p.d_vec)
    r = h.shape[-1] // 2
    mu = T.slice_last(h, 0, r)
    sigma = T.exp(T.slice_last(h, r, 2 * r))
    if sigma_gate != 1.0:
        sigma = T.mul(sigma, float(sigma_gate))
    return GaussianLatent(mu=mu, sigma=sigma)


def reparameterize(lat: GaussianLatent, rng: RngStream) -> Tensor:
    """z = mu + eps .* sigma with fresh eps; gradients reach mu and sigma only."""
    eps = Tensor(rng.normals(lat.mu.shape))
    return T.add(lat.mu, T.mul(lat.sigma, eps))


def pvera_forward(
    x: Tensor,
    basis: SharedBasis,
    p: PVeraParams,
    alpha: float,
    mode: str,
    rng: RngStream | None = None,
    sigma_gate: float = 1.0,
) -> tuple[Tensor, GaussianLatent]:
    """Additive term alpha * (z B) .* b, plus the latent that produced z.

    Training and probabilistic inference sample z; deterministic inference
    uses z = mu and consumes no randomness.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; valid: {list(MODES)}")
    lat = pvera_heads(x, basis, p, sigma_gate=sigma_gate)
    if mode == DET_INFER:
        z = lat.mu
    else:
        if rng is None:
            raise ContractError(f"mode {mode!r} needs an RngStream to sample epsilon")
        z = reparameterize(lat, rng)
    term = T.mul(T.mul(T.matmul(z, basis.b), p.b_vec), alpha)
    return term, lat


def kl_layer(latents: list[GaussianLatent]) -> Tensor:
    """Average the per-branch Gaussian KL against the unit prior."""
    if not latents:
        raise ContractError("kl_layer needs at least one latent")
    total = T.gaussian_kl(latents[0].mu, latents[0].sigma)
    for lat in latents[1:]:
        total = T.add(total, T.gaussian_kl(lat.mu, lat.sigma))
    return T.mul(total, 1.0 / len(latents))


def merged_weight(
    w: np.ndarray,
    kind: str,
    *,
    alpha: float,
    r: int,
    basis: SharedBasis | None = None,
    params=None,
) -> np.ndarray:
    """Fold a deterministic adapter into a frozen d x d weight matrix.

    The returned matrix satisfies x @ W_new.T == x @ W.T + term(x) for the
    deterministic-inference adapter term, for all x.
    """
    if kind == "linear_probe":
        raise ContractError("a linear probe has no adapter weights to merge")
    if kind == "lora":
        delta = (alpha / r) * (params.a.data @ params.b.data)
    elif kind == "vera":
        a_d = basis.a.data * params.d_vec.data[None, :]
        delta = alpha * (a_d @ basis.b.data) * params.b_vec.data[None, :]
    elif kind == "pvera":
        a_mu = (basis.a.data * params.d_vec.data[None, :])[:, :r]
        delta = alpha * (a_mu @ basis.b.data) * params.b_vec.data[None, :]
    else:
        raise ContractError(f"unknown adapter kind {kind!r}")
    return w + delta.T


def count_trainable_params(config: AdapterConfig, d: int, n_layers: int) -> int:
    """Adapter-side trainable parameter count (probe counted separately)."""
    sites = n_layers * len(config.placement) if config.kind != "linear_probe" else 0
    if config.kind == "linear_probe":
        return 0
    if config.kind == "lora":
        return sites * 2 * d * config.r
    k = 2 if config.kind == "pvera" else 1
    return sites * (k * config.r + d)


def probe_param_count(d: int, n_classes: int) -> int:
    return d * n_classes + n_classes
