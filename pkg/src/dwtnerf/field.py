"""The radiance field: two MLP branches coupled by input- and output-level attention.

Both attention blocks run over independent token sets. By default a token set
is the samples of one ray; ``FieldConfig.token_axis = "rays"`` instead makes
each sample slot attend across all rays of the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Mapping

import numpy as np

from .encoding import HashGridConfig, SH_BASIS, hash_encode, hybrid_concat, init_hash_tables, sh_encode
from .tensor import NonFiniteError, ShapeError, Tensor, concat, permute_rows, relu, sigmoid, softmax, softplus


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    model_dim: int
    head_dim: int | None = None

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.model_dim < 1:
            raise ValueError("model_dim must be >= 1")
        if self.head_dim is not None and self.head_dim < 1:
            raise ValueError("head_dim must be >= 1")

    @property
    def width(self) -> int:
        """Per-head projection width."""
        if self.head_dim is not None:
            return self.head_dim
        return max(1, math.ceil(self.model_dim / self.heads))


@dataclass
class AttentionWeights:
    wq: Tensor  # (H, D, hd)
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (H * hd, D)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


def _uniform(rng, shape, fan_in, name) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_attention(config: AttentionConfig, rng: np.random.Generator, prefix: str = "attn") -> AttentionWeights:
    H, D, hd = config.heads, config.model_dim, config.width
    return AttentionWeights(
        wq=_uniform(rng, (H, D, hd), D, f"{prefix}.wq"),
        wk=_uniform(rng, (H, D, hd), D, f"{prefix}.wk"),
        wv=_uniform(rng, (H, D, hd), D, f"{prefix}.wv"),
        wo=_uniform(rng, (H * hd, D), H * hd, f"{prefix}.wo"),
    )


def mha(tokens: Tensor, config: AttentionConfig, weights: AttentionWeights) -> Tensor:
    """Multi-head self-attention over the second-to-last axis of ``tokens`` (..., T, D)."""
    H, D, hd = config.heads, config.model_dim, config.width
    if tokens.ndim < 2 or tokens.shape[-1] != D:
        raise ShapeError(f"mha: tokens {tokens.shape} do not match model_dim {D}")
    for name, w, shape in (("wq", weights.wq, (H, D, hd)), ("wk", weights.wk, (H, D, hd)),
                           ("wv", weights.wv, (H, D, hd)), ("wo", weights.wo, (H * hd, D))):
        if w.shape != shape:
            raise ShapeError(f"mha: {name} has shape {w.shape}, expected {shape}")
    lead = tokens.shape[:-2]
    T = tokens.shape[-2]
    G = int(np.prod(lead, dtype=np.int64))
    # BLAS blocking lets a row's rounding depend on its position, so every token set is
    # processed in a canonical (lexicographic) order and scattered back afterwards; the
    # block is then permutation-equivariant bit for bit rather than to rounding
    order = np.lexsort(np.moveaxis(tokens.data.reshape(G, T, D), -1, 0)[::-1], axis=-1)
    canon = (order + T * np.arange(G)[:, None]).reshape(-1)
    flat = permute_rows(tokens.reshape(G * T, D), canon)
    # one (D, 3*H*hd) projection instead of three broadcast batched products
    w_all = concat([weights.wq, weights.wk, weights.wv], axis=0)  # (3H, D, hd)
    w_all = w_all.transpose(1, 0, 2).reshape(D, 3 * H * hd)
    proj = (flat @ w_all).reshape(G, T, 3 * H, hd).transpose(0, 2, 1, 3)  # (G, 3H, T, hd)
    q, k, v = proj[:, :H], proj[:, H:2 * H], proj[:, 2 * H:]
    scores = (q * (1.0 / math.sqrt(hd))) @ k.swapaxes(-1, -2)
    attn = softmax(scores, axis=-1)
    heads = attn @ v  # (G, H, T, hd)
    merged = heads.transpose(0, 2, 1, 3).reshape(G * T, H * hd)
    out = permute_rows(merged @ weights.wo, np.argsort(canon))
    return out.reshape(lead + (T, D))


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor    # (out,)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def init_linear(rng, fan_in: int, fan_out: int, name: str) -> Linear:
    bound = 1.0 / math.sqrt(fan_in)
    return Linear(
        Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=f"{name}.weight"),
        Tensor(rng.uniform(-bound, bound, size=(fan_out,)), requires_grad=True, name=f"{name}.bias"),
    )


def run_mlp(layers: list[Linear], x: Tensor, branch: str) -> Tensor:
    """ReLU between layers, none after the last; failures name the layer index."""
    for i, layer in enumerate(layers):
        try:
            x = layer(x)
            if i < len(layers) - 1:
                x = relu(x)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{branch} branch layer {i}: {exc}") from None
    return x


@dataclass(frozen=True)
class FieldConfig:
    hash: HashGridConfig = dc_field(default_factory=HashGridConfig)
    hidden: int = 64
    heads_in: int = 2
    heads_out: int = 2
    head_dim_in: int | None = None
    head_dim_out: int | None = None
    # which points form one attention token set: the samples of each ray
    # ("samples") or the rays of the batch at each sample index ("rays")
    token_axis: str = "samples"

    def __post_init__(self):
        if self.token_axis not in ("samples", "rays"):
            raise ValueError(f"token_axis must be 'samples' or 'rays', got {self.token_axis!r}")

    @property
    def hybrid_dim(self) -> int:
        return SH_BASIS + self.hash.output_dim - 1

    def attention_in(self) -> AttentionConfig:
        return AttentionConfig(self.heads_in, self.hybrid_dim, self.head_dim_in)

    def attention_out(self) -> AttentionConfig:
        return AttentionConfig(self.heads_out, 4, self.head_dim_out)


class FieldModel:
    """Trainable state: hash tables, density/colour MLPs and two attention blocks."""

    def __init__(self, config: FieldConfig | None = None, seed: int = 0):
        self.config = config or FieldConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.tables = init_hash_tables(cfg.hash, rng)
        self.density = [init_linear(rng, 1, cfg.hidden, "density.0"),
                        init_linear(rng, cfg.hidden, 1, "density.1")]
        self.color = [init_linear(rng, cfg.hybrid_dim, cfg.hidden, "color.0"),
                      init_linear(rng, cfg.hidden, cfg.hidden, "color.1"),
                      init_linear(rng, cfg.hidden, 3, "color.2")]
        self.attn_in = init_attention(cfg.attention_in(), rng, "attn_in")
        self.attn_out = init_attention(cfg.attention_out(), rng, "attn_out")

    def parameters(self) -> dict[str, Tensor]:
        params = {"hash_tables": self.tables}
        for branch, layers in (("density", self.density), ("color", self.color)):
            for i, layer in enumerate(layers):
                params[f"{branch}.{i}.weight"] = layer.weight
                params[f"{branch}.{i}.bias"] = layer.bias
        params.update(self.attn_in.named("attn_in"))
        params.update(self.attn_out.named("attn_out"))
        return params

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def __call__(self, positions: np.ndarray, directions: np.ndarray) -> tuple[Tensor, Tensor]:
        """Evaluate the field on (rays, samples, 3) points with per-ray unit directions.

        Returns ``sigma`` (rays, samples) and ``color`` (rays, samples, 3). Both
        attention blocks run once per token set chosen by ``config.token_axis``.
        """
        positions = np.asarray(positions, dtype=np.float64)
        n, s, _ = positions.shape
        by_ray = self.config.token_axis == "samples"
        # lay points out as (groups, tokens) so each attention call sees one token set
        if by_ray:
            pts = positions.reshape(n * s, 3)
            gd = np.repeat(sh_encode(directions), s, axis=0)
            groups = (n, s)
        else:
            pts = positions.transpose(1, 0, 2).reshape(s * n, 3)
            gd = np.tile(sh_encode(directions), (s, 1))
            groups = (s, n)
        gx = hash_encode(pts, self.config.hash, self.tables)
        trimmed, hybrid = hybrid_concat(gx, Tensor(gd))
        attended = mha(hybrid.reshape(groups + (-1,)), self.config.attention_in(), self.attn_in)
        sigma, color = field_forward(trimmed, attended.reshape(n * s, -1), self)
        sigma2, color2 = output_attention(sigma.reshape(groups), color.reshape(groups + (3,)), self)
        if by_ray:
            return sigma2, color2
        return sigma2.swapaxes(0, 1), color2.transpose(1, 0, 2)


def field_forward(trimmed: Tensor, hybrid: Tensor, model: FieldModel) -> tuple[Tensor, Tensor]:
    """Density from the single trimmed hash feature, colour from the attended hybrid encoding."""
    if trimmed.ndim != 2 or trimmed.shape[1] != 1:
        raise ShapeError(f"field_forward: density input must be (N, 1), got {trimmed.shape}")
    if hybrid.shape[0] != trimmed.shape[0]:
        raise ShapeError(f"field_forward: batch mismatch {trimmed.shape} vs {hybrid.shape}")
    raw_sigma = run_mlp(model.density, trimmed, "density")
    raw_color = run_mlp(model.color, hybrid, "color")
    return softplus(raw_sigma.reshape(-1)), sigmoid(raw_color)


def output_attention(sigma: Tensor, color: Tensor, model: FieldModel) -> tuple[Tensor, Tensor]:
    """Attend over ``zeta = [sigma, c]`` tokens and split the result back apart."""
    if color.shape != sigma.shape + (3,):
        raise ShapeError(f"output_attention: sigma {sigma.shape} and color {color.shape} do not conform")
    zeta = concat([sigma.reshape(sigma.shape + (1,)), color], axis=-1)
    attended = mha(zeta, model.config.attention_out(), model.attn_out)
    return softplus(attended[..., 0]), sigmoid(attended[..., 1:])
