"""Toy dual-branch denoiser with spatially concatenated self-attention.

A generative branch sees the noised image plus auxiliary conditioning
channels; a reference branch sees the clean reference image. At each of two
internal resolutions (1/2 and 1/4 of the input) the generative attention
layer attends over its own tokens concatenated with the reference tokens of
the same level. Only generative-token queries are evaluated, which is the
"keep the first half of the output" rule without computing the discarded
half.

Parameter names are prefixed ``gen.``, ``ref.`` and ``reg.`` (register
tokens).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .attention_flow import AttentionMap, LeffaConfig, select_layers
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    bilinear_resize,
    concat,
    constant,
    conv2d,
    get_default_dtype,
    matmul,
    rms_norm,
    row_normalize,
    silu,
    softmax,
)

__all__ = ["ModelConfig", "DualBranchModel", "ForwardOutput", "extract_cross_attention",
           "timestep_embedding"]

LEVEL_RATIOS = (2, 4)


class ConfigurationError(ValueError):
    pass


@dataclass
class ModelConfig:
    aux_channels: int = 3
    widths: tuple[int, int] = (64, 64)
    heads: int = 4
    time_dim: int = 32
    freeze_reference: bool = False

    def violations(self) -> list[str]:
        problems = []
        if len(self.widths) != 2 or any(w < 1 for w in self.widths):
            problems.append(f"widths must be two positive ints, got {self.widths}")
        elif any(w % self.heads for w in self.widths):
            problems.append(f"widths {self.widths} must be divisible by heads={self.heads}")
        if self.heads < 1:
            problems.append(f"heads must be >= 1, got {self.heads}")
        if self.aux_channels < 0:
            problems.append(f"aux_channels must be >= 0, got {self.aux_channels}")
        if self.time_dim < 2 or self.time_dim % 2:
            problems.append(f"time_dim must be an even int >= 2, got {self.time_dim}")
        return problems


@dataclass
class ForwardOutput:
    noise: Tensor
    attention: list[AttentionMap]
    ref_features: list[Tensor]
    reference_mass: list[np.ndarray] = field(default_factory=list)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``(N, dim)`` of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def extract_cross_attention(full: Tensor, n_gen: int, height: int, width: int,
                            registers: int = 0) -> tuple[AttentionMap, np.ndarray]:
    """Generative-query / reference-key block of a concatenated self-attention map.

    ``full`` has key columns ``[gen (n_gen), ref (n_ref), registers]``; rows
    beyond ``n_gen`` (the discarded reference half) are dropped if present.
    Rows are renormalized over reference + register columns. The returned
    array is the pre-renormalization mass those columns held per row; values
    near 0 mean the query ignored the reference.
    """
    n_ref = height * width
    if full.shape[-1] != n_gen + n_ref + registers:
        raise DimensionError(
            f"attention has {full.shape[-1]} keys, expected {n_gen} + {n_ref} + {registers}")
    rows = full if full.shape[-2] == n_gen else full[..., :n_gen, :]
    block = rows[..., n_gen:]
    mass = block.data.sum(axis=-1)
    return AttentionMap(row_normalize(block), height, width, registers), mass


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def _untokens(tok: Tensor, h: int, w: int) -> Tensor:
    n, _, c = tok.shape
    return tok.transpose(0, 2, 1).reshape(n, c, h, w)


def _split_heads(tok: Tensor, heads: int) -> Tensor:
    n, length, c = tok.shape
    return tok.reshape(n, length, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(tok: Tensor) -> Tensor:
    n, heads, length, d = tok.shape
    return tok.transpose(0, 2, 1, 3).reshape(n, length, heads * d)


class DualBranchModel:
    def __init__(self, config: ModelConfig | None = None, leffa: LeffaConfig | None = None,
                 seed: int = 0, init: str = "random"):
        self.config = config or ModelConfig()
        self.leffa = leffa or LeffaConfig()
        problems = self.config.violations()
        if problems:
            raise ConfigurationError("; ".join(problems))
        nominal = 64
        self.selected = select_layers([nominal // r for r in LEVEL_RATIOS], nominal,
                                      self.leffa.theta_resolution)
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed), init)

    # -- parameters ------------------------------------------------------------------
    def _add(self, name: str, shape, scale: float, rng, init: str) -> None:
        frozen = name.startswith("ref.") and self.config.freeze_reference
        if init == "zeros" or scale == 0:
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, scale, size=shape)
        self.params[name] = Tensor(value, requires_grad=not frozen, name=name)

    def _conv(self, name, c_out, c_in, rng, init, gain=1.0):
        self._add(name + ".w", (c_out, c_in, 3, 3), gain / math.sqrt(9 * c_in), rng, init)
        self._add(name + ".b", (c_out,), 0.0, rng, init)

    def _attn(self, name, c, rng, init):
        for proj in ("q", "k", "v", "o"):
            self._add(f"{name}.{proj}", (c, c), 1.0 / math.sqrt(c), rng, init)

    def _build(self, rng, init):
        c1, c2 = self.config.widths
        td = self.config.time_dim
        cin = 3 + self.config.aux_channels
        self._conv("gen.stem", c1, cin, rng, init)
        self._conv("gen.down1", c1, c1, rng, init)
        self._conv("gen.block1.a", c1, c1, rng, init)
        self._attn("gen.block1.attn", c1, rng, init)
        self._conv("gen.block1.b", c1, c1, rng, init)
        self._conv("gen.down2", c2, c1, rng, init)
        self._conv("gen.block2.a", c2, c2, rng, init)
        self._attn("gen.block2.attn", c2, rng, init)
        self._conv("gen.block2.b", c2, c2, rng, init)
        self._conv("gen.up1", c1, c2, rng, init)
        self._conv("gen.out", 3, c1, rng, init, gain=0.1)
        self._add("gen.time.w", (td, td), 1.0 / math.sqrt(td), rng, init)
        self._add("gen.time.b", (td,), 0.0, rng, init)
        self._add("gen.time.l1", (td, c1), 1.0 / math.sqrt(td), rng, init)
        self._add("gen.time.l2", (td, c2), 1.0 / math.sqrt(td), rng, init)
        # the reference branch stops at the last level's attention input:
        # nothing downstream of it feeds the generative branch
        self._conv("ref.stem", c1, 3, rng, init)
        self._conv("ref.down1", c1, c1, rng, init)
        self._conv("ref.block1.a", c1, c1, rng, init)
        self._attn("ref.block1.attn", c1, rng, init)
        self._conv("ref.block1.b", c1, c1, rng, init)
        self._conv("ref.down2", c2, c1, rng, init)
        self._conv("ref.block2.a", c2, c2, rng, init)
        r = self.leffa.register_count
        for level in self.selected:
            if r:
                c = self.config.widths[level]
                self._add(f"reg.{level}.keys", (r, c), 0.02, rng, "random" if init == "random" else init)
                self._add(f"reg.{level}.values", (r, c), 0.02, rng, "random" if init == "random" else init)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(p.data) for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        bad = [k for k in self.params if k in state and tuple(np.shape(state[k])) != self.params[k].shape]
        if missing or extra or bad:
            raise ConfigurationError(
                f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)} shape={bad}")
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.dtype)
            p.data.flags.writeable = False

    # -- forward ---------------------------------------------------------------------
    def temperature(self, level: int) -> float:
        return self.leffa.temperature if level in self.selected else 1.0

    def _registers(self, level: int):
        key = f"reg.{level}.keys"
        if key not in self.params:
            return None
        return self.params[key], self.params[f"reg.{level}.values"]

    def _conv_layer(self, name, x, stride=1):
        p = self.params
        return conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride)

    def _self_attention(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        heads = self.config.heads
        h, w = x.shape[-2:]
        tok = rms_norm(_tokens(x))
        q = _split_heads(matmul(tok, p[name + ".q"]), heads)
        k = _split_heads(matmul(tok, p[name + ".k"]), heads)
        v = _split_heads(matmul(tok, p[name + ".v"]), heads)
        a = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(q.shape[-1])))
        out = matmul(_merge_heads(matmul(a, v)), p[name + ".o"])
        return x + _untokens(out, h, w)

    def _concat_attention(self, level: int, x: Tensor, ref_tok: Tensor):
        p = self.params
        name = f"gen.block{level + 1}.attn"
        heads = self.config.heads
        h, w = x.shape[-2:]
        n = h * w
        tok = rms_norm(_tokens(x))
        both = concat([tok, ref_tok], axis=1)
        q = _split_heads(matmul(tok, p[name + ".q"]), heads)
        k = _split_heads(matmul(both, p[name + ".k"]), heads)
        v = _split_heads(matmul(both, p[name + ".v"]), heads)
        regs = self._registers(level)
        r = 0
        if regs is not None:
            rk, rv = regs
            r = rk.shape[0]
            zeros = constant(np.zeros((x.shape[0], heads, r, k.shape[-1]), dtype=k.dtype))
            rk = rk.reshape(r, heads, -1).transpose(1, 0, 2) + zeros
            rv = rv.reshape(r, heads, -1).transpose(1, 0, 2) + zeros
            k = concat([k, rk], axis=2)
            v = concat([v, rv], axis=2)
        logits = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(q.shape[-1]))
        a = softmax(logits, self.temperature(level))
        out = matmul(_merge_heads(matmul(a, v)), p[name + ".o"])
        cross, mass = extract_cross_attention(a, n, h, w, r)
        return x + _untokens(out, h, w), cross, mass

    def encode_reference(self, reference: Tensor) -> list[Tensor]:
        """Normalized reference tokens ``(N, n_l, C_l)`` at each attention level."""
        f = silu(self._conv_layer("ref.stem", reference))
        f = silu(self._conv_layer("ref.down1", f, stride=2))
        a = silu(self._conv_layer("ref.block1.a", f))
        tok1 = rms_norm(_tokens(a))
        f = silu(self._conv_layer("ref.block1.b", self._self_attention("ref.block1.attn", a)))
        f = silu(self._conv_layer("ref.down2", f, stride=2))
        a = silu(self._conv_layer("ref.block2.a", f))
        tok2 = rms_norm(_tokens(a))
        return [tok1, tok2]

    def forward(self, z_t: Tensor, aux: Tensor | None, reference: Tensor, t,
                config: LeffaConfig | None = None) -> ForwardOutput:
        """Predict the noise in ``z_t`` (``(N, 3, H, W)``).

        Returns the prediction, the renormalized cross-branch attention map of
        each attention level, and the reference features used there.
        """
        if config is not None and config is not self.leffa:
            saved = self.leffa
            self.leffa = config
            try:
                return self.forward(z_t, aux, reference, t)
            finally:
                self.leffa = saved
        if z_t.ndim == 3:
            z_t = z_t.reshape(1, *z_t.shape)
            aux = None if aux is None else aux.reshape(1, *aux.shape)
            reference = reference.reshape(1, *reference.shape)
        n, _, height, width = z_t.shape
        if height % 4 or width % 4:
            raise ContractError(f"image size must be divisible by 4, got {height}x{width}")
        if reference.shape[-2:] != (height, width):
            raise ConfigurationError(
                f"reference {reference.shape[-2:]} and generative input {(height, width)} resolutions differ")
        if self.config.aux_channels:
            if aux is None or aux.shape[1] != self.config.aux_channels:
                raise DimensionError(f"expected {self.config.aux_channels} aux channels, got "
                                     f"{None if aux is None else aux.shape}")
            x = concat([z_t, aux], axis=1)
        else:
            x = z_t
        p = self.params
        ref_tokens = self.encode_reference(reference)
        emb = constant(timestep_embedding(np.broadcast_to(np.asarray(t), (n,)), self.config.time_dim)
                       .astype(get_default_dtype()))
        temb = silu(matmul(emb, p["gen.time.w"]) + p["gen.time.b"])
        c1, c2 = self.config.widths

        e0 = silu(self._conv_layer("gen.stem", x))
        e1 = silu(self._conv_layer("gen.down1", e0, stride=2))
        e1 = e1 + matmul(temb, p["gen.time.l1"]).reshape(n, c1, 1, 1)
        a = silu(self._conv_layer("gen.block1.a", e1))
        a, cross1, mass1 = self._concat_attention(0, a, ref_tokens[0])
        b1 = silu(self._conv_layer("gen.block1.b", a))
        e2 = silu(self._conv_layer("gen.down2", b1, stride=2))
        e2 = e2 + matmul(temb, p["gen.time.l2"]).reshape(n, c2, 1, 1)
        a = silu(self._conv_layer("gen.block2.a", e2))
        a, cross2, mass2 = self._concat_attention(1, a, ref_tokens[1])
        b2 = silu(self._conv_layer("gen.block2.b", a))
        u1 = silu(self._conv_layer("gen.up1", bilinear_resize(b2, height // 2, width // 2))) + b1
        out = self._conv_layer("gen.out", bilinear_resize(u1, height, width) + e0)
        return ForwardOutput(out, [cross1, cross2], ref_tokens, [mass1, mass2])

    __call__ = forward

    def layer_heights(self, image_height: int) -> list[int]:
        return [image_height // r for r in LEVEL_RATIOS]
