"""Per-variable nonlinear embeddings, the static token and learnable positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class EmbeddingBank:
    """Independent two-layer embedding per variable.

    Stores ``W1`` (n, hidden), ``b1`` (n, hidden), ``W2`` (n, hidden, d_model)
    and ``b2`` (n, d_model); row ``c`` of each is variable ``c``'s private
    parameter set.
    """

    def __init__(self, store, prefix, n_vars, hidden, d_model, rng):
        self.n_vars = n_vars
        self.hidden = hidden
        self.d_model = d_model
        # W1 has fan-in 1, W2 fan-in `hidden`
        self.W1 = store.add(f"{prefix}.W1", rng.uniform(-1.0, 1.0, (n_vars, hidden)))
        self.b1 = store.add(f"{prefix}.b1", np.zeros((n_vars, hidden)))
        lim = 1.0 / np.sqrt(hidden)
        self.W2 = store.add(f"{prefix}.W2", rng.uniform(-lim, lim, (n_vars, hidden, d_model)))
        self.b2 = store.add(f"{prefix}.b2", np.zeros((n_vars, d_model)))

    def per_variable(self, values):
        """values (..., n_vars) -> embeddings (..., n_vars, d_model)."""
        v = ad.as_tensor(values)
        if v.shape[-1] != self.n_vars:
            raise ad.ShapeError(f"bank expects {self.n_vars} variables, input has {v.shape[-1]}")
        pre = ad.reshape(v, v.shape + (1,)) * self.W1 + self.b1
        h = ad.gelu(pre)
        lead = "abcdefg"[: v.ndim - 1]
        return ad.einsum(f"{lead}vh,vhd->{lead}vd", h, self.W2) + self.b2


def _batched(x, ndim):
    x = ad.as_tensor(x)
    if x.ndim == ndim - 1:
        return ad.reshape(x, (1,) + x.shape), True
    return x, False


def embed_dynamic(x, bank):
    """x (T, C) or (B, T, C) -> (per-variable (B, T, C, d), summed (B, T, d))."""
    x, single = _batched(x, 3)
    if x.shape[-1] != bank.n_vars:
        raise ad.ShapeError(f"dynamic input has {x.shape[-1]} variables, bank has {bank.n_vars}")
    per_var = bank.per_variable(x)
    z = ad.tsum(per_var, axis=2)
    if single:
        return per_var[0], z[0]
    return per_var, z


def embed_static(s, bank):
    """s (S,) or (B, S) -> (per-attribute (B, S, d), token (B, d))."""
    s, single = _batched(s, 2)
    if s.shape[-1] != bank.n_vars:
        raise ad.ShapeError(f"static input has {s.shape[-1]} attributes, bank has {bank.n_vars}")
    per_attr = bank.per_variable(s)
    token = ad.tsum(per_attr, axis=1)
    if single:
        return per_attr[0], token[0]
    return per_attr, token


@dataclass
class TokenSequence:
    Z: ad.Tensor           # (B, T+1, d); last row is the static token
    positioned: bool = False

    @property
    def length(self):
        return self.Z.shape[-2]


def assemble_sequence(z_dyn, z_static):
    z_dyn = ad.as_tensor(z_dyn)
    z_static = ad.as_tensor(z_static)
    if z_dyn.ndim == 2:
        z_dyn = ad.reshape(z_dyn, (1,) + z_dyn.shape)
        z_static = ad.reshape(z_static, (1,) + z_static.shape)
    B, _, d = z_dyn.shape
    if z_static.shape != (B, d):
        raise ad.ShapeError(f"static token {z_static.shape} does not fit dynamic {z_dyn.shape}")
    return TokenSequence(ad.concat([z_dyn, ad.reshape(z_static, (B, 1, d))], axis=1))


class PositionalTable:
    def __init__(self, store, name, max_len, d_model, rng):
        self.max_len = max_len
        self.P = store.add(name, rng.normal(0.0, 0.02, (max_len, d_model)))


def add_positions(seq, table):
    if seq.positioned:
        raise ValueError("positional encodings already added to this sequence")
    L = seq.length
    if L > table.max_len:
        raise ValueError(f"sequence of {L} tokens exceeds positional table of {table.max_len}")
    return TokenSequence(seq.Z + table.P[:L], positioned=True)
