"""Cross-variable group masking: window sampling, group draws, substitution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class MaskPlan:
    start: int
    length: int
    masked_groups: tuple
    masked_dynamic: tuple      # indices into the dynamic variables
    masked_static: tuple       # indices into the static attributes
    draws: tuple = ()          # realised Bernoulli draw per group (last accepted round)

    def dynamic_mask(self, T, C):
        m = np.zeros((T, C), dtype=bool)
        if self.masked_dynamic:
            m[self.start:self.start + self.length, list(self.masked_dynamic)] = True
        return m

    def static_mask(self, S):
        m = np.zeros(S, dtype=bool)
        if self.masked_static:
            m[list(self.masked_static)] = True
        return m

    @property
    def empty(self):
        return not self.masked_dynamic and not self.masked_static


def sample_window(T, L_min, L_max, rng):
    """Uniform integer length in [L_min, L_max], uniform start in [0, T - length]."""
    if not 1 <= L_min <= L_max:
        raise ValueError(f"need 1 <= L_min <= L_max, got {L_min}, {L_max}")
    if L_max > T:
        raise ValueError(f"L_max={L_max} exceeds sequence length {T}")
    length = int(rng.integers(L_min, L_max + 1))
    start = int(rng.integers(0, T - length + 1))
    return start, length


def sample_groups(n_groups, p_mask, rng):
    """Independent Bernoulli(p_mask) per group, redrawn until one is masked."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError(f"p_mask must lie in [0, 1], got {p_mask}")
    if p_mask == 0.0 or n_groups == 0:
        raise ValueError("p_mask=0 (or no groups) can never mask a group")
    while True:
        draws = rng.random(n_groups) < p_mask
        if draws.any():
            return tuple(int(d) for d in draws)


def plan_from_groups(groups, masked_groups, start, length, draws=()):
    """Build a plan masking exactly the named/indexed groups."""
    names = groups.group_names
    idx = sorted({names.index(g) if isinstance(g, str) else int(g) for g in masked_groups})
    index_arrays = groups.group_index_arrays()
    dyn = sorted(int(i) for k in idx for i in index_arrays[k][0])
    sta = sorted(int(i) for k in idx for i in index_arrays[k][1])
    return MaskPlan(int(start), int(length), tuple(idx), tuple(dyn), tuple(sta), tuple(draws))


def sample_plan(groups, T, L_min, L_max, p_mask, rng):
    start, length = sample_window(T, L_min, L_max, rng)
    draws = sample_groups(len(groups.groups), p_mask, rng)
    masked = [k for k, d in enumerate(draws) if d]
    return plan_from_groups(groups, masked, start, length, draws)


def empty_plan():
    return MaskPlan(0, 0, (), (), ())


class MaskVectors:
    """One learnable substitution vector per dynamic and per static variable."""

    def __init__(self, store, prefix, n_dynamic, n_static, d_model, rng):
        self.dyn = store.add(f"{prefix}.dyn", rng.normal(0.0, 0.02, (n_dynamic, d_model)))
        self.static = store.add(f"{prefix}.static", rng.normal(0.0, 0.02, (n_static, d_model)))


def mask_arrays(plans, T, C, S):
    dm = np.stack([p.dynamic_mask(T, C) for p in plans])
    sm = np.stack([p.static_mask(S) for p in plans])
    return dm, sm


def apply_mask(per_var_dyn, per_var_static, plans, mv):
    """Substitute mask vectors for masked (time, variable) slots and re-sum.

    ``per_var_dyn`` is (B, T, C, d), ``per_var_static`` (B, S, d) and
    ``plans`` one MaskPlan per sample (a single plan is broadcast).  Statics
    are masked for the whole sample; the window applies to dynamics only.
    Returns the summed dynamic embedding (B, T, d) and static token (B, d).
    """
    per_var_dyn = ad.as_tensor(per_var_dyn)
    per_var_static = ad.as_tensor(per_var_static)
    B, T, C, d = per_var_dyn.shape
    S = per_var_static.shape[1]
    if isinstance(plans, MaskPlan):
        plans = [plans] * B
    if len(plans) != B:
        raise ad.ShapeError(f"{len(plans)} mask plans for a batch of {B}")
    for p in plans:
        if p.length and p.start + p.length > T:
            raise ValueError(f"mask window [{p.start}, {p.start + p.length}) exceeds T={T}")
        if any(c >= C for c in p.masked_dynamic) or any(i >= S for i in p.masked_static):
            raise ad.ShapeError("mask plan indexes variables beyond the embedding shapes")
    dm, sm = mask_arrays(plans, T, C, S)
    if dm.any():
        per_var_dyn = ad.where(dm[..., None], mv.dyn, per_var_dyn)
    if sm.any():
        per_var_static = ad.where(sm[..., None], mv.static, per_var_static)
    return ad.tsum(per_var_dyn, axis=2), ad.tsum(per_var_static, axis=1)
