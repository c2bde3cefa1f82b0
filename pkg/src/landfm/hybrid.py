"""Differentiable parameter learning around a conceptual snow/soil/two-reservoir
bucket model.

A network maps attributes and forcings to bucket parameters for ``n_units``
parallel response units; the units' runoff is averaged, routed through a
learnable unit hydrograph, and the streamflow RMSE is backpropagated through
the physics into the network.

Every outflow is a bounded fraction of the storage it drains, so storages stay
non-negative and the per-step balance
``precip = dS + ET + runoff`` closes to rounding error.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import DataError, derive_rng

# name -> (low, high); units in the module docstring of BucketParams
PARAM_RANGES = OrderedDict([
    ("beta", (1.0, 6.0)),        # soil nonlinearity [-]
    ("k0", (0.05, 0.9)),         # fast recession [1/day]
    ("k1", (0.001, 0.2)),        # slow recession [1/day]
    ("perc", (0.0, 0.5)),        # fast -> slow percolation fraction [1/day]
    ("fc", (50.0, 1000.0)),      # field capacity [mm]
    ("ddf", (0.0, 10.0)),        # degree-day factor [mm/degC/day]
    ("beta_et", (0.3, 5.0)),     # ET shape [-]
])
DYNAMIC_PARAMS = ("beta", "k0", "beta_et")
N_PARAMS = len(PARAM_RANGES)
STORES = ("snow", "soil", "fast", "slow")


@dataclass
class HybridConfig:
    n_units: int = 16
    warmup: int = 365
    routing: bool = True
    routing_length: int = 15
    near_zero: float = 1e-5
    temp_scale: float = 0.5          # rain/snow partition width around 0 degC
    aggregation: str = "mean"
    net: str = "lstm"                # "lstm" or "resconn"
    hidden: int = 64
    optimizer: str = "AdamW"
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 64
    clip: float = 5.0
    seed: int = 111111
    dynamic_params: tuple = DYNAMIC_PARAMS

    def __post_init__(self):
        if self.n_units < 1:
            raise ValueError(f"n_units must be >= 1, got {self.n_units}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")
        unknown = set(self.dynamic_params) - set(PARAM_RANGES)
        if unknown:
            raise ValueError(f"unknown dynamic parameters {sorted(unknown)}")


@dataclass
class BucketState:
    snow: object
    soil: object
    fast: object
    slow: object

    def total(self):
        return self.snow + self.soil + self.fast + self.slow

    def arrays(self):
        return {k: np.asarray(ad.as_tensor(getattr(self, k)).data) for k in STORES}

    @classmethod
    def zeros(cls, shape):
        return cls(*(ad.Tensor(np.zeros(shape)) for _ in STORES))


def _clip01(x, floor):
    return ad.maximum(ad.minimum(x, 1.0), floor)


def bucket_step(state, params, precip, temp, pet, near_zero=1e-5, temp_scale=0.5):
    """Advance one day.  ``params`` maps PARAM_RANGES names to tensors that
    broadcast against the state; forcings are mm/day and degC."""
    P, Ta, PET = ad.as_tensor(precip), ad.as_tensor(temp), ad.as_tensor(pet)
    if np.any(P.data < 0) or np.any(PET.data < 0):
        raise ValueError("precipitation and PET must be non-negative")
    nz = near_zero

    rain = P * ad.sigmoid(Ta * (1.0 / temp_scale))
    snowfall = P - rain
    snow1 = state.snow + snowfall
    pot_melt = params["ddf"] * ad.softplus(Ta, nz)
    melt = snow1 * (1.0 - ad.exp(-pot_melt / (snow1 + nz)))
    snow = snow1 - melt

    inflow = rain + melt
    fc = params["fc"]
    sat = _clip01(state.soil / fc, nz)
    recharge = inflow * ad.exp(params["beta"] * ad.log(sat))
    soil1 = state.soil + inflow - recharge
    excess = ad.relu(soil1 - fc)
    soil2 = soil1 - excess
    sat2 = _clip01(soil2 / fc, nz)
    et = ad.minimum(PET * ad.exp(params["beta_et"] * ad.log(sat2)), soil2)
    soil = soil2 - et

    fast1 = state.fast + recharge + excess
    q0 = params["k0"] * fast1
    rest = fast1 - q0
    perc = params["perc"] * rest
    fast = rest - perc
    slow1 = state.slow + perc
    q1 = params["k1"] * slow1
    slow = slow1 - q1

    fluxes = {"rain": rain, "snowfall": snowfall, "melt": melt, "recharge": recharge,
              "excess": excess, "et": et, "q0": q0, "q1": q1, "perc": perc, "runoff": q0 + q1}
    return BucketState(snow, soil, fast, slow), fluxes


def scale_params(raw, names=tuple(PARAM_RANGES)):
    """Sigmoid-squash raw outputs (..., n_params) into the physical ranges."""
    sq = ad.sigmoid(raw)
    lo = np.array([PARAM_RANGES[n][0] for n in names])
    hi = np.array([PARAM_RANGES[n][1] for n in names])
    return sq * (hi - lo) + lo, sq


def split_params(raw, dynamic=DYNAMIC_PARAMS):
    """raw (B, T, U, n_params) -> dict name -> (B, T, U) for dynamic params and
    (B, 1, U) temporal means of the squashed output for static ones."""
    names = tuple(PARAM_RANGES)
    _, sq = scale_params(raw)
    out = {}
    for j, n in enumerate(names):
        lo, hi = PARAM_RANGES[n]
        col = sq[..., j]
        if n not in dynamic:
            col = ad.mean(col, axis=1, keepdims=True)
        out[n] = col * (hi - lo) + lo
    return out


def routing_kernel(logits):
    return ad.softmax(logits)


def route(runoff, kernel):
    """Causal convolution of runoff (B, T) with kernel (K,); kernel[0] is lag 0."""
    runoff = ad.as_tensor(runoff)
    kernel = ad.as_tensor(kernel)
    B, T = runoff.shape
    K = kernel.shape[0]
    padded = ad.pad(runoff, [(0, 0), (K - 1, 0)])
    idx = (np.arange(T)[:, None] + (K - 1) - np.arange(K)[None, :])   # (T, K): t - k
    windows = padded[:, idx]
    return ad.einsum("btk,k->bt", windows, kernel)


def simulate(params, forcings, near_zero=1e-5, temp_scale=0.5, state=None, keep_states=False):
    """Run the bucket over forcings (B, T, 3) = (precip, temp, pet).

    ``params`` maps names to tensors shaped (B, T, U) or (B, 1, U).  Returns a
    dict with per-unit runoff (B, T, U), ET (B, T, U), final state and
    optionally the storage trajectory.
    """
    f = np.asarray(forcings, dtype=np.float64)
    B, T, _ = f.shape
    U = next(iter(params.values())).shape[-1]
    if state is None:
        state = BucketState.zeros((B, U))
    runoff, et, traj = [], [], []
    for t in range(T):
        p_t = {n: (v[:, t] if v.shape[1] > 1 else v[:, 0]) for n, v in params.items()}
        state, fl = bucket_step(state, p_t, f[:, t, 0:1], f[:, t, 1:2], f[:, t, 2:3],
                                near_zero, temp_scale)
        runoff.append(fl["runoff"])
        et.append(fl["et"])
        if keep_states:
            traj.append(state)
    out = {"runoff": ad.stack(runoff, axis=1), "et": ad.stack(et, axis=1), "state": state}
    if keep_states:
        out["states"] = traj
    return out


def constant_params(values, B=1, U=1):
    """Dict of (B, 1, U) tensors from plain numbers (for oracles and generators)."""
    return {n: ad.Tensor(np.full((B, 1, U), float(values[n]))) for n in PARAM_RANGES}


# -- parameter networks -------------------------------------------------------------

class LSTMParamNet:
    """Plain LSTM over [forcings, attributes] -> raw parameters per unit."""

    def __init__(self, store, n_inputs, hidden, n_units, rng, prefix="net"):
        from .model import Linear, LSTMLayer
        self.lstm = LSTMLayer(store, f"{prefix}.lstm", n_inputs, hidden, rng)
        self.out = Linear(store, f"{prefix}.out", hidden, n_units * N_PARAMS, rng)
        self.n_units = n_units

    def __call__(self, x, s, E=None):
        B, T, _ = x.shape
        inp = np.concatenate([x, np.broadcast_to(s[:, None, :], (B, T, s.shape[-1]))], axis=-1)
        h = self.lstm(ad.Tensor(inp))
        return ad.reshape(self.out(h), (B, T, self.n_units, N_PARAMS))


class ResConnParamNet:
    """Frozen-encoder embeddings fused with forcings through a resConn head."""

    def __init__(self, store, n_forcings, d_model, hidden, n_units, rng, prefix="net"):
        from .finetune import ResConnHead
        self.head = ResConnHead(store, prefix, n_forcings, d_model, hidden, n_units * N_PARAMS, rng)
        self.n_units = n_units

    def __call__(self, x, s, E=None):
        if E is None:
            raise ValueError("resconn parameter net needs encoder embeddings")
        from .finetune import resconn_forward
        B, T, _ = x.shape
        return ad.reshape(resconn_forward(E, x, self.head), (B, T, self.n_units, N_PARAMS))


def param_net_forward(attrs, forcings, net, E=None, dynamic=DYNAMIC_PARAMS):
    raw = net(np.asarray(forcings, dtype=np.float64), np.asarray(attrs, dtype=np.float64), E)
    return split_params(raw, dynamic)


class HybridModel:
    """Parameter network plus learnable routing logits in one ParamStore."""

    def __init__(self, cfg, n_forcings, n_static, d_model=None, seed=None):
        self.cfg = cfg
        self.params = ad.ParamStore()
        rng = derive_rng(cfg.seed if seed is None else seed, "hybrid-init")
        if cfg.net == "lstm":
            self.net = LSTMParamNet(self.params, n_forcings + n_static, cfg.hidden, cfg.n_units, rng)
        elif cfg.net == "resconn":
            if d_model is None:
                raise ValueError("resconn parameter net needs the encoder d_model")
            self.net = ResConnParamNet(self.params, n_forcings, d_model, cfg.hidden, cfg.n_units, rng)
        else:
            raise ValueError(f"unknown parameter net {cfg.net!r}")
        logits = np.zeros(cfg.routing_length)
        logits[0] = 2.0
        self.routing_logits = self.params.add("routing.logits", -0.5 * np.arange(cfg.routing_length) + logits)

    def forward(self, x_norm, s_norm, physics, E=None, keep_states=False):
        params = param_net_forward(s_norm, x_norm, self.net, E, self.cfg.dynamic_params)
        return hybrid_forward(params, physics, self.cfg, self.routing_logits, keep_states)


def hybrid_forward(params, physics, cfg, routing_logits=None, keep_states=False, kernel=None):
    """Simulate all units, aggregate and route -> dict with 'flow' (B, T)."""
    physics = np.asarray(physics, dtype=np.float64)
    if physics.shape[1] <= cfg.warmup:
        raise ValueError(f"series length {physics.shape[1]} must exceed warmup {cfg.warmup}")
    sim = simulate(params, physics, cfg.near_zero, cfg.temp_scale, keep_states=keep_states)
    if cfg.aggregation == "mean":
        runoff = ad.mean(sim["runoff"], axis=2)
    else:
        raise ValueError(f"unknown unit aggregation {cfg.aggregation!r}")
    if cfg.routing:
        if kernel is None:
            kernel = routing_kernel(routing_logits)
        flow = route(runoff, kernel)
    else:
        flow = runoff
    sim.update(flow=flow, runoff_mean=runoff, et_mean=ad.mean(sim["et"], axis=2))
    return sim


def rmse_loss(pred, obs, warmup):
    """Pooled RMSE after the warm-up period, skipping NaN observations."""
    obs = np.asarray(obs, dtype=np.float64)[:, warmup:]
    valid = np.isfinite(obs)
    if not valid.any():
        raise ValueError("no valid observations after warm-up")
    diff = (pred[:, warmup:] - np.where(valid, obs, 0.0)) * valid
    return ad.sqrt(ad.tsum(diff * diff) * (1.0 / valid.sum()) + 1e-12)


def physics_inputs(site, names, precip="prcp", temp=("tmax", "tmin"), pet="pet"):
    """(T, 3) precip / mean temperature / PET from a raw (un-normalised) site."""
    col = {n: i for i, n in enumerate(names)}
    temps = [temp] if isinstance(temp, str) else list(temp)
    missing = [n for n in [precip, pet, *temps] if n not in col]
    if missing:
        raise DataError(f"site {site.site_id}: physics forcings {missing} not among {names}")
    f = site.forcings
    t_mean = np.mean([f[:, col[n]] for n in temps], axis=0)
    return np.stack([np.maximum(f[:, col[precip]], 0.0), t_mean, np.maximum(f[:, col[pet]], 0.0)], axis=1)


@dataclass
class HybridResult:
    model: HybridModel
    predictions: dict = field(default_factory=dict)    # site_id -> (dates, pred, obs)
    log: list = field(default_factory=list)
    encoder_bytes_before: bytes = b""
    encoder_bytes_after: bytes = b""


def hybrid_train(train, test, cfg, encoder=None, log=None):
    """Regional training over all training sites at once.

    ``train`` / ``test`` are lists of ``(x_norm, s_norm, physics, obs, site_id, dates)``
    tuples with equal T.  With ``cfg.net == 'resconn'`` a frozen encoder
    (``MaskedAutoencoder``) supplies embeddings; its bytes are recorded before
    and after training.
    """
    if not train or not test:
        raise DataError("hybrid_train needs non-empty train and test folds")
    x0, s0 = train[0][0], train[0][1]
    if cfg.net == "resconn" and encoder is None:
        raise ValueError("the resconn parameter net needs a frozen encoder")
    handle = None
    if encoder is not None:
        from .finetune import FrozenEncoderHandle
        handle = FrozenEncoderHandle(encoder)
    model = HybridModel(cfg, x0.shape[-1], s0.shape[-1], handle.d_model if handle else None)
    result = HybridResult(model)
    if handle is not None:
        result.encoder_bytes_before = handle.bytes()
    cache = {}

    def embed(batch):
        if cfg.net != "resconn":
            return None
        from .finetune import embed_series
        missing = [b for b in batch if b[4] not in cache]
        if missing:
            E = embed_series(handle, np.stack([b[0] for b in missing]), np.stack([b[1] for b in missing]))
            for b, e in zip(missing, E):
                cache[b[4]] = e
        return np.stack([cache[b[4]] for b in batch])

    opt = ad.make_optimizer(cfg.optimizer, model.params, cfg.learning_rate, cfg.weight_decay)
    n = len(train)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = derive_rng(cfg.seed, "hybrid-epoch", epoch).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = [train[i] for i in order[lo:lo + cfg.batch_size]]
            x = np.stack([b[0] for b in batch])
            s = np.stack([b[1] for b in batch])
            phys = np.stack([b[2] for b in batch])
            obs = np.stack([b[3] for b in batch])
            out = model.forward(x, s, phys, embed(batch))
            loss = rmse_loss(out["flow"], obs, cfg.warmup)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite hybrid loss at epoch {epoch}, batch {lo // cfg.batch_size}")
            ad.backward(loss)
            ad.clip_grad_norm(model.params, cfg.clip)
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "seconds": time.perf_counter() - t0}
        result.log.append(entry)
        if log:
            log(entry)
    result.predictions = hybrid_predict(model, test, embed)
    if handle is not None:
        result.encoder_bytes_after = handle.bytes()
    return result


def hybrid_predict(model, items, embed=None):
    preds = {}
    with ad.no_grad():
        for lo in range(0, len(items), 64):
            batch = items[lo:lo + 64]
            E = embed(batch) if embed is not None else None
            out = model.forward(np.stack([b[0] for b in batch]), np.stack([b[1] for b in batch]),
                                np.stack([b[2] for b in batch]), E, keep_states=False)
            flow = out["flow"].data
            w = model.cfg.warmup
            for b, q in zip(batch, flow):
                preds[b[4]] = (b[5][w:], q[w:], np.asarray(b[3])[w:])
    return preds
