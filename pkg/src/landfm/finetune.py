"""Task heads on top of a frozen pretrained encoder.

Sequence heads (resConn, the no-skip variant, three adapters, an LSTM-only
baseline and an end-to-end scratch mode) share one windowed training
harness.  A static regression head reads the static token with the target's
group masked, and a small 2-D CNN classifies grids of static embeddings.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import DataError, derive_rng
from .masking import plan_from_groups
from .model import Linear, LSTMLayer, MaskedAutoencoder, ModelConfig

SEQUENCE_VARIANTS = ("resconn", "noresconn", "gated", "bottleneck", "residual", "lstm_sl", "scratch")
ADAPTER_KINDS = ("gated", "bottleneck", "residual")
FROZEN_VARIANTS = ("resconn", "noresconn", "gated", "bottleneck", "residual")


class LeakageError(ValueError):
    """The attribute being predicted is visible to the encoder."""


# -- frozen encoder -----------------------------------------------------------------

class FrozenEncoderHandle:
    """Read-only view of a pretrained model's encoder-side parameter groups."""

    def __init__(self, model):
        self.model = model
        model.params.freeze(*MaskedAutoencoder.ENCODER_GROUPS)
        self.d_model = model.cfg.d_model

    @classmethod
    def from_checkpoint(cls, path):
        from .model import load_model
        model, _ = load_model(path)
        return cls(model)

    def check_inputs(self, x, s):
        cfg = self.model.cfg
        if x.shape[-1] != cfg.n_dynamic or s.shape[-1] != cfg.n_static:
            raise DataError(f"encoder expects {cfg.n_dynamic} dynamic / {cfg.n_static} static variables, "
                            f"got {x.shape[-1]} / {s.shape[-1]}")
        if x.shape[-2] > cfg.seq_len:
            raise DataError(f"window of {x.shape[-2]} steps exceeds encoder seq_len {cfg.seq_len}")

    def embeddings(self, x, s, plans=None):
        x = np.asarray(x, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        self.check_inputs(x, s)
        return self.model.embeddings(x, s, plans)

    def bytes(self):
        return self.model.encoder_bytes()

    def digest(self):
        return hashlib.sha256(self.bytes()).hexdigest()


def embed_series(enc, x, s):
    """Embeddings for series longer than the encoder window, stitched from
    non-overlapping windows (the end-aligned last window fills the tail)."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[1]
    L = min(T, enc.model.cfg.seq_len)
    E = np.empty(x.shape[:2] + (enc.d_model,))
    for a in window_starts(T, L):
        E[:, a:a + L], _ = enc.embeddings(x[:, a:a + L], s)
    return E


def extract_embeddings(enc, site, plans=None):
    """E (T, d) and static embedding (d,) for one (normalised) site window."""
    E, st = enc.embeddings(site.forcings[None], site.static_attrs[None], plans)
    return E[0], st[0]


# -- building blocks ------------------------------------------------------------------

def conv1d_same(x, W, b):
    """x (B, T, C), W (K, C, H) odd K -> (B, T, H) with zero 'same' padding."""
    K = W.shape[0]
    half = K // 2
    T = x.shape[1]
    xp = ad.pad(x, [(0, 0), (half, half), (0, 0)])
    out = None
    for k in range(K):
        term = ad.einsum("btc,ch->bth", xp[:, k:k + T], W[k])
        out = term if out is None else out + term
    return out + b


class ForcingPathway:
    """r_t = Linear(conv1d(x)_t): kernel-3 convolution to ``hidden``, then to d_model."""

    def __init__(self, store, prefix, n_in, hidden, d_model, rng, zero=False):
        lim = 1.0 / np.sqrt(3 * n_in)
        w = np.zeros((3, n_in, hidden)) if zero else rng.uniform(-lim, lim, (3, n_in, hidden))
        self.W = store.add(f"{prefix}.conv.W", w)
        self.b = store.add(f"{prefix}.conv.b", np.zeros(hidden))
        self.lin = Linear(store, f"{prefix}.lin", hidden, d_model, rng, zero=zero)

    def __call__(self, x):
        return self.lin(conv1d_same(ad.as_tensor(x), self.W, self.b))


class ResConnHead:
    """Forcing pathway, 2-layer task LSTM over E + r, output projection.

    With ``skip`` the fused E + r is re-injected (via a linear map to the
    hidden width) into the second LSTM layer's input.
    """

    def __init__(self, store, prefix, n_forcings, d_model, hidden, n_out, rng, skip=True,
                 zero_out=False, zero_forcing=False):
        self.f = ForcingPathway(store, f"{prefix}.f", n_forcings, hidden, d_model, rng, zero=zero_forcing)
        self.lstm1 = LSTMLayer(store, f"{prefix}.lstm1", d_model, hidden, rng)
        self.lstm2 = LSTMLayer(store, f"{prefix}.lstm2", hidden, hidden, rng)
        self.skip = Linear(store, f"{prefix}.skip", d_model, hidden, rng) if skip else None
        self.out = Linear(store, f"{prefix}.out", hidden, n_out, rng, zero=zero_out)
        self.hidden = hidden


def _check_aligned(E, x):
    if E is not None and E.shape[:-1] != x.shape[:-1]:
        raise ad.ShapeError(f"embeddings {E.shape} and forcings {x.shape} are not time-aligned")


def _batch3(a):
    a = ad.as_tensor(a)
    return (ad.reshape(a, (1,) + a.shape), True) if a.ndim == 2 else (a, False)


def resconn_hidden(E, x, head):
    x, single = _batch3(x)
    if E is not None:
        E, _ = _batch3(E)
    _check_aligned(E, x)
    u = head.f(x)
    if E is not None:
        u = u + E
    h1 = head.lstm1(u)
    inp2 = h1 + head.skip(u) if head.skip is not None else h1
    h2 = head.lstm2(inp2)
    return h2, single


def resconn_forward(E, x, head):
    """E (B, T, d) or None, x (B, T, C) -> (B, T, n_out); unbatched inputs drop B."""
    h, single = resconn_hidden(E, x, head)
    y = head.out(h)
    return y[0] if single else y


class AdapterHead:
    """Fusion of E and proj(x) by one adapter kind, then the task LSTM (no skips)."""

    def __init__(self, store, prefix, kind, n_forcings, d_model, hidden, n_out, rng,
                 bottleneck=64, scale=1.0, zero_out=False):
        if kind not in ADAPTER_KINDS:
            raise ValueError(f"unknown adapter variant {kind!r}; expected one of {ADAPTER_KINDS}")
        self.kind = kind
        self.scale = float(scale)
        self.proj = Linear(store, f"{prefix}.proj", n_forcings, d_model, rng)
        if kind == "gated":
            self.gate = Linear(store, f"{prefix}.gate", 2 * d_model, d_model, rng)
        elif kind == "bottleneck":
            self.down = Linear(store, f"{prefix}.down", d_model, bottleneck, rng)
            self.up = Linear(store, f"{prefix}.up", bottleneck, d_model, rng, zero=True)
        self.lstm1 = LSTMLayer(store, f"{prefix}.lstm1", d_model, hidden, rng)
        self.lstm2 = LSTMLayer(store, f"{prefix}.lstm2", hidden, hidden, rng)
        self.out = Linear(store, f"{prefix}.out", hidden, n_out, rng, zero=zero_out)

    def fuse(self, E, x):
        p = self.proj(x)
        if E is None:
            return p
        if self.kind == "gated":
            g = ad.sigmoid(self.gate(ad.concat([E, p], axis=-1)))
            return g * E + (1.0 - g) * p
        if self.kind == "bottleneck":
            return p + E + self.up(ad.gelu(self.down(E)))
        return p + self.scale * E


def adapter_forward(E, x, head):
    x, single = _batch3(x)
    if E is not None:
        E, _ = _batch3(E)
    _check_aligned(E, x)
    h = head.lstm2(head.lstm1(head.fuse(E, x)))
    y = head.out(h)
    return y[0] if single else y


def head_forward(E, x, head):
    if isinstance(head, AdapterHead):
        return adapter_forward(E, x, head)
    return resconn_forward(E, x, head)


# -- static regression head -----------------------------------------------------------

class StaticHead:
    def __init__(self, store, prefix, d_model, hidden, rng, zero=False):
        self.l1 = Linear(store, f"{prefix}.l1", d_model, hidden, rng, zero=zero)
        self.l2 = Linear(store, f"{prefix}.l2", hidden, 1, rng, zero=zero)


def static_head_forward(token, head):
    """Static token embedding (B, d) -> scalar prediction per sample (B,)."""
    t = ad.as_tensor(token)
    h = ad.gelu(head.l1(t))
    y = head.l2(h)
    return ad.reshape(y, y.shape[:-1])


def masked_static_embeddings(enc, x, s, groups, target_var, masked_groups=None):
    """Static token embeddings with ``target_var``'s group masked.

    ``masked_groups`` defaults to the target's own group; passing a set that
    leaves the target visible raises LeakageError.
    """
    own = groups.group_of(target_var)
    masked = [own] if masked_groups is None else list(masked_groups)
    if own not in masked:
        raise LeakageError(f"{target_var!r} would be visible: its group {own!r} is not masked")
    x = np.asarray(x, dtype=np.float64)
    plan = plan_from_groups(groups, masked, 0, x.shape[-2])
    B = x.shape[0]
    _, tok = enc.embeddings(x, s, [plan] * B)
    return tok


# -- classification head -----------------------------------------------------------------

class ClassifierHead:
    """3x3 same-padded conv -> ReLU -> global mean pool -> linear -> sigmoid."""

    def __init__(self, store, prefix, d_model, channels, rng):
        lim = 1.0 / np.sqrt(9 * d_model)
        self.W = store.add(f"{prefix}.conv.W", rng.uniform(-lim, lim, (3, 3, d_model, channels)))
        self.b = store.add(f"{prefix}.conv.b", np.zeros(channels))
        self.out = Linear(store, f"{prefix}.out", channels, 1, rng)


def conv2d_same(x, W, b):
    """x (B, k, k, d), W (3, 3, d, c) -> (B, k, k, c)."""
    B, H, Wd, _ = x.shape
    xp = ad.pad(x, [(0, 0), (1, 1), (1, 1), (0, 0)])
    out = None
    for i in range(3):
        for j in range(3):
            term = ad.einsum("bhwd,dc->bhwc", xp[:, i:i + H, j:j + Wd], W[i, j])
            out = term if out is None else out + term
    return out + b


def classify_logits(features, head):
    f = ad.as_tensor(features)
    if f.ndim != 4 or f.shape[1] != f.shape[2]:
        raise ad.ShapeError(f"classifier expects a (B, k, k, d) grid of features, got {f.shape}")
    h = ad.relu(conv2d_same(f, head.W, head.b))
    pooled = ad.mean(h, axis=(1, 2))
    y = head.out(pooled)
    return ad.reshape(y, (f.shape[0],))


def classify_head_forward(features, head):
    """Probability per grid sample, strictly inside (0, 1) for finite logits."""
    return ad.sigmoid(classify_logits(features, head))


def bce_loss(logits, labels):
    """Mean binary cross-entropy from logits (numerically stable form)."""
    y = np.asarray(labels, dtype=np.float64)
    # log(1 + e^z) - y z
    return ad.mean(ad.softplus(logits) - logits * y)


def grid_features(enc, cells, groups, seq_len=1):
    """Static-token embeddings for every cell of (n, k, k, S) grids.

    Cells carry no time series; a ``seq_len``-step dummy input is supplied
    with every dynamic group masked.
    """
    n, k, k2, S = cells.shape
    flat = cells.reshape(-1, S)
    x = np.zeros((flat.shape[0], seq_len, len(groups.dynamic_vars)))
    dyn_groups = [g for g, vs in groups.groups if all(groups.is_dynamic(v) for v in vs)]
    plan = plan_from_groups(groups, dyn_groups, 0, seq_len)
    out = []
    for lo in range(0, flat.shape[0], 256):
        _, tok = enc.embeddings(x[lo:lo + 256], flat[lo:lo + 256], [plan] * len(flat[lo:lo + 256]))
        out.append(tok)
    return np.concatenate(out).reshape(n, k, k2, -1)


# -- training harness ------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    variant: str = "resconn"
    hidden: int = 64
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "AdamW"
    clip: float = 5.0
    seq_len: int = 365
    bottleneck: int = 64
    adapter_scale: float = 1.0
    seed: int = 0
    model: dict = field(default_factory=dict)     # encoder config for the scratch variant

    def __post_init__(self):
        if self.variant not in SEQUENCE_VARIANTS:
            raise ValueError(f"unknown fine-tune variant {self.variant!r}; expected one of {SEQUENCE_VARIANTS}")
        for k in ("hidden", "epochs", "batch_size", "seq_len"):
            if getattr(self, k) < (0 if k == "epochs" else 1):
                raise ValueError(f"{k} must be positive, got {getattr(self, k)}")


@dataclass
class FinetuneResult:
    predictions: list                  # rows (site_id, date, y_pred, y_obs) in normalised units
    log: list
    head_params: ad.ParamStore
    encoder_digest_before: str = ""
    encoder_digest_after: str = ""


def window_starts(T, L):
    """Non-overlapping starts covering 0..T-1; the last window is end-aligned."""
    if T < L:
        raise DataError(f"series of {T} steps is shorter than the window {L}")
    starts = list(range(0, T - L + 1, L))
    if starts[-1] + L < T:
        starts.append(T - L)
    return starts


def _windows(sites, L):
    items = []
    for s in sites:
        if s.target is None:
            raise DataError(f"site {s.site_id} has no target")
        for a in window_starts(s.T, L):
            items.append((s, a))
    return items


def build_head(cfg, store, n_forcings, d_model, rng):
    v = cfg.variant
    if v in ADAPTER_KINDS:
        return AdapterHead(store, "head", v, n_forcings, d_model, cfg.hidden, 1, rng,
                           cfg.bottleneck, cfg.adapter_scale)
    return ResConnHead(store, "head", n_forcings, d_model, cfg.hidden, 1, rng,
                       skip=v in ("resconn", "scratch"))


def _rmse(pred, obs):
    valid = np.isfinite(obs)
    if not valid.any():
        return None
    diff = (pred - np.where(valid, obs, 0.0)) * valid
    return ad.sqrt(ad.tsum(diff * diff) * (1.0 / valid.sum()) + 1e-12)


def finetune_run(cfg, train_sites, test_sites, encoder=None, log=None):
    """Train a sequence head on normalised train sites, predict every test date.

    ``encoder`` is a FrozenEncoderHandle for the frozen variants, ignored by
    ``lstm_sl``; ``scratch`` builds a fresh unfrozen encoder from ``cfg.model``.
    """
    if not train_sites or not test_sites:
        raise DataError("finetune_run needs non-empty train and test folds")
    v = cfg.variant
    if v in FROZEN_VARIANTS and encoder is None:
        raise ValueError(f"variant {v!r} needs a frozen encoder")
    L = cfg.seq_len
    n_forcings = train_sites[0].forcings.shape[1]
    store = ad.ParamStore()
    rng = derive_rng(cfg.seed, "finetune-init")
    scratch = None
    if v == "scratch":
        mcfg = ModelConfig(**{**cfg.model, "n_dynamic": n_forcings,
                              "n_static": train_sites[0].static_attrs.shape[0], "seq_len": L})
        scratch = MaskedAutoencoder(mcfg, seed=cfg.seed)
        d_model = mcfg.d_model
    elif v == "lstm_sl":
        d_model = cfg.hidden
    else:
        d_model = encoder.d_model
    head = build_head(cfg, store, n_forcings, d_model, rng)
    params = list(store.trainable())
    if scratch is not None:
        params += [(n, t) for n, t in scratch.params.trainable() if not n.startswith(("decoder", "lossw"))]
    opt = ad.make_optimizer(cfg.optimizer, [t for _, t in params], cfg.learning_rate, cfg.weight_decay)
    before = encoder.digest() if encoder is not None and v in FROZEN_VARIANTS else ""

    items = _windows(train_sites, L)
    cache = {}

    def batch_inputs(batch, grad=False):
        x = np.stack([s.forcings[a:a + L] for s, a in batch])
        st = np.stack([s.static_attrs for s, a in batch])
        if v == "lstm_sl":
            return x, None
        if v == "scratch":
            H = scratch.encode_inputs(x, st)
            return x, H[:, :L]
        keys = [(s.site_id, a) for s, a in batch]
        missing = [i for i, k in enumerate(keys) if k not in cache]
        if missing:
            E, _ = encoder.embeddings(x[missing], st[missing])
            for j, i in enumerate(missing):
                cache[keys[i]] = E[j]
        return x, np.stack([cache[k] for k in keys])

    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = derive_rng(cfg.seed, "finetune-epoch", epoch).permutation(len(items))
        losses = []
        for lo in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in order[lo:lo + cfg.batch_size]]
            x, E = batch_inputs(batch)
            y = np.stack([s.target[a:a + L] for s, a in batch])
            pred = head_forward(E, x, head)
            loss = _rmse(ad.reshape(pred, pred.shape[:-1]), y)
            if loss is None:
                continue
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite fine-tune loss at epoch {epoch}, batch {lo // cfg.batch_size}")
            ad.backward(loss)
            ad.clip_grad_norm([t for _, t in params], cfg.clip)
            opt.step()
            opt.zero_grad()
            if scratch is not None:
                scratch.params.zero_grad()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                 "seconds": time.perf_counter() - t0}
        history.append(entry)
        if log:
            log(entry)

    rows = predict_sites(test_sites, L, head, batch_inputs)
    after = encoder.digest() if before else ""
    return FinetuneResult(rows, history, store, before, after)


def predict_sites(sites, L, head, batch_inputs):
    """One row per (site, date); overlapping tail windows keep their last steps."""
    rows = []
    with ad.no_grad():
        for s in sites:
            starts = window_starts(s.T, L)
            x, E = batch_inputs([(s, a) for a in starts])
            pred = head_forward(E, x, head).data[..., 0]
            y = np.full(s.T, np.nan)
            for p, a in zip(pred, starts):
                y[a:a + L] = p
            obs = s.target if s.target is not None else np.full(s.T, np.nan)
            rows.extend((s.site_id, s.dates[t], y[t], obs[t]) for t in range(s.T))
    return rows


def static_run(enc, train_sites, test_sites, groups, target_var, hidden=32, epochs=200,
               learning_rate=1e-2, seed=0, seq_len=None, masked_groups=None):
    """Fit a static head predicting ``target_var`` from masked static tokens.

    Returns (test predictions, test truths) in normalised units.
    """
    j = groups.static_vars.index(target_var)
    L = seq_len or min(s.T for s in train_sites + test_sites)
    L = min(L, enc.model.cfg.seq_len)

    def tokens(sites):
        x = np.stack([s.forcings[:L] for s in sites])
        st = np.stack([s.static_attrs for s in sites])
        return masked_static_embeddings(enc, x, st, groups, target_var, masked_groups), st[:, j]

    tok_tr, y_tr = tokens(train_sites)
    tok_te, y_te = tokens(test_sites)
    store = ad.ParamStore()
    head = StaticHead(store, "static_head", enc.d_model, hidden, derive_rng(seed, "static-head"))
    opt = ad.make_optimizer("AdamW", store, learning_rate)
    for _ in range(epochs):
        pred = static_head_forward(tok_tr, head)
        loss = ad.mean((pred - y_tr) ** 2)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
    with ad.no_grad():
        return static_head_forward(tok_te, head).data, y_te


def classify_run(features_train, labels_train, features_test, channels=8, epochs=200,
                 learning_rate=1e-2, seed=0, weight_decay=0.0):
    """Train the grid classifier with BCE; return (test probabilities, head)."""
    store = ad.ParamStore()
    d = features_train.shape[-1]
    head = ClassifierHead(store, "cls", d, channels, derive_rng(seed, "cls-head"))
    opt = ad.make_optimizer("AdamW", store, learning_rate, weight_decay)
    for _ in range(epochs):
        loss = bce_loss(classify_logits(features_train, head), labels_train)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
    with ad.no_grad():
        return classify_head_forward(features_test, head).data, head
