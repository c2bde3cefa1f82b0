"""Post-norm transformer encoder, BiLSTM reconstruction decoder and the
variance-normalised masked reconstruction loss."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import derive_rng
from .embedding import (EmbeddingBank, PositionalTable, add_positions, assemble_sequence,
                        embed_dynamic, embed_static)
from .masking import MaskVectors, apply_mask, empty_plan, mask_arrays


@dataclass
class ModelConfig:
    n_dynamic: int
    n_static: int
    seq_len: int = 365
    d_model: int = 256
    n_heads: int = 4
    e_layers: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    embed_hidden: int = 64
    dec_lstm_layers: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even (BiLSTM halves it per direction)")

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _uniform(rng, fan_in, shape):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, shape)


class Linear:
    def __init__(self, store, prefix, n_in, n_out, rng, zero=False):
        w = np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out))
        self.W = store.add(f"{prefix}.W", w)
        self.b = store.add(f"{prefix}.b", np.zeros(n_out))

    def __call__(self, x):
        return ad.matmul(x, self.W) + self.b


class LayerNorm:
    def __init__(self, store, prefix, n):
        self.g = store.add(f"{prefix}.g", np.ones(n))
        self.b = store.add(f"{prefix}.b", np.zeros(n))

    def __call__(self, x):
        return ad.layer_norm(x, self.g, self.b)


class LSTMLayer:
    """Unidirectional LSTM parameters; forget-gate bias starts at 1."""

    def __init__(self, store, prefix, n_in, hidden, rng):
        self.hidden = hidden
        self.W_ih = store.add(f"{prefix}.W_ih", _uniform(rng, hidden, (n_in, 4 * hidden)))
        self.W_hh = store.add(f"{prefix}.W_hh", _uniform(rng, hidden, (hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = store.add(f"{prefix}.b", b)

    def __call__(self, x, reverse=False):
        return ad.lstm(x, self.W_ih, self.W_hh, self.b, reverse=reverse)


class BiLSTM:
    def __init__(self, store, prefix, n_in, hidden, rng):
        self.fwd = LSTMLayer(store, f"{prefix}.fwd", n_in, hidden, rng)
        self.bwd = LSTMLayer(store, f"{prefix}.bwd", n_in, hidden, rng)

    def __call__(self, x):
        return ad.concat([self.fwd(x), self.bwd(x, reverse=True)], axis=-1)


# -- encoder -------------------------------------------------------------------------

class TransformerBlock:
    def __init__(self, store, prefix, d_model, n_heads, d_ff, rng):
        self.n_heads = n_heads
        self.qkv = Linear(store, f"{prefix}.qkv", d_model, 3 * d_model, rng)
        self.out = Linear(store, f"{prefix}.attn_out", d_model, d_model, rng)
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", d_model)
        self.ff1 = Linear(store, f"{prefix}.ff1", d_model, d_ff, rng)
        self.ff2 = Linear(store, f"{prefix}.ff2", d_ff, d_model, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", d_model)


def mha(H, block, return_weights=False):
    """Bidirectional scaled dot-product self-attention with ``block.n_heads`` heads."""
    B, L, d = H.shape
    h = block.n_heads
    dh = d // h
    qkv = ad.reshape(block.qkv(H), (B, L, 3, h, dh))
    qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))            # (3, B, h, L, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
    out = block.out(ctx)
    return (out, attn) if return_weights else out


def ffn(H, block):
    return block.ff2(ad.gelu(block.ff1(H)))


def transformer_block(H, block, dropout=0.0, rng=None, training=False):
    """LN(H + A) then LN(H~ + FFN(H~)); dropout before each residual add."""
    A = ad.dropout(mha(H, block), dropout, rng, training)
    H_tilde = block.ln1(H + A)
    F = ad.dropout(ffn(H_tilde, block), dropout, rng, training)
    return block.ln2(H_tilde + F)


class EncoderStack:
    def __init__(self, store, prefix, cfg, rng):
        self.blocks = [TransformerBlock(store, f"{prefix}.{i}", cfg.d_model, cfg.n_heads, cfg.d_ff, rng)
                       for i in range(cfg.e_layers)]
        self.dropout = cfg.dropout


def encode(seq, stack, training=False, rng=None):
    if not seq.positioned:
        raise ValueError("encode() needs a sequence with positional encodings added")
    H = seq.Z
    if training and stack.dropout > 0 and rng is None:
        raise ValueError("training-mode encode with dropout needs an rng")
    for block in stack.blocks:
        H = transformer_block(H, block, stack.dropout, rng, training)
    return H


# -- decoder ----------------------------------------------------------------------------

class ReconstructionDecoder:
    def __init__(self, store, prefix, cfg, rng):
        d = cfg.d_model
        self.proj = Linear(store, f"{prefix}.proj", d, d, rng)
        self.lstms = [BiLSTM(store, f"{prefix}.lstm{i}", d, d // 2, rng)
                      for i in range(cfg.dec_lstm_layers)]
        self.dyn_head = Linear(store, f"{prefix}.dyn_head", d, cfg.n_dynamic, rng)
        self.static_head = Linear(store, f"{prefix}.static_head", d, cfg.n_static, rng)


def decode(H, dec):
    """H (B, T+1, d) -> (x_hat (B, T, C), s_hat (B, S))."""
    U = dec.proj(H)
    for layer in dec.lstms:
        U = layer(U)
    T = H.shape[1] - 1
    x_hat = dec.dyn_head(U[:, :T])
    s_hat = dec.static_head(U[:, T])
    return x_hat, s_hat


# -- loss -----------------------------------------------------------------------------------

def reconstruction_loss(x_hat, x, s_hat, s, plans, sigma_dyn, sigma_static, w_dyn, w_static,
                        ts_ratio=1.0, static_ratio=0.5, kind="mse", return_parts=False):
    """Weighted squared reconstruction error over masked slots only.

    Dynamic terms cover the masked window of masked variables, each divided by
    ``sigma_c**2``; static terms cover masked attributes.  The per-sample sums
    are averaged over the batch.  ``kind="nse"`` swaps the dynamic
    denominator for the in-window variance of the observations.
    """
    x_hat, s_hat = ad.as_tensor(x_hat), ad.as_tensor(s_hat)
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.ndim == 2:
        x, s = x[None], s[None]
        x_hat = ad.reshape(x_hat, (1,) + x_hat.shape)
        s_hat = ad.reshape(s_hat, (1,) + s_hat.shape)
    B, T, C = x.shape
    S = s.shape[1]
    if hasattr(plans, "start"):
        plans = [plans] * B
    if any(p.empty for p in plans):
        raise ValueError("reconstruction_loss: a plan masks no variable")
    dm, sm = mask_arrays(plans, T, C, S)
    dm &= np.isfinite(x)
    sm &= np.isfinite(s)
    x = np.where(np.isfinite(x), x, 0.0)
    s = np.where(np.isfinite(s), s, 0.0)

    if kind == "mse":
        scale_dyn = np.broadcast_to(1.0 / np.asarray(sigma_dyn, dtype=float) ** 2, (B, T, C))
    elif kind == "nse":
        cnt = np.maximum(dm.sum(axis=1, keepdims=True), 1)
        mu = (x * dm).sum(axis=1, keepdims=True) / cnt
        var = (((x - mu) ** 2) * dm).sum(axis=1, keepdims=True) / cnt
        scale_dyn = np.broadcast_to(1.0 / (var + 0.1), (B, T, C))
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    scale_st = 1.0 / np.asarray(sigma_static, dtype=float) ** 2

    err_d = x_hat - x
    err_s = s_hat - s
    ts = ad.tsum(ad.tsum(err_d * err_d * (dm * scale_dyn), axis=(0, 1)) * w_dyn)
    st = ad.tsum(ad.tsum(err_s * err_s * (sm * scale_st), axis=0) * w_static)
    loss = (ts * ts_ratio + st * static_ratio) * (1.0 / B)
    if return_parts:
        return loss, ts.item() * ts_ratio / B, st.item() * static_ratio / B
    return loss


# -- full model ------------------------------------------------------------------------------

class MaskedAutoencoder:
    """Embedding banks, mask vectors, positions, encoder and decoder in one
    ParamStore.  Groups: embed, mask, pos, encoder, decoder, lossw."""

    ENCODER_GROUPS = ("embed", "mask", "pos", "encoder")

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.seed = seed
        self.params = ad.ParamStore()
        rng = derive_rng(seed, "init")
        p = self.params
        self.dyn_bank = EmbeddingBank(p, "embed.dyn", cfg.n_dynamic, cfg.embed_hidden, cfg.d_model, rng)
        self.static_bank = EmbeddingBank(p, "embed.static", cfg.n_static, cfg.embed_hidden,
                                         cfg.d_model, rng)
        self.mask_vectors = MaskVectors(p, "mask", cfg.n_dynamic, cfg.n_static, cfg.d_model, rng)
        self.positions = PositionalTable(p, "pos.P", cfg.seq_len + 1, cfg.d_model, rng)
        self.encoder = EncoderStack(p, "encoder", cfg, rng)
        self.decoder = ReconstructionDecoder(p, "decoder", cfg, rng)
        self.loss_logits = p.add("lossw.rho", np.zeros(cfg.n_dynamic + cfg.n_static))

    def loss_weights(self):
        """Positive weights, mean 1 across all variables (softmax times count)."""
        n = self.cfg.n_dynamic + self.cfg.n_static
        w = ad.softmax(self.loss_logits) * float(n)
        return w[: self.cfg.n_dynamic], w[self.cfg.n_dynamic:]

    def encode_inputs(self, x, s, plans=None, training=False, rng=None):
        """Embed, mask, add positions and run the encoder -> H (B, T+1, d)."""
        per_dyn, z = embed_dynamic(x, self.dyn_bank)
        per_st, tok = embed_static(s, self.static_bank)
        if per_dyn.ndim == 3:
            per_dyn = ad.reshape(per_dyn, (1,) + per_dyn.shape)
            per_st = ad.reshape(per_st, (1,) + per_st.shape)
        if plans is not None:
            z, tok = apply_mask(per_dyn, per_st, plans, self.mask_vectors)
        elif z.ndim == 2:
            z = ad.reshape(z, (1,) + z.shape)
            tok = ad.reshape(tok, (1,) + tok.shape)
        seq = add_positions(assemble_sequence(z, tok), self.positions)
        return encode(seq, self.encoder, training=training, rng=rng)

    def forward(self, x, s, plans=None, training=False, rng=None):
        H = self.encode_inputs(x, s, plans, training, rng)
        x_hat, s_hat = decode(H, self.decoder)
        return x_hat, s_hat

    def loss(self, x, s, plans, sigma_dyn=1.0, sigma_static=1.0, ts_ratio=1.0, static_ratio=0.5,
             kind="mse", training=False, rng=None, return_parts=False, targets=None):
        """Masked reconstruction loss of (x, s).

        ``targets`` optionally supplies separate (x, s) reconstruction targets,
        e.g. to show the loss ignores what the encoder saw at masked slots.
        """
        x_hat, s_hat = self.forward(x, s, plans, training, rng)
        if targets is not None:
            x, s = targets
        w_d, w_s = self.loss_weights()
        C, S = self.cfg.n_dynamic, self.cfg.n_static
        sd = np.broadcast_to(np.asarray(sigma_dyn, dtype=float), (C,))
        ss = np.broadcast_to(np.asarray(sigma_static, dtype=float), (S,))
        return reconstruction_loss(x_hat, x, s_hat, s, plans, sd, ss, w_d, w_s, ts_ratio,
                                   static_ratio, kind, return_parts)

    def embeddings(self, x, s, plans=None):
        """Eval-mode encoder output without graph: (E (B, T, d), static (B, d))."""
        with ad.no_grad():
            H = self.encode_inputs(x, s, plans, training=False)
        T = H.shape[1] - 1
        return H.data[:, :T], H.data[:, T]

    def encoder_bytes(self):
        return self.params.group_bytes(self.ENCODER_GROUPS)


def unmasked_plans(B):
    return [empty_plan()] * B


# -- checkpoints -----------------------------------------------------------------------------

CHECKPOINT_VERSION = "landfm-ckpt-1"


def save_checkpoint(path, params, config, extra=None, meta=None):
    """Write named float64 arrays to ``path`` (.npz) plus a ``.txt`` sidecar
    listing names, shapes and the config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{n}": t.data for n, t in params}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v, dtype=np.float64)
    cfg_json = json.dumps(config, sort_keys=True)
    cfg_hash = hashlib.sha256(cfg_json.encode()).hexdigest()[:16]
    header = {"version": CHECKPOINT_VERSION, "config": config, "config_hash": cfg_hash,
              "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    lines = [f"{CHECKPOINT_VERSION} config_hash={cfg_hash}"]
    lines += [f"{n} {'x'.join(str(d) for d in t.shape) or 'scalar'}" for n, t in params]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path):
    """Return (header dict, param arrays dict, extra arrays dict)."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        extra = {k[6:]: z[k] for k in z.files if k.startswith("extra/")}
    return header, params, extra


def load_model(path, seed=0):
    header, params, _ = load_checkpoint(path)
    cfg = ModelConfig(**header["config"]["model"])
    model = MaskedAutoencoder(cfg, seed=seed)
    model.params.load_state_dict(params)
    return model, header
