"""Self-supervised pretraining loop with deterministic resume."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DataError, derive_rng
from .masking import plan_from_groups, sample_plan
from .model import MaskedAutoencoder, ModelConfig, load_checkpoint, save_checkpoint


class TrainingError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    seq_len: int = 365
    d_model: int = 256
    n_heads: int = 4
    e_layers: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    embed_hidden: int = 64
    dec_lstm_layers: int = 1
    batch_size: int = 256
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 25
    clip: float = 5.0
    L_min: int = 30
    L_max: int = 90
    p_mask: float = 0.5
    ts_ratio: float = 1.0
    static_ratio: float = 0.5
    seed: int = 111
    optimizer: str = "AdamW"
    loss_kind: str = "mse"
    windows_per_site: int = 1
    checkpoint_every: int = 5
    patience: int = 30
    early_stopping: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for k in ("seq_len", "d_model", "n_heads", "e_layers", "d_ff", "embed_hidden", "batch_size",
                  "L_min", "L_max", "windows_per_site", "checkpoint_every", "patience", "dec_lstm_layers"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1, got {getattr(self, k)}")
        for k in ("learning_rate", "weight_decay", "epochs", "clip", "ts_ratio", "static_ratio"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0, got {getattr(self, k)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.p_mask <= 1.0:
            raise ValueError(f"p_mask must lie in (0, 1], got {self.p_mask}")
        if not self.L_min <= self.L_max <= self.seq_len:
            raise ValueError(f"need L_min <= L_max <= seq_len, got {self.L_min}, {self.L_max}, {self.seq_len}")
        if self.loss_kind not in ("mse", "nse"):
            raise ValueError(f"loss_kind must be 'mse' or 'nse', got {self.loss_kind!r}")

    def model_config(self, n_dynamic, n_static):
        return ModelConfig(n_dynamic, n_static, self.seq_len, self.d_model, self.n_heads, self.e_layers,
                           self.d_ff, self.dropout, self.embed_hidden, self.dec_lstm_layers)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TrainLogEntry:
    epoch: int
    loss: float
    loss_ts: float
    loss_static: float
    seconds: float


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def append(self, entry):
        if self.entries and entry.epoch != self.entries[-1].epoch + 1:
            raise ValueError(f"epoch {entry.epoch} does not follow {self.entries[-1].epoch}")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def losses(self):
        return np.array([e.loss for e in self.entries])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "loss_ts", "loss_static", "seconds"])
            for e in self.entries:
                w.writerow([e.epoch, repr(e.loss), repr(e.loss_ts), repr(e.loss_static), f"{e.seconds:.3f}"])

    def to_array(self):
        return np.array([[e.epoch, e.loss, e.loss_ts, e.loss_static, e.seconds] for e in self.entries]
                        ).reshape(-1, 5)

    @classmethod
    def from_array(cls, arr):
        return cls([TrainLogEntry(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in arr])


class SiteSource:
    """In-memory stand-in for a ShardSet (same ``read``/``len``/``seed`` surface)."""

    def __init__(self, sites, seed=0):
        self.sites = list(sites)
        self.seed = seed

    def __len__(self):
        return len(self.sites)

    def read(self, index):
        return self.sites[index]


def epoch_order(source, epoch, seed):
    return derive_rng(seed, "epoch-order", epoch).permutation(len(source))


def draw_sample(site, cfg, groups, epoch, index, w):
    """Window of seq_len days and a MaskPlan, both keyed by (seed, epoch, index, w)."""
    T = site.T
    if T < cfg.seq_len:
        raise DataError(f"site {site.site_id}: {T} days is shorter than seq_len {cfg.seq_len}")
    rng = derive_rng(cfg.seed, "sample", epoch, index, w)
    a = int(rng.integers(0, T - cfg.seq_len + 1))
    plan = sample_plan(groups, cfg.seq_len, cfg.L_min, cfg.L_max, cfg.p_mask, rng)
    return site.forcings[a:a + cfg.seq_len], site.static_attrs, plan


def pretrain_epoch(model, source, cfg, groups, epoch, optimizer):
    """One pass over ``source`` in the epoch permutation -> TrainLogEntry."""
    t0 = time.perf_counter()
    order = epoch_order(source, epoch, cfg.seed)
    samples = [(int(i), w) for i in order for w in range(cfg.windows_per_site)]
    tot = ts = st = 0.0
    n = 0
    for b, lo in enumerate(range(0, len(samples), cfg.batch_size)):
        chunk = samples[lo:lo + cfg.batch_size]
        xs, ss, plans = [], [], []
        for i, w in chunk:
            x, s, plan = draw_sample(source.read(i), cfg, groups, epoch, i, w)
            xs.append(x)
            ss.append(s)
            plans.append(plan)
        loss, l_ts, l_st = model.loss(np.stack(xs), np.stack(ss), plans, ts_ratio=cfg.ts_ratio,
                                 static_ratio=cfg.static_ratio, kind=cfg.loss_kind, training=True,
                                 rng=derive_rng(cfg.seed, "dropout", epoch, b), return_parts=True)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b} "
                                f"(samples {[i for i, _ in chunk][:8]}...)")
        ad.backward(loss)
        ad.clip_grad_norm(model.params, cfg.clip)
        optimizer.step()
        optimizer.zero_grad()
        k = len(chunk)
        tot += loss.item() * k
        ts += l_ts * k
        st += l_st * k
        n += k
    return TrainLogEntry(epoch, tot / n, ts / n, st / n, time.perf_counter() - t0)


CHECKPOINT_NAME = "checkpoint.npz"


def _run_config(cfg, model):
    return {"pretrain": cfg.to_dict(), "model": model.cfg.to_dict()}


def save_pretrain_state(path, model, optimizer, log, cfg, groups):
    extra = {f"opt/{k}": v for k, v in optimizer.state_dict().items()}
    extra["log"] = log.to_array()
    meta = {"epochs_done": len(log), "groups": groups.to_text()}
    return save_checkpoint(path, model.params, _run_config(cfg, model), extra, meta)


def pretrain_run(cfg, source, groups, out_dir, resume=True, stop_after=None, log=None):
    """Train for ``cfg.epochs`` epochs, checkpointing to ``out_dir``.

    Resumes from ``out_dir/checkpoint.npz`` when present (the stored config
    must match).  ``stop_after`` ends the run early after that many epochs,
    still writing a checkpoint (used to exercise resume).
    Returns (checkpoint path, TrainLog, model).
    """
    if len(source) == 0:
        raise DataError("no pretraining samples")
    first = source.read(0)
    C, S = first.forcings.shape[1], first.static_attrs.shape[0]
    if (C, S) != (len(groups.dynamic_vars), len(groups.static_vars)):
        raise DataError(f"data has {C} dynamic / {S} static variables, groups declare "
                        f"{len(groups.dynamic_vars)} / {len(groups.static_vars)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    model = MaskedAutoencoder(cfg.model_config(C, S), seed=cfg.seed)
    opt = ad.make_optimizer(cfg.optimizer, model.params, cfg.learning_rate, cfg.weight_decay)
    train_log = TrainLog()
    if resume and ckpt.exists():
        header, params, extra = load_checkpoint(ckpt)
        want = _run_config(cfg, model)
        if header["config"] != want:
            diff = sorted(k for sect in want for k in want[sect]
                          if header["config"].get(sect, {}).get(k) != want[sect][k])
            raise DataError(f"{ckpt}: existing checkpoint config differs in {diff}")
        try:
            model.params.load_state_dict(params)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{ckpt}: parameter shapes do not match the model: {exc}") from exc
        opt.load_state_dict({k[4:]: v for k, v in extra.items() if k.startswith("opt/")})
        train_log = TrainLog.from_array(extra["log"])
    best, stale = np.inf, 0
    target = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    try:
        for epoch in range(len(train_log), target):
            entry = pretrain_epoch(model, source, cfg, groups, epoch, opt)
            train_log.append(entry)
            if log:
                log(entry)
            last = epoch + 1 == target
            if (epoch + 1) % cfg.checkpoint_every == 0 or last:
                save_pretrain_state(ckpt, model, opt, train_log, cfg, groups)
            if cfg.early_stopping:
                if entry.loss < best:
                    best, stale = entry.loss, 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        save_pretrain_state(ckpt, model, opt, train_log, cfg, groups)
                        break
        if target == 0 or not ckpt.exists():
            save_pretrain_state(ckpt, model, opt, train_log, cfg, groups)
    except OSError as exc:
        raise TrainingError(f"cannot write checkpoint to {out}: {exc}") from exc
    train_log.write_csv(out / "train_log.csv")
    return ckpt, train_log, model


def recoverability_eval(model, sites, groups, variables, masked_groups=None):
    """Corr(reconstruction, truth) over ``sites`` for each masked static variable.

    Each variable's own group is masked (or ``masked_groups`` when given)
    for the first seq_len-day window of every site.
    """
    L = model.cfg.seq_len
    x = np.stack([s.forcings[:L] for s in sites])
    st = np.stack([s.static_attrs for s in sites])
    out = {}
    with ad.no_grad():
        for v in variables:
            mg = masked_groups or [groups.group_of(v)]
            plan = plan_from_groups(groups, mg, 0, L)
            _, s_hat = model.forward(x, st, [plan] * len(sites))
            j = groups.static_vars.index(v)
            r = s_hat.data[:, j]
            out[v] = float(np.corrcoef(r, st[:, j])[0, 1]) if np.std(r) > 0 else 0.0
    return out
