"""Shared fixtures: one small pretrained encoder reused by the training-based tests."""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from landfm import data
from landfm import pretrain as pt
from landfm import synthetic as sy
from landfm.model import MaskedAutoencoder, ModelConfig

ENCODER_CONFIG = dict(seq_len=64, d_model=32, n_heads=2, e_layers=1, d_ff=64, dropout=0.0, embed_hidden=16,
                      batch_size=64, learning_rate=3e-3, epochs=30, L_min=8, L_max=24, seed=1,
                      checkpoint_every=100)


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    """Encoder pretrained on 512 synthetic sites, plus 128 held-out sites from another seed.

    Both site sets are normalised with the pretraining statistics.
    """
    t0 = time.perf_counter()
    A = sy.generate_synthetic(512, 128, seed=11, with_target=False)
    stats = data.compute_norm_stats(A.sites)
    sites = data.apply_norm(A.sites, stats)
    cfg = pt.PretrainConfig(**ENCODER_CONFIG)
    out = tmp_path_factory.mktemp("pretrained")
    ckpt, log, model = pt.pretrain_run(cfg, pt.SiteSource(sites), A.groups, out, resume=False)
    held = sy.generate_synthetic(128, 128, seed=99, with_target=False)
    return SimpleNamespace(model=model, ckpt=ckpt, log=log, cfg=cfg, groups=A.groups, stats=stats,
                           sites=sites, held=data.apply_norm(held.sites, stats),
                           seconds=time.perf_counter() - t0)


@pytest.fixture
def micro_model():
    """Untrained tiny encoder matching the synthetic generator's variable counts."""
    g = sy.default_groups()
    cfg = ModelConfig(len(g.dynamic_vars), len(g.static_vars), seq_len=16, d_model=8, n_heads=2, e_layers=1,
                      d_ff=16, dropout=0.0, embed_hidden=4)
    return MaskedAutoencoder(cfg, seed=0)


@pytest.fixture(scope="session")
def small_sites():
    ds = sy.generate_synthetic(10, 40, seed=0)
    return data.apply_norm(ds.sites, data.compute_norm_stats(ds.sites)), ds.groups



_ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` notes one check of acceptance criterion ``n``."""
    def _record(n, ok, detail):
        _ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} ({'; '.join(d for _, d in checks)})")
