"""Synthetic landscapes with planted cross-group dependencies.

Static attributes are drawn from a small structural model whose formulas are
written to a plain-text manifest, forcings are seasonal sinusoids plus AR(1)
noise modulated by the site climate, and the streamflow target comes from the
bucket model in :mod:`landfm.hybrid` with parameters that depend on
topography, geology and soil attributes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import hybrid
from .data import DataError, SiteRecord, VariableGroupSpec, derive_rng

STATIC_GROUPS = [
    ("Topography", ["meanelevation", "meanslope"]),
    ("Soil", ["HWSD_clay", "HWSD_sand", "HWSD_silt"]),
    ("Geology", ["permeability", "porosity"]),
    ("Vegetation", ["NDVI", "forest_frac"]),
    ("Climate", ["aridity", "meanP", "meanTa", "seasonality_P"]),
]
FORCINGS = ["prcp", "srad", "rh", "tmax", "tmin", "pet"]
N_REGIONS = 4

# planted static formulas, evaluated in this order; ``eps_<name>`` is N(0, 1)
STATIC_FORMULAS = [
    ("meanP", "0.8*loc + 0.6*eps_meanP"),
    ("meanTa", "-0.9*loc + 0.45*eps_meanTa"),
    ("seasonality_P", "eps_seasonality_P"),
    ("aridity", "0.7*meanTa - 0.7*meanP + 0.3*eps_aridity"),
    ("HWSD_clay", "0.6*meanP - 0.5*meanTa + 0.4*seasonality_P"),
    ("HWSD_sand", "-0.6*HWSD_clay + 0.8*eps_HWSD_sand"),
    ("HWSD_silt", "-0.5*HWSD_clay - 0.5*HWSD_sand + 0.7*eps_HWSD_silt"),
    ("meanelevation", "eps_meanelevation"),
    ("meanslope", "0.7*meanelevation + 0.7*eps_meanslope"),
    ("permeability", "eps_permeability"),
    ("porosity", "eps_porosity"),
    ("NDVI", "0.5*meanP - 0.3*aridity + 0.5*eps_NDVI"),
    ("forest_frac", "0.6*NDVI + 0.6*eps_forest_frac"),
]
NOISELESS = ("HWSD_clay",)          # planted with zero noise
PURE_NOISE = ("permeability",)      # no dependence in or out

# unit-interval bucket parameters as functions of statics (sigmoid of the expression)
TARGET_PARAM_FORMULAS = [
    ("beta", "0.8*HWSD_sand"),
    ("k0", "1.2*meanslope"),
    ("k1", "1.2*porosity"),
    ("perc", "0.8*meanelevation"),
    ("fc", "-0.8*HWSD_clay"),
    ("ddf", "0.0"),
    ("beta_et", "0.8*NDVI"),
]
ROUTING_TRUTH = "w_k proportional to (k+1)*exp(-(k+1)/1.5), k = 0..14"


def default_groups():
    return VariableGroupSpec.with_singleton_forcings(STATIC_GROUPS, FORCINGS)


@dataclass
class SyntheticDataset:
    sites: list
    groups: VariableGroupSpec
    manifest: str
    target_column: str | None = "streamflow"
    true_params: dict = field(default_factory=dict)     # site_id -> {name: value}


def _eval(expr, env):
    return eval(expr, {"__builtins__": {}}, env)   # formulas are module constants


def routing_truth(K=15):
    k = np.arange(1, K + 1)
    w = k * np.exp(-k / 1.5)
    return w / w.sum()


def _forcings(rng, T, clim, doy):
    """Seasonal forcings for one site from its climate attributes."""
    ph = 2 * np.pi * doy / 365.25

    def ar1(phi, sd):
        e = rng.normal(0.0, sd, T)
        out = np.empty(T)
        acc = 0.0
        for t in range(T):
            acc = phi * acc + e[t]
            out[t] = acc
        return out

    season = np.sin(ph - np.pi / 2)        # cold around day 0
    tmean = 10.0 + 5.0 * clim["meanTa"] + 10.0 * season + ar1(0.7, 2.0)
    spread = 8.0 + 2.0 * np.sin(ph) + ar1(0.5, 0.8)
    tmax = tmean + 0.5 * spread
    tmin = tmean - 0.5 * spread
    wet = 0.6 * clim["meanP"] + 0.6 * clim["seasonality_P"] * np.cos(ph) + ar1(0.6, 1.2) - 0.5
    prcp = 3.0 * np.asarray(ad.softplus(wet * 2.0).data)
    rh = 60.0 + 10.0 * clim["meanP"] - 5.0 * clim["meanTa"] + 8.0 * np.tanh(wet) + ar1(0.5, 3.0)
    srad = 180.0 + 80.0 * season - 30.0 * np.tanh(wet) + ar1(0.5, 15.0)
    pet = np.maximum(0.0, 0.15 * (tmean + 5.0) * (1.0 + 0.002 * (srad - 180.0)))
    cols = {"prcp": prcp, "srad": srad, "rh": rh, "tmax": tmax, "tmin": tmin, "pet": pet}
    return cols


def generate_synthetic(n_sites, T, groups=None, seed=0, with_target=True, start="2000-01-01"):
    """Return a SyntheticDataset of ``n_sites`` sites with ``T`` daily steps.

    Variables in ``groups`` without a known formula become pure noise
    (static) or AR(1) noise (dynamic); the manifest says which.
    """
    if n_sites < 1:
        raise DataError(f"n_sites must be >= 1, got {n_sites}")
    if T < 30:
        raise DataError(f"T={T} too short: must be >= 30 to admit the minimum mask window")
    groups = groups or default_groups()
    rng = derive_rng(seed, "synthetic-static")
    loc = rng.uniform(0.0, 1.0, n_sites)
    env = {"loc": (loc - 0.5) * np.sqrt(12.0)}
    formulas = dict(STATIC_FORMULAS)
    for name, expr in STATIC_FORMULAS:
        env[f"eps_{name}"] = rng.normal(0.0, 1.0, n_sites)
    for name, expr in STATIC_FORMULAS:
        env[name] = _eval(expr, env)
    lines = ["# planted static dependencies (eps_* ~ N(0,1) iid; loc ~ standardised uniform site position)"]
    static = {}
    for v in groups.static_vars:
        if v in formulas:
            static[v] = env[v]
            tag = " [noiseless]" if v in NOISELESS else (" [pure noise]" if v in PURE_NOISE else "")
            lines.append(f"{v} = {formulas[v]}{tag}")
        else:
            static[v] = derive_rng(seed, f"synthetic-extra-{v}").normal(0.0, 1.0, n_sites)
            lines.append(f"{v} = eps_{v} [pure noise]")

    dates = np.datetime64(start, "D") + np.arange(T)
    doy = (dates - dates.astype("datetime64[Y]")).astype(int).astype(float)
    dyn = groups.dynamic_vars
    clim = {k: env[k] for k in ("meanP", "meanTa", "seasonality_P")}
    lines.append("# forcings: seasonal sinusoids + AR(1) noise driven by meanP, meanTa, seasonality_P")
    for v in dyn:
        lines.append(f"{v} = forcing" if v in FORCINGS else f"{v} = AR(1) noise [pure noise]")

    region = np.minimum((loc * N_REGIONS).astype(int), N_REGIONS - 1)
    sites = []
    for i in range(n_sites):
        srng = derive_rng(seed, "synthetic-forcing", i)
        cols = _forcings(srng, T, {k: float(v[i]) for k, v in clim.items()}, doy)
        mat = np.stack([cols[v] if v in cols else srng.normal(0.0, 1.0, T) for v in dyn], axis=1) \
            if dyn else np.zeros((T, 0))
        sites.append(SiteRecord(f"S{i:05d}", f"R{region[i]}", mat,
                                np.array([static[v][i] for v in groups.static_vars]), dates))

    true_params = {}
    can_target = with_target and {"prcp", "tmax", "tmin", "pet"} <= set(dyn) and \
        all(v in static for v in ("HWSD_sand", "meanslope", "porosity", "meanelevation", "HWSD_clay", "NDVI"))
    if can_target:
        true_params = _attach_target(sites, dyn, env, lines)
    return SyntheticDataset(sites, groups, "\n".join(lines) + "\n",
                            "streamflow" if can_target else None, true_params)


def _attach_target(sites, dyn, env, lines):
    names = list(hybrid.PARAM_RANGES)
    n = len(sites)
    vals = {}
    for p, expr in TARGET_PARAM_FORMULAS:
        u = 1.0 / (1.0 + np.exp(-np.broadcast_to(_eval(expr, env), (n,))))
        lo, hi = hybrid.PARAM_RANGES[p]
        vals[p] = lo + (hi - lo) * u
    params = {p: ad.Tensor(vals[p].reshape(n, 1, 1)) for p in names}
    phys = np.stack([hybrid.physics_inputs(s, dyn) for s in sites])
    cfg = hybrid.HybridConfig(n_units=1, warmup=0)
    with ad.no_grad():
        out = hybrid.hybrid_forward(params, phys, cfg, kernel=ad.Tensor(routing_truth(cfg.routing_length)))
    flow = out["flow"].data
    for i, s in enumerate(sites):
        s.target = flow[i].copy()
    lines.append("# target: streamflow from the bucket model (1 unit, zero initial storage)")
    for p, expr in TARGET_PARAM_FORMULAS:
        lo, hi = hybrid.PARAM_RANGES[p]
        lines.append(f"param {p} = {lo:g} + {hi - lo:g}*sigmoid({expr})")
    lines.append(f"routing {ROUTING_TRUTH}")
    return {s.site_id: {p: float(vals[p][i]) for p in names} for i, s in enumerate(sites)}


def parse_manifest(text):
    """Map each generated variable to (formula, tags) from a manifest."""
    out = {}
    for line in text.splitlines():
        if not line or line.startswith("#") or line.startswith(("param ", "routing ")):
            continue
        name, _, rhs = line.partition(" = ")
        expr, *tags = rhs.split(" [")
        out[name.strip()] = (expr.strip(), tuple(t.rstrip("]") for t in tags))
    return out


def planted_dependents(text, groups):
    """Static variables whose manifest formula references a variable of another group."""
    parsed = parse_manifest(text)
    out = []
    for v, (expr, tags) in parsed.items():
        if v not in groups.static_vars or "pure noise" in tags:
            continue
        refs = [w for w in groups.all_vars if w != v and w in expr.replace("*", " ").replace("+", " ")
                .replace("-", " ").split()]
        if any(groups.group_of(w) != groups.group_of(v) for w in refs):
            out.append(v)
    return out


def generate_grid_samples(n_samples, k, groups=None, seed=0, attribute="meanslope", spread=2.0):
    """Classification samples: each a k x k grid of static-attribute cells.

    The label is 1 when the grid mean of ``attribute`` exceeds the median of
    grid means over all samples (a planted, separable rule).  Returns
    (cells (n, k, k, S), labels (n,), static names).  ``spread`` is the
    standard deviation of a per-grid offset added to ``attribute``, which
    sets how far grid means sit from the decision threshold.
    """
    if n_samples < 2 or k < 1:
        raise DataError(f"need n_samples >= 2 and k >= 1, got {n_samples}, {k}")
    groups = groups or default_groups()
    ds = generate_synthetic(n_samples * k * k, 30, groups, seed, with_target=False)
    cells = np.stack([s.static_attrs for s in ds.sites]).reshape(n_samples, k, k, -1)
    # give each grid a shared offset so grid means spread beyond the cell noise
    j = groups.static_vars.index(attribute)
    shift = derive_rng(seed, "grid-shift").normal(0.0, spread, n_samples)
    cells[..., j] += shift[:, None, None]
    means = cells[..., j].mean(axis=(1, 2))
    labels = (means > np.median(means)).astype(float)
    return cells, labels, groups.static_vars
