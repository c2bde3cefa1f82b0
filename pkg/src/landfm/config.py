"""Flat ``key = value`` configuration files and run manifests.

Keys are the lower_snake_case names of the hyperparameter table rows
(``model_dimension``, ``number_of_heads`` ...); short aliases such as
``d_model`` resolve to the same canonical key.  Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    aliases: tuple = ()
    choices: tuple = ()


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


PRETRAIN_KEYS = [
    Key("random_seed", int, 111, ("seed",)),
    Key("sequence_length", int, 365, ("seq_len",)),
    Key("label_length", int, 365),                       # accepted, unused by the loss
    Key("prediction_length", int, 365),                  # accepted, unused by the loss
    Key("minimum_window_size", int, 30, ("l_min", "L_min")),
    Key("maximum_window_size", int, 90, ("l_max", "L_max")),
    Key("model_dimension", int, 256, ("d_model",)),
    Key("number_of_heads", int, 4, ("n_heads",)),
    Key("encoder_layers", int, 4, ("e_layers",)),
    Key("decoder_layers", int, 1, ("dec_lstm_layers",)),
    Key("feed_forward_dimension", int, 512, ("d_ff",)),
    Key("dropout", float, 0.1),
    Key("embedding_hidden", int, 64, ("embed_hidden",)),
    Key("optimizer", str, "AdamW", (), ("AdamW", "Adadelta")),
    Key("loss_criterion", str, "MaskedMSE", ("loss",), ("MaskedMSE", "MaskedNSE")),
    Key("epochs", int, 25),
    Key("batch_size", int, 256),
    Key("learning_rate", float, 1e-4, ("lr",)),
    Key("weight_decay", float, 0.0),
    Key("patience", int, 30),
    Key("early_stopping", _bool, False),
    Key("gradient_clipping", float, 5.0, ("clip",)),
    Key("time_series_loss_ratio", float, 1.0, ("ts_ratio",)),
    Key("static_loss_ratio", float, 0.5, ("static_ratio",)),
    Key("mask_probability", float, 0.5, ("p_mask",)),
    Key("windows_per_site", int, 1),
    Key("save_frequency", int, 5, ("checkpoint_every",)),
    Key("shard_size", int, 256),
    Key("exclude_sites", str, ""),
    Key("target", str, "streamflow"),                    # task column, read and ignored
]

FINETUNE_KEYS = [
    Key("random_seed", int, 111111, ("seed",)),
    Key("variant", str, "resconn", (), ("resconn", "noresconn", "gated", "bottleneck", "residual",
                                        "lstm_sl", "scratch")),
    Key("sequence_length", int, 365, ("seq_len", "rho")),
    Key("hidden_size", int, 128, ("hidden",)),
    Key("optimizer", str, "AdamW", (), ("AdamW", "Adadelta")),
    Key("learning_rate", float, 1e-3, ("lr",)),
    Key("weight_decay", float, 0.0),
    Key("epochs", int, 50),
    Key("batch_size", int, 128),
    Key("gradient_clipping", float, 5.0, ("clip",)),
    Key("bottleneck_width", int, 64, ("bottleneck",)),
    Key("adapter_scale", float, 1.0),
    Key("split", str, "kfold:5:seed=111111"),
    Key("encoder", str, ""),
    Key("target", str, "streamflow"),
    # encoder shape for the scratch variant
    Key("model_dimension", int, 256, ("d_model",)),
    Key("number_of_heads", int, 4, ("n_heads",)),
    Key("encoder_layers", int, 4, ("e_layers",)),
    Key("feed_forward_dimension", int, 512, ("d_ff",)),
    Key("embedding_hidden", int, 64, ("embed_hidden",)),
]

HYBRID_KEYS = [
    Key("random_seed", int, 111111, ("seed",)),
    Key("number_of_runs", int, 16, ("nmul", "n_units")),
    Key("warm_up_period", int, 365, ("warmup",)),
    Key("use_routing", _bool, True, ("routing",)),
    Key("near_zero_threshold", float, 1e-5, ("near_zero",)),
    Key("parameter_network", str, "lstm", ("net",), ("lstm", "resconn")),
    Key("hidden_size", int, 64, ("hidden",)),
    Key("optimizer", str, "Adadelta", (), ("AdamW", "Adadelta")),
    Key("learning_rate", float, 1.0, ("lr",)),
    Key("weight_decay", float, 0.0),
    Key("epochs", int, 25),
    Key("batch_size", int, 64),
    Key("gradient_clipping", float, 5.0, ("clip",)),
    Key("dynamic_parameters", str, "beta,k0,beta_et"),
    Key("split", str, "kfold:5:seed=111111"),
    Key("encoder", str, ""),
    Key("target", str, "streamflow"),
    Key("precipitation", str, "prcp"),
    Key("temperature", str, "tmax,tmin"),
    Key("potential_evapotranspiration", str, "pet", ("pet",)),
]

SCHEMAS = {"pretrain": PRETRAIN_KEYS, "finetune": FINETUNE_KEYS, "hybrid": HYBRID_KEYS}


def _lookup(schema):
    table = {}
    for k in schema:
        for name in (k.name, *k.aliases):
            table[name] = k
            table[name.lower()] = k
    return table


def coerce(key, raw, where):
    try:
        value = key.kind(raw) if key.kind is not str else str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: key {key.name!r} expects {key.kind.__name__}, got {raw!r}") from None
    if key.choices and value not in key.choices:
        low = {c.lower(): c for c in key.choices}
        if str(value).lower() in low:
            value = low[str(value).lower()]
        else:
            raise ConfigError(f"{where}: key {key.name!r} must be one of {list(key.choices)}, got {raw!r}")
    return value


def parse_config(text, command, overrides=None, source="<config>"):
    """Resolve ``text`` (and ``overrides``) against the command's schema.

    Returns a dict with every canonical key of the schema.
    """
    if command not in SCHEMAS:
        raise ConfigError(f"no configuration schema for command {command!r}")
    schema = SCHEMAS[command]
    table = _lookup(schema)
    out = {k.name: k.default for k in schema}
    seen = {}
    items = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        items.append((k, v, f"{source}:{n}"))
    for k, v in (overrides or {}).items():
        items.append((k, v, "command line"))
    for k, v, where in items:
        key = table.get(k) or table.get(k.lower())
        if key is None:
            raise ConfigError(f"{where}: unknown config key {k!r} for '{command}'")
        if where != "command line" and key.name in seen:
            raise ConfigError(f"{where}: key {key.name!r} already set at {seen[key.name]}")
        seen[key.name] = where
        out[key.name] = coerce(key, v, where)
    return out


def format_config(cfg):
    """Canonical ``key = value`` text; re-parses to the same dict."""
    lines = []
    for k, v in cfg.items():
        lines.append(f"{k} = {repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def read_config(path, command, overrides=None):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), command, overrides, source=str(p))


def hash_inputs(paths):
    """sha256 over the bytes of every file under ``paths`` (sorted, names included)."""
    h = hashlib.sha256()
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(f for f in p.rglob("*") if f.is_file()))
        elif p.is_file():
            files.append(p)
    for f in files:
        h.update(str(f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


MANIFEST_NAME = "run_manifest.txt"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    input_hash: str
    started: str
    finished: str = ""
    outputs: tuple = ()

    def to_text(self):
        head = {"command": self.command, "seed": self.seed, "input_hash": self.input_hash,
                "started": self.started, "finished": self.finished, "outputs": list(self.outputs)}
        return "# run manifest\n" + json.dumps(head, sort_keys=True) + "\n[config]\n" + format_config(self.config)

    def write(self, run_dir):
        path = Path(run_dir) / MANIFEST_NAME
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, path):
        text = Path(path).read_text()
        lines = text.splitlines()
        head = json.loads(lines[1])
        cut = lines.index("[config]")
        cfg_text = "\n".join(lines[cut + 1:])
        return cls(head["command"], {}, head["seed"], head["input_hash"], head["started"],
                   head["finished"], tuple(head["outputs"])), cfg_text


def now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
