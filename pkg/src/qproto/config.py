"""Run configuration: flat key/value file with sections plus overrides.

The file format is INI-style (stdlib configparser grammar): ``[section]``
headers and ``key = value`` lines. Every key has a documented default
below; unknown sections or keys are rejected. ``canonical_text`` renders
the effective configuration deterministically, and its sha256 is the
config digest stamped into checkpoints and reports.
"""

from __future__ import annotations

import configparser
import hashlib
import io

from .data import SyntheticSpec
from .episodes import EpisodeConfig, TrainConfig
from .errors import ConfigError
from .model import ModelConfig
from .protogen import PGConfig

# section -> key -> (default, help)
SCHEMA = {
    "data": {
        "root": ("data/synthetic", "dataset directory (QPROTO_DATA_ROOT overrides)"),
        "classes_train": (12, "classes in the train split"),
        "classes_val": (6, "classes in the val split"),
        "classes_test": (6, "classes in the test split"),
        "samples_per_class": (40, "samples rendered per class"),
        "image_size": (32, "square image side, divisible by 4"),
        "channels": (3, "image channels"),
        "noise_level": (0.30, "background noise amplitude in [0,1]"),
        "jitter": (1.0, "position/scale jitter fraction in [0,1]"),
        "scale_min": (0.30, "smallest motif size as image fraction"),
        "scale_max": (0.80, "largest motif size as image fraction"),
        "seed": (7, "dataset generation seed"),
    },
    "model": {
        "width": (32, "embedding channel width"),
        "reduction": (0, "channel-attention reduction ratio, 0 = auto"),
        "scales": ((4, 3, 2, 1), "added pooling grids, strictly descending"),
        "classifier_dims": ((), "three hidden widths, empty = auto"),
    },
    "episode": {
        "n_way": (5, "classes per episode"),
        "k_shot": (1, "support samples per class"),
        "m_query": (5, "query samples per class (desk-scale default)"),
    },
    "protogen": {
        "xi": (5, "generation coefficient: neighbours aggregated per cell"),
        "similarity": ("cosine", "cosine or gaussian"),
        "clamp_xi": (True, "clamp xi to the support pool size when larger"),
    },
    "train": {
        "episodes": (5000, "training episodes"),
        "lr": (1e-3, "initial Adam learning rate"),
        "halve_every": (2000, "halve lr every this many episodes, 0 = off"),
        "beta1": (0.9, "Adam beta1"),
        "beta2": (0.999, "Adam beta2"),
        "adam_eps": (1e-8, "Adam epsilon"),
        "seed": (0, "training seed (init + episode sampling)"),
        "log_every": (1, "log cadence in episodes"),
        "checkpoint_every": (1000, "checkpoint cadence in episodes, 0 = final only"),
        "attention": (True, "attention gates on"),
        "hierarchy": (True, "multi-scale representation on"),
        "protogen": (True, "query-specific prototypes on"),
        "out_dir": ("runs/train", "training output directory"),
    },
    "eval": {
        "episodes": (600, "episodes per repetition"),
        "reps": (5, "repetitions"),
        "seed": (1234, "evaluation seed"),
        "threads": (1, "parallel evaluation threads"),
        "split": ("test", "dataset split to evaluate"),
    },
}


_DIGEST_EXCLUDED_SECTIONS = {"eval"}
_DIGEST_EXCLUDED = {
    ("data", "root"),
    ("train", "out_dir"),
    ("train", "log_every"),
    ("train", "checkpoint_every"),
}


def _parse_value(section, key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if raw in ("", "auto", "none"):
                return ()
            return tuple(int(p) for p in raw.replace(",", " ").split())
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from e


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


class RunConfig:
    """Typed view over the schema with file + override layering."""

    def __init__(self):
        self.values = {sec: {k: d for k, (d, _) in keys.items()}
                       for sec, keys in SCHEMA.items()}

    def set(self, section, key, raw):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        default = SCHEMA[section][key][0]
        value = raw if not isinstance(raw, str) else _parse_value(
            section, key, raw, default)
        self.values[section][key] = value

    def get(self, section, key):
        return self.values[section][key]

    @classmethod
    def from_sources(cls, path=None, overrides=()):
        """Layer defaults <- config file <- ``section.key=value`` overrides."""
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path) as f:
                    parser.read_file(f)
            except OSError as e:
                raise ConfigError(f"cannot read config file {path}: {e}") from e
            except configparser.Error as e:
                raise ConfigError(f"malformed config file {path}: {e}") from e
            for section in parser.sections():
                if section not in SCHEMA:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, raw in parser.items(section):
                    cfg.set(section, key, raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not section.key=value")
            target, _, raw = item.partition("=")
            if "." not in target:
                raise ConfigError(f"override {item!r} is not section.key=value")
            section, _, key = target.partition(".")
            cfg.set(section.strip(), key.strip(), raw.strip())
        return cfg

    def canonical_text(self):
        out = io.StringIO()
        for sec in SCHEMA:
            out.write(f"[{sec}]\n")
            for key in SCHEMA[sec]:
                out.write(f"{key} = {_format_value(self.values[sec][key])}\n")
            out.write("\n")
        return out.getvalue()

    def computation_text(self):
        """Canonical text of the keys that determine the computation.

        Bookkeeping (paths, cadences) and evaluation-time knobs are
        excluded, so a checkpoint stays compatible with the run that can
        actually consume it.
        """
        out = io.StringIO()
        for sec in SCHEMA:
            keys = [k for k in SCHEMA[sec] if (sec, k) not in _DIGEST_EXCLUDED
                    and sec not in _DIGEST_EXCLUDED_SECTIONS]
            if not keys:
                continue
            out.write(f"[{sec}]\n")
            for key in keys:
                out.write(f"{key} = {_format_value(self.values[sec][key])}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self):
        return hashlib.sha256(self.computation_text().encode()).hexdigest()

    # typed sub-configurations ------------------------------------------------

    def synthetic_spec(self):
        d = self.values["data"]
        return SyntheticSpec(
            classes_train=d["classes_train"], classes_val=d["classes_val"],
            classes_test=d["classes_test"], samples_per_class=d["samples_per_class"],
            image_size=d["image_size"], channels=d["channels"],
            noise_level=d["noise_level"], jitter=d["jitter"],
            scale_min=d["scale_min"], scale_max=d["scale_max"], seed=d["seed"])

    def model_config(self):
        d, m, t = self.values["data"], self.values["model"], self.values["train"]
        return ModelConfig(
            image_size=d["image_size"], channels=d["channels"], width=m["width"],
            reduction=m["reduction"], scales=m["scales"],
            classifier_dims=m["classifier_dims"],
            attention=t["attention"], hierarchy=t["hierarchy"])

    def pg_config(self):
        p = self.values["protogen"]
        return PGConfig(xi=p["xi"], similarity=p["similarity"], clamp_xi=p["clamp_xi"])

    def episode_config(self):
        e = self.values["episode"]
        return EpisodeConfig(n_way=e["n_way"], k_shot=e["k_shot"], m_query=e["m_query"])

    def train_config(self):
        t = self.values["train"]
        return TrainConfig(
            episodes=t["episodes"], lr=t["lr"], halve_every=t["halve_every"],
            beta1=t["beta1"], beta2=t["beta2"], adam_eps=t["adam_eps"],
            seed=t["seed"], log_every=t["log_every"],
            checkpoint_every=t["checkpoint_every"], protogen=t["protogen"],
            pg=self.pg_config(), episode=self.episode_config())

    def describe(self):
        """Default + help for every key (CLI --help-config)."""
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for key, (default, help_text) in keys.items():
                lines.append(f"  {key} = {_format_value(default)}  # {help_text}")
        return "\n".join(lines)
