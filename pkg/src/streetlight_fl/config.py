"""Flat ``section.key = value`` experiment configuration.

A config file is a list of assignments, one per line; ``#`` starts a comment
(at line start, or after whitespace). Keys not listed in ``SCHEMA`` are
rejected, as are values of the wrong type or out of range. Every seed in a
run is derived from ``run.seed``; nothing reads the clock.

Precedence: documented default < config file < command-line override.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .experiments import METHODS, RunSettings, default_fl_config
from .fl import FLConfig
from .fl.comm import DEFAULT_BYTES_PER_IMAGE
from .synth import GeneratorParams, NodeProfile, SplitConfig, default_fleet, load_node_types_csv


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass(frozen=True)
class Option:
    type: type
    default: Any
    doc: str
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _between(lo, hi, lo_open=False, hi_open=False):
    def ok(v):
        return (v > lo if lo_open else v >= lo) and (v < hi if hi_open else v <= hi)
    return ok


_FL = default_fl_config()
_INF = float("inf")

SCHEMA: dict[str, Option] = {
    "run.seed": Option(int, 0, "master seed; fleet, split, init, shuffle, sampling and clustering all derive from it",
                       _between(0, 2**63 - 1), ">= 0"),
    "run.method": Option(str, "fl", "training regime for `run`", lambda v: v in METHODS, "one of " + "|".join(METHODS)),
    "run.threads": Option(int, 1, "worker threads; results do not depend on it", _between(1, 256), "in [1, 256]"),
    "run.out": Option(str, "out", "output directory"),
    "fleet.n_type0": Option(int, 80, "ideal nodes (lamp head in view)", _between(0, 100_000), ">= 0"),
    "fleet.n_type1": Option(int, 53, "pole-only nodes", _between(0, 100_000), ">= 0"),
    "fleet.n_type2": Option(int, 7, "occluded edge-case nodes", _between(0, 100_000), ">= 0"),
    "fleet.samples_per_node": Option(int, 200, "hourly images per node", _between(2, 100_000), ">= 2"),
    "fleet.sunrise_min": Option(int, 300, "earliest sunrise minute (inclusive)", _between(0, 1439), "in [0, 1439]"),
    "fleet.sunrise_max": Option(int, 480, "latest sunrise minute (exclusive)", _between(1, 1440), "in [1, 1440]"),
    "fleet.sunset_min": Option(int, 960, "earliest sunset minute (inclusive)", _between(0, 1439), "in [0, 1439]"),
    "fleet.sunset_max": Option(int, 1260, "latest sunset minute (exclusive)", _between(1, 1440), "in [1, 1440]"),
    "fleet.csv": Option(str, "", "optional node_id,node_type CSV; replaces the n_type* counts"),
    "split.test_fraction": Option(float, 0.2, "per-node test share", _between(0.0, 1.0, True, True), "in (0, 1)"),
    "image.crop_side": Option(int, 0, "centre-crop side before resizing; 0 = shorter frame side",
                              _between(0, 100_000), ">= 0"),
    "image.green": Option(bool, False, "append mean/median green to the features (3074 inputs)"),
    "model.hidden": Option(int, 4, "hidden units", _between(1, 100_000), ">= 1"),
    "model.residual": Option(bool, False, "add the input projection to the hidden activations"),
    "train.learning_rate": Option(float, _FL.train.learning_rate, "SGD step size", _between(0.0, _INF, False, True),
                                  ">= 0 and finite"),
    "train.batch_size": Option(int, _FL.train.batch_size, "minibatch size", _between(1, 1_000_000), ">= 1"),
    "train.local_epochs": Option(int, _FL.train.local_epochs, "epochs per client per round", _between(0, 100_000),
                                 ">= 0"),
    "train.baseline_epochs": Option(int, RunSettings().baseline_epochs,
                                    "epochs for the personalised and centralised baselines", _between(0, 1_000_000),
                                    ">= 0"),
    "fl.rounds": Option(int, _FL.rounds, "communication rounds", _between(1, 1_000_000), ">= 1"),
    "fl.client_fraction": Option(float, _FL.client_fraction, "share of nodes sampled per round",
                                 _between(0.0, 1.0, True, False), "in (0, 1]"),
    "fl.cluster_count": Option(int, 2, "clusters for method=clustered", _between(1, 100_000), ">= 1"),
    "fl.warmup_rounds": Option(int, _FL.warmup_rounds, "FedAvg rounds before clustering", _between(0, 1_000_000),
                               ">= 0"),
    "fl.shared_layers": Option(str, "", "method=partial: comma list of 0/1 per layer; empty = all but the output"),
    "comm.bytes_per_image": Option(int, DEFAULT_BYTES_PER_IMAGE, "raw-upload size of one image",
                                   _between(1, 2**40), ">= 1"),
    "metrics.positive": Option(str, "on", "class treated as positive by F1", lambda v: v in ("on", "off"), "on|off"),
}


def _convert(key: str, opt: Option, raw: str):
    text = raw.strip()
    if opt.type is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(key, f"expected a boolean (true/false), got {raw!r}")
    if opt.type is int:
        try:
            return int(text, 10)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {raw!r}") from None
    if opt.type is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {raw!r}") from None
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    return text


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        for marker in (" #", "\t#"):
            if marker in stripped:
                stripped = stripped.split(marker, 1)[0].rstrip()
        if "=" not in stripped:
            raise ConfigError(None, f"{source}:{lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, f"unknown key ({source}:{lineno})")
        if key in values:
            raise ConfigError(key, f"set twice ({source}:{lineno})")
        values[key] = _convert(key, SCHEMA[key], raw)
    return values


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: o.default for k, o in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def profiles(self, gen: GeneratorParams | None = None) -> list[NodeProfile]:
        v = self.values
        if v["fleet.csv"]:
            return load_node_types_csv(v["fleet.csv"], v["fleet.samples_per_node"], self.seed, gen)
        return default_fleet(self.seed, v["fleet.n_type0"], v["fleet.n_type1"], v["fleet.n_type2"],
                             v["fleet.samples_per_node"], (v["fleet.sunrise_min"], v["fleet.sunrise_max"]),
                             (v["fleet.sunset_min"], v["fleet.sunset_max"]), gen)

    def split(self) -> SplitConfig:
        return SplitConfig(self.values["split.test_fraction"], self.seed)

    @property
    def crop_side(self) -> int | None:
        return self.values["image.crop_side"] or None

    def shared_mask(self) -> tuple[bool, ...] | None:
        text = self.values["fl.shared_layers"]
        if not text:
            return None
        return tuple(part.strip() == "1" for part in text.split(","))

    def settings(self) -> RunSettings:
        v, seed = self.values, self.seed
        base = default_fl_config()
        train = replace(base.train, learning_rate=v["train.learning_rate"], batch_size=v["train.batch_size"],
                        local_epochs=v["train.local_epochs"], init_seed=seed, shuffle_seed=seed)
        fl = FLConfig(rounds=v["fl.rounds"], client_fraction=v["fl.client_fraction"], train=train,
                      shared_layer_mask=self.shared_mask(), cluster_count=v["fl.cluster_count"],
                      sampling_seed=seed, warmup_rounds=v["fl.warmup_rounds"], cluster_seed=seed)
        return RunSettings(hidden=v["model.hidden"], residual=v["model.residual"], fl=fl,
                           bytes_per_image=v["comm.bytes_per_image"], threads=v["run.threads"],
                           baseline_epochs=v["train.baseline_epochs"], positive_on=v["metrics.positive"] == "on")

    def echo(self) -> dict[str, Any]:
        """Values that shape results (output location and thread count excluded)."""
        return {k: v for k, v in sorted(self.values.items()) if k not in ("run.out", "run.threads")}

    def render(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _validate(values: dict[str, Any]) -> None:
    for key, v in values.items():
        opt = SCHEMA[key]
        if opt.type is float and v != v:
            raise ConfigError(key, "NaN is not allowed")
        if opt.check is not None and not opt.check(v):
            raise ConfigError(key, f"value {v!r} out of range ({opt.rule})")
    if values["fleet.sunrise_min"] >= values["fleet.sunrise_max"]:
        raise ConfigError("fleet.sunrise_max", "must exceed fleet.sunrise_min")
    if values["fleet.sunset_min"] >= values["fleet.sunset_max"]:
        raise ConfigError("fleet.sunset_max", "must exceed fleet.sunset_min")
    if values["fleet.sunrise_max"] > values["fleet.sunset_min"]:
        raise ConfigError("fleet.sunset_min", "sunsets must not precede sunrises")
    if not values["fleet.csv"] and values["fleet.n_type0"] + values["fleet.n_type1"] + values["fleet.n_type2"] == 0:
        raise ConfigError("fleet.n_type0", "fleet has no nodes")
    mask = values["fl.shared_layers"]
    if mask:
        parts = [p.strip() for p in mask.split(",")]
        if any(p not in ("0", "1") for p in parts):
            raise ConfigError("fl.shared_layers", f"expected a comma list of 0/1, got {mask!r}")
        n_layers = 3 if values["model.residual"] else 2
        if len(parts) != n_layers:
            raise ConfigError("fl.shared_layers", f"{len(parts)} entries for a {n_layers}-layer model")


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path`` (if any), then string ``overrides``."""
    values = {k: o.default for k, o in SCHEMA.items()}
    if path is not None:
        values.update(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for key, raw in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key (command line)")
        values[key] = _convert(key, SCHEMA[key], str(raw))
    _validate(values)
    return ExperimentConfig(values)


def describe() -> str:
    """The documented schema: key, type, default and meaning."""
    rows = []
    for key, opt in SCHEMA.items():
        rule = f" [{opt.rule}]" if opt.rule else ""
        rows.append(f"{key} = {_format(opt.default)}    # {opt.type.__name__}{rule}: {opt.doc}")
    return "\n".join(rows) + "\n"
