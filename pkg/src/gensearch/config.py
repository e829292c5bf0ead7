"""Run configuration: flat ``section.key = value`` text.

Blank lines and ``#`` comments are ignored. Sections are ``corpus``,
``model``, ``pretrain``, ``spo``, ``eval`` and ``paths``; ``seed`` is
top-level. Values are parsed according to the field's default type; tuples
are comma separated and booleans accept true/false/1/0.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

from .models import ModelConfig
from .pretrain import PretrainConfig
from .sim import CorpusConfig
from .spo import SpoConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    K: int = 50
    slices: tuple[str, ...] = ("all", "head", "tail", "new_user", "existing_user")
    beam_size: int = 32
    top_n: int = 16
    rk_top_m: int = 5


@dataclass
class PathsConfig:
    workdir: str = "runs"
    corpus: str = "corpus.txt"
    checkpoint: str = "model.ckpt"
    trie: str = "trie.tsv"
    pretrain_metrics: str = "pretrain_metrics.csv"
    spo_checkpoint: str = "model_spo.ckpt"
    spo_rounds: str = "spo_rounds.csv"
    eval_metrics: str = "eval_metrics.csv"
    plot_data: str = "plot_data.csv"

    def resolve(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.workdir) / p


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    spo: SpoConfig = field(default_factory=SpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = seed
        self.sync()
        return self

    def sync(self) -> None:
        """Propagate the top-level seed and corpus sizes into the sections."""
        self.corpus.seed = self.seed
        self.pretrain.seed = self.seed
        self.spo.seed = self.seed
        self.model.seed = self.seed
        self.model.query_vocab = self.corpus.query_vocab_size
        self.model.feature_vocab = self.corpus.feature_vocab_size
        self.model.n_users = self.corpus.n_users

    def validate(self) -> None:
        self.corpus.validate()
        self.model.validate()
        self.pretrain.validate()
        self.spo.validate()
        if self.eval.K < 1:
            raise ConfigError("eval.K must be >= 1")
        if not self.eval.beam_size >= self.eval.top_n >= 1:
            raise ConfigError("eval needs beam_size >= top_n >= 1")


SECTIONS = ("corpus", "model", "pretrain", "spo", "eval", "paths")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        proto = default[0] if default else ""
        return tuple(_parse_value(t, proto) for t in items)
    return text


def format_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines on top of ``base`` (defaults if None)."""
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    if base is None:
        cfg.sync()
    explicit = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            try:
                cfg.seed = int(value)
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: field 'seed': expected an integer, got {value!r}") from None
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        obj = getattr(cfg, section)
        if name not in {f.name for f in fields(obj)}:
            raise ConfigError(f"{source}:{lineno}: unknown field {key!r}")
        try:
            setattr(obj, name, _parse_value(value, getattr(obj, name)))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: field {key!r}: {exc}") from None
        explicit.add(key)
    seeds = {k: getattr(getattr(cfg, k.split(".")[0]), "seed") for k in explicit if k.endswith(".seed")}
    cfg.sync()
    for key, val in seeds.items():
        setattr(getattr(cfg, key.split(".")[0]), "seed", val)
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:  # section validators raise plain ValueError
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.sync()
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found")
    return parse_config(p.read_text(), str(p))
