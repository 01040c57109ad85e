# config.py - Configuration settings and the run-config file format
"""
Run configurations are sectioned ``key = value`` files::

    [run]
    seed = 7

    [data]
    generator = poisson_gauss
    n_samples = 288
    points = 1024
    out = data/poisson_gauss.gds

    [model]
    profile = desk
    scales = 0.6666666666666666, 1.0, 1.3333333333333333

Lines starting with ``#`` or ``;`` are comments.  Tuples are comma
separated, booleans are ``true``/``false``, an empty value leaves an
optional seed unset (it is then derived from ``[run] seed``).
"""
import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields
from typing import Optional

from models.errors import ConfigError
from models.gaot_net import GaotConfig

VERSION = "0.1.0"


class Config:
    # Base directory
    BASE_DIR = os.path.dirname(os.path.abspath(__file__))

    # Run directories and the neighborhood cache
    OUTPUT_DIR = os.path.join(BASE_DIR, 'outputs')
    CACHE_DIR = os.path.join(BASE_DIR, '.gaot_cache')

    @classmethod
    def cache_dir(cls):
        return os.environ.get('GAOT_CACHE_DIR', cls.CACHE_DIR)

    @classmethod
    def output_dir(cls):
        return os.environ.get('GAOT_OUTPUT_DIR', cls.OUTPUT_DIR)


def derive_seed(seed: int, label: str) -> int:
    """Subsystem seed from the top-level seed and a purpose label"""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

@dataclass
class RunSection:
    seed: int = 0
    name: str = "gaot"


@dataclass
class DataSection:
    generator: str = "poisson_gauss"
    n_samples: int = 64
    points: int = 1024
    seed: Optional[int] = None
    out: str = "data/dataset.gds"
    n_val: int = 0
    n_test: int = 8
    n_jobs: int = 1
    sines_k: int = 8
    sines_r: float = -0.5
    snapshots: int = 8


@dataclass
class TrainSection:
    epochs: int = 200
    batch: int = 8
    seed: Optional[int] = None
    checkpoint_dir: str = ""
    checkpoint_every: int = 0
    log_every: int = 10
    lr_start: float = 8e-4
    lr_peak: float = 1e-3
    lr_cos_end: float = 1e-4
    lr_final: float = 5e-5
    warmup_frac: float = 0.10
    cosine_frac: float = 0.85
    weight_decay: float = 1e-5


@dataclass
class EvalSection:
    checkpoint: str = ""
    split: str = "test"
    mode: str = "DR"
    ar_dt: float = 0.0
    t0: float = 0.0
    datasets: tuple = ()
    plot: bool = True


@dataclass
class BenchSection:
    mode: str = "infer"
    sizes: tuple = (512, 1024, 2048)
    warmup: int = 10
    repeats: int = 100
    batch: int = 1


@dataclass
class AblateSection:
    epochs: int = 50
    seeds: tuple = (0,)
    multiscale: tuple = (2.0 / 3.0, 1.0, 4.0 / 3.0)
    embeddings: tuple = ("statistical", "pointnet", "none")
    steppings: tuple = ("output", "residual", "derivative")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model_profile: str = "desk"
    model: GaotConfig = field(default_factory=GaotConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def seed_for(self, section: str) -> int:
        explicit = getattr(getattr(self, section), "seed", None)
        return explicit if explicit is not None else derive_seed(self.run.seed, section)


SECTIONS = ("run", "data", "model", "train", "eval", "bench", "ablate")

# tuple fields whose default is empty still need an element type
_TUPLE_TYPES = {("eval", "datasets"): str}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _convert(text: str, ftype, default, where: str, elem=None):
    text = text.strip()
    try:
        if ftype in (Optional[int],):
            return None if text == "" else int(text)
        if ftype is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is str:
            return text
        if ftype is tuple:
            if text == "":
                return ()
            elem = elem or (type(default[0]) if default else str)
            return tuple(elem(part.strip()) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse '{text}'") from None
    raise ConfigError(f"{where}: unsupported field type {ftype}")


def _fill(cls, section: str, items: dict, base=None):
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key '{key}'")
        f = known[key]
        default = getattr(base, key) if base is not None else (
            f.default if f.default is not dataclasses.MISSING else None)
        values[key] = _convert(raw, f.type, default, f"[{section}] {key}", _TUPLE_TYPES.get((section, key)))
    return values


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, strict=True,
                                       empty_lines_in_values=False, default_section="__defaults__")
    parser.optionxform = str
    return parser


def parse_config(text: str) -> RunConfig:
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"[{exc.section}] duplicate key '{exc.option}' (line {exc.lineno})") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}] (line {exc.lineno})") from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: key outside of any section") from None
    except configparser.ParsingError as exc:
        lines = ", ".join(str(lineno) for lineno, _ in exc.errors)
        raise ConfigError(f"malformed line(s) {lines}") from None

    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    def items(section):
        return dict(parser.items(section)) if parser.has_section(section) else {}

    rc = RunConfig()
    for section, cls in (("run", RunSection), ("data", DataSection), ("train", TrainSection),
                         ("eval", EvalSection), ("bench", BenchSection), ("ablate", AblateSection)):
        setattr(rc, section, cls(**_fill(cls, section, items(section))))

    model_items = items("model")
    profile = model_items.pop("profile", "desk").strip()
    base = GaotConfig.profile(profile)
    overrides = _fill(GaotConfig, "model", model_items, base)
    rc.model_profile = profile
    rc.model = GaotConfig.profile(profile, **overrides)
    return rc


def override(rc: RunConfig, section: str, key: str, text: str) -> RunConfig:
    """Apply one ``section.key = text`` assignment, converted like a file value"""
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    if section == "model":
        if key == "profile":
            rc.model = GaotConfig.profile(text.strip())
            rc.model_profile = text.strip()
            return rc
        value = _fill(GaotConfig, "model", {key: text}, rc.model)[key]
        rc.model = dataclasses.replace(rc.model, **{key: value})
        return rc
    obj = getattr(rc, section)
    value = _fill(type(obj), section, {key: text}, obj)[key]
    setattr(rc, section, dataclasses.replace(obj, **{key: value}))
    return rc


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# Canonical emission
# ---------------------------------------------------------------------------

def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _emit_section(name: str, obj, extra: Optional[dict] = None) -> str:
    lines = [f"[{name}]"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {_format(value)}")
    for f in fields(obj):
        lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def emit_model(model: GaotConfig, profile: str = "desk") -> str:
    return _emit_section("model", model, {"profile": profile})


def parse_model(text: str) -> tuple:
    """(GaotConfig, profile) from a text holding a [model] section"""
    rc = parse_config(text)
    return rc.model, rc.model_profile


def emit_config(rc: RunConfig) -> str:
    blocks = [
        _emit_section("run", rc.run),
        _emit_section("data", rc.data),
        emit_model(rc.model, rc.model_profile),
        _emit_section("train", rc.train),
        _emit_section("eval", rc.eval),
        _emit_section("bench", rc.bench),
        _emit_section("ablate", rc.ablate),
    ]
    return "\n".join(blocks)
