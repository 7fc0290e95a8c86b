"""Model hyperparameters and their flat ``key=value`` file form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .tensor import ConfigError


@dataclass(frozen=True)
class SsmConfig:
    state: int
    conv_width: int
    expansion: int


@dataclass(frozen=True)
class Ablation:
    use_cmb: bool = True
    use_mcrm: bool = True
    ddbm_as_channel_attention: bool = False
    mcrm_recursive: bool = True


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 60
    num_samgs: int = 1
    sambs_per_samg: int = 9
    heads: int = 6
    window: tuple[int, int] = (8, 32)
    sgfn_expansion: int = 2
    cmb_ssm: SsmConfig = SsmConfig(state=32, conv_width=3, expansion=4)
    mcrm_ssm: SsmConfig = SsmConfig(state=64, conv_width=4, expansion=2)
    scale: int = 4
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        self.validate()

    def validate(self) -> None:
        extents = {
            "channels": self.channels,
            "num_samgs": self.num_samgs,
            "sambs_per_samg": self.sambs_per_samg,
            "heads": self.heads,
            "window.h": self.window[0],
            "window.w": self.window[1],
            "sgfn_expansion": self.sgfn_expansion,
        }
        for prefix, ssm in (("cmb_ssm", self.cmb_ssm), ("mcrm_ssm", self.mcrm_ssm)):
            for f in dataclasses.fields(ssm):
                extents[f"{prefix}.{f.name}"] = getattr(ssm, f.name)
        for key, value in extents.items():
            if int(value) < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}")
        if len(self.window) != 2:
            raise ConfigError(f"window must have two extents, got {self.window}")
        if self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if (self.sgfn_expansion * self.channels) % 2:
            raise ConfigError("sgfn expanded width must be even (split into value and gate halves)")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ flat form
    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    out[f"{f.name}.{sub.name}"] = _fmt(getattr(value, sub.name))
            elif f.name == "window":
                out["window"] = f"{value[0]}x{value[1]}"
            else:
                out[f.name] = _fmt(value)
        return out

    @classmethod
    def flat_keys(cls) -> list[str]:
        return list(_DEFAULT_FLAT)

    @classmethod
    def from_flat(cls, items: dict[str, str], base: ModelConfig | None = None) -> ModelConfig:
        base = base or cls()
        flat = base.to_flat()
        for key, value in items.items():
            if key not in flat:
                raise ConfigError(f"unknown model config key {key!r}")
            flat[key] = str(value).strip()
        kwargs: dict = {}
        nested: dict[str, dict] = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in flat.items():
            try:
                if "." in key:
                    group, sub = key.split(".", 1)
                    sub_cls = type(getattr(base, group))
                    sub_type = {f.name: f.type for f in dataclasses.fields(sub_cls)}[sub]
                    nested.setdefault(group, {})[sub] = _parse(raw, sub_type)
                elif key == "window":
                    h, w = raw.lower().split("x")
                    kwargs["window"] = (int(h), int(w))
                else:
                    kwargs[key] = _parse(raw, types[key].type)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"bad value {raw!r} for {key}: {exc}") from exc
        for group, values in nested.items():
            kwargs[group] = type(getattr(base, group))(**values)
        return cls(**kwargs)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(raw: str, typ) -> object:
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def parse_kv_lines(text: str, source: str = "<text>") -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path) -> ModelConfig:
    path = Path(path)
    return ModelConfig.from_flat(parse_kv_lines(path.read_text(), str(path)))


def write_config(path, cfg: ModelConfig) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in cfg.to_flat().items()))


_DEFAULT_FLAT = ModelConfig().to_flat()
