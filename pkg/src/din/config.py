"""Training configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


@dataclass
class TrainConfig:
    # loss weighting and NLR
    alpha: float = 0.5
    gamma: float = 1.0
    tau: float = 0.99
    rfl_floor: float = -4.0
    rfl_reverse: bool = True  # False drops the reverse term (plain focal loss)
    # answer diffuser
    T: int = 50
    beta_start: float | None = None  # None: scaled to T
    beta_end: float | None = None
    init_mode: str = "terminal"
    dif_loss: str = "mse"
    # optimisation
    lr: float = 1e-3
    grad_clip: float | None = 1.0  # max global gradient norm; None disables
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    # module toggles
    use_ad: bool = True
    use_rfl: bool = True
    use_aa: bool = True
    # model shape
    d_model: int = 64
    depth: int = 2
    heads: int = 1
    patch_size: int = 4
    denoiser_hidden: int = 128
    classifier_source: str = "cond"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if self.init_mode not in ("terminal", "gaussian"):
            raise ValueError(f"init_mode must be terminal or gaussian, got {self.init_mode!r}")
        if self.dif_loss not in ("mse", "kl"):
            raise ValueError(f"dif_loss must be mse or kl, got {self.dif_loss!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.T < 1:
            raise ValueError("batch_size and T must be >= 1, epochs >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_CASTS = {"bool": parse_bool, "int": int, "float": float, "str": str}


def _optional(cast):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else cast(text)

    return parse


def field_types() -> dict[str, callable]:
    out = {}
    for f in fields(TrainConfig):
        name, _, rest = f.type.partition(" | ")
        out[f.name] = _optional(_CASTS[name]) if rest == "None" else _CASTS[name]
    return out


def parse_overrides(pairs: dict[str, str]) -> dict:
    types = field_types()
    out = {}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        try:
            out[key] = types[key](raw.strip())
        except ValueError as e:
            raise ValueError(f"bad value for {key}: {e}") from None
    return out


def read_config_file(path) -> dict:
    pairs = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            pairs[k.strip()] = v
    return parse_overrides(pairs)


def load_config(path=None, **overrides) -> TrainConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides)
    return TrainConfig(**values)
