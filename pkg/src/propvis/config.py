"""Run configuration: one flat ``key = value`` file with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


ABLATIONS = {
    "no-aligner": {"use_aligner": False},
    "no-trajectory": {"use_trajectory": False},
    "dynamic-local-pe": {"local_pe": "dynamic"},
    "no-reduced-supervision": {"reduced_supervision": False},
}


@dataclass(frozen=True)
class RunConfig:
    # model
    num_queries: int = 8
    num_local: int = 16
    width: int = 32
    heads: int = 4
    num_classes: int = 3
    image_size: int = 32
    patch: int = 4
    stem_hidden: int = 1024
    coarse_hidden: int = 1536
    encoder_layers: int = 2
    encoder_hidden: int = 128
    decoder_layers: int = 3
    decoder_hidden: int = 256
    aligner_layers: int = 3
    aligner_hidden: int = 128
    # ablations
    use_aligner: bool = True
    use_trajectory: bool = True
    local_pe: str = "static"
    reduced_supervision: bool = True
    # loss
    lambda_cls: float = 2.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    p_keep: float = 0.5
    # optimiser
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    iterations: int = 2000
    seed: int = 0
    # data
    clip_length: int = 4
    num_instances: int = 3
    num_clips: int = 32
    scenarios: str = "crossing"
    log_every: int = 1

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.width % 4:
            raise ConfigError("width must be a multiple of 4 for the box and grid encodings")
        if self.image_size % (2 * self.patch):
            raise ConfigError(f"image_size {self.image_size} must be divisible by 2*patch = {2 * self.patch}")
        if self.local_pe not in ("static", "dynamic"):
            raise ConfigError(f"local_pe must be 'static' or 'dynamic', got {self.local_pe!r}")
        if self.num_local > self.tokens_per_frame:
            raise ConfigError(f"num_local {self.num_local} exceeds the {self.tokens_per_frame} tokens per frame")
        if not 0.0 <= self.p_keep <= 1.0:
            raise ConfigError(f"p_keep must lie in [0, 1], got {self.p_keep}")
        if min(self.lambda_cls, self.lambda_ce, self.lambda_dice) < 0 or max(
            self.lambda_cls, self.lambda_ce, self.lambda_dice
        ) <= 0:
            raise ConfigError("loss weights must be non-negative with at least one positive")
        if self.num_instances > self.num_queries:
            raise ConfigError(f"{self.num_instances} instances cannot be tracked by {self.num_queries} queries")
        for s in self.scenario_list:
            if s not in ("easy", "crossing", "exit_reentry", "random"):
                raise ConfigError(f"unknown scenario {s!r}")

    @property
    def mask_size(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.mask_size**2 + (self.mask_size // 2) ** 2

    @property
    def scenario_list(self) -> list[str]:
        return [s.strip() for s in self.scenarios.split(",") if s.strip()]

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def with_ablations(self, names) -> RunConfig:
        changes: dict = {}
        for name in names:
            if name not in ABLATIONS:
                raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
            changes.update(ABLATIONS[name])
        return self.replace(**changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(kind, raw: str, where: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {raw!r}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` text; unknown keys and bad values name their line."""
    known = {f.name: _TYPES[f.type] for f in fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _coerce(known[key], raw, where)
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    return parse_config(path.read_text(), str(path))
