"""Plain-text ``key = value`` run configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .basecodec import LAMBDAS
from .core import InvalidParameter


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


@dataclass
class RunConfig:
    seed: int = 0
    corpus: str = "synthetic:5"
    val_corpus: str = "synthetic:2"
    grid: int = 64
    region: int = 32
    lambdas: list = field(default_factory=lambda: [LAMBDAS[q] for q in (1, 2, 3, 4, 5)])
    epochs_first: int = 30
    epochs_next: int = 10
    mode: str = "sequential"
    lr: float = 3e-3
    rq_lr: float = 1e-3
    batch: int = 4
    max_epochs: int = 60
    models: str = "base_models.tnps"
    rqulpe: str = "rqulpe_models.tnps"
    log: str = "train_log.csv"
    peak: float = 0.0
    metrics_d2: bool = True
    threads: int = 1

    _PARSERS = {"lambdas": _floats, "metrics_d2": lambda v: v.strip().lower() in ("1", "true", "yes", "on")}

    def lambda_map(self) -> dict:
        if len(self.lambdas) != 5:
            raise InvalidParameter("lambdas must list five values for qp 1..5")
        return {q: float(v) for q, v in zip((1, 2, 3, 4, 5), self.lambdas)}

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls) if not f.name.startswith("_")}
        values = {}
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidParameter(f"config line {no}: expected key = value, got {raw!r}")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in known:
                raise InvalidParameter(f"config line {no}: unknown key {key!r}")
            conv = cls._PARSERS.get(key)
            if conv is None:
                ftype = type(getattr(cls(), key))
                conv = ftype
            try:
                values[key] = conv(val)
            except ValueError as exc:
                raise InvalidParameter(f"config line {no}: bad value for {key}: {exc}") from exc
        cfg = cls(**values)
        if cfg.mode not in ("sequential", "independent"):
            raise InvalidParameter(f"mode must be sequential or independent, got {cfg.mode!r}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(repr(x) for x in v) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"
