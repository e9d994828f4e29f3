"""Federation strategies and the shared/local split each one implies."""
from __future__ import annotations

import enum
import fnmatch

from .errors import ConfigError


class StrategyId(str, enum.Enum):
    FEDFTN = "fedftn"
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDBN = "fedbn"
    FEDSP = "fedsp"
    LOCAL_ONLY = "local_only"

    @classmethod
    def parse(cls, value) -> "StrategyId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown strategy {value!r}; expected one of {names}") from None

    def __str__(self) -> str:
        return self.value


def is_shared(name: str, strategy) -> bool:
    """Whether parameter ``name`` is exchanged with the server under ``strategy``."""
    strategy = StrategyId.parse(strategy)
    if strategy is StrategyId.FEDFTN:
        return name.startswith(("denoiser.", "norm_stats."))
    if strategy in (StrategyId.FEDAVG, StrategyId.FEDPROX):
        return True
    if strategy is StrategyId.FEDBN:
        return not (fnmatch.fnmatchcase(name, "*.norm.*") or name.startswith("norm_stats."))
    if strategy is StrategyId.FEDSP:
        return name.startswith(("denoiser.enc", "norm_stats.enc"))
    return False
