"""Scenario files: JSON documents describing one simulation.

Top-level keys: timing, ledger_mode, users, channels, payments,
adversaries, horizon, plus optional seed, conf_delay, sync_delay and
watch_phase. Unknown keys are rejected. Parse errors report line and
column.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigInvalid
from .harness import ScenarioConfig


class ScenarioParseError(ConfigInvalid):
    def __init__(self, path: str, message: str, line: int | None = None,
                 column: int | None = None) -> None:
        where = f"{path}:{line}:{column}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line
        self.column = column


def parse_scenario_text(text: str, *, path: str = "<string>",
                        allow_unsafe_watch: bool = False) -> ScenarioConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(path, exc.msg, exc.lineno, exc.colno) from exc
    try:
        return ScenarioConfig.from_dict(data, allow_unsafe_watch=allow_unsafe_watch)
    except ConfigInvalid as exc:
        raise ScenarioParseError(path, str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioParseError(path, f"malformed scenario: {exc}") from exc


def load_scenario(path: str | Path, *, allow_unsafe_watch: bool = False) -> ScenarioConfig:
    text = Path(path).read_text(encoding="utf-8")
    return parse_scenario_text(text, path=str(path), allow_unsafe_watch=allow_unsafe_watch)


def emit_scenario(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def save_scenario(cfg: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(emit_scenario(cfg), encoding="utf-8")
