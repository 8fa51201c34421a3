"""UTF-8 ``key=value`` files used for configs, metadata and reports."""
from __future__ import annotations

from pathlib import Path

from .errors import FormatError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path: Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def format_kv(items: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def write_kv(path: Path, items: dict) -> None:
    Path(path).write_text(format_kv(items), encoding="utf-8")
