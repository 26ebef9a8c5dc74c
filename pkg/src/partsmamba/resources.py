"""Locate shipped data tables (partition, edge list, occlusion sets)."""
from __future__ import annotations

from importlib import resources
from pathlib import Path


def resolve(name_or_path: str | Path) -> Path:
    """Return a filesystem path, falling back to the packaged ``data/`` directory."""
    path = Path(name_or_path)
    if path.exists():
        return path
    shipped = resources.files("partsmamba") / "data" / str(name_or_path)
    if shipped.is_file():
        return Path(str(shipped))
    raise FileNotFoundError(f"no such file or shipped table: {name_or_path}")


def read_table(name_or_path: str | Path) -> list[tuple[str, list[int]]]:
    """Parse ``<name>: <int> <int> ...`` lines; '#' starts a comment."""
    rows = []
    text = resolve(name_or_path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, ids = line.partition(":")
        if not sep or not name.strip():
            raise ValueError(f"{name_or_path}:{lineno}: expected '<name>: <ids>'")
        try:
            rows.append((name.strip(), [int(tok) for tok in ids.split()]))
        except ValueError:
            raise ValueError(f"{name_or_path}:{lineno}: non-integer joint id") from None
    return rows


def read_edges(name_or_path: str | Path) -> list[tuple[int, int]]:
    edges = []
    for lineno, raw in enumerate(resolve(name_or_path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        if len(line) != 2:
            raise ValueError(f"{name_or_path}:{lineno}: expected '<joint> <joint>'")
        edges.append((int(line[0]), int(line[1])))
    return edges
