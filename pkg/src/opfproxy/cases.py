"""Bundled test networks."""

from __future__ import annotations

from importlib import resources

from .grid import Network, parse_case


def list_cases() -> list[str]:
    """Names of the bundled cases, loadable via load_case."""
    root = resources.files("opfproxy.data")
    return sorted(p.name[:-2] for p in root.iterdir() if p.name.endswith(".m"))


def load_case(name: str) -> Network:
    """Load a bundled case ('case9', 'case118s') or a file path."""
    root = resources.files("opfproxy.data")
    candidate = root / f"{name}.m"
    if candidate.is_file():
        return parse_case(candidate.read_text(), name)
    try:
        with open(name) as fh:
            return parse_case(fh.read())
    except OSError:
        raise FileNotFoundError(
            f"no bundled case or readable file named {name!r}; "
            f"bundled: {', '.join(list_cases())}") from None
