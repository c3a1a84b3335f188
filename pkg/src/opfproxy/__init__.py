"""Neural-network proxies for AC optimal power flow, trained through an
embedded fast-decoupled solver with implicit-sensitivity gradients.

Submodules are imported lazily so the command line can pin threading
environment variables before numpy first loads.
"""

__version__ = "0.1.0"

__all__ = ["Network", "parse_case", "load_case", "list_cases", "__version__"]

_EXPORTS = {
    "Network": ("opfproxy.grid", "Network"),
    "parse_case": ("opfproxy.grid", "parse_case"),
    "load_case": ("opfproxy.cases", "load_case"),
    "list_cases": ("opfproxy.cases", "list_cases"),
}


def __getattr__(name):
    try:
        module, attr = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") \
            from None
    from importlib import import_module
    return getattr(import_module(module), attr)


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
