"""Instance-wise prompt tuning laboratory."""

__version__ = "0.1.0"


def main():
    """Entry point for ``python -m ipt_lab`` and the ``ipt`` alias."""
    from .cli import main as cli_main
    raise SystemExit(cli_main())


__all__ = ["main", "__version__"]
