"""Command line entrypoint for `carnot_coupling`."""

import sys

from carnot_coupling.cli import cli


def main(args: list[str] | None = None) -> None:
    """Click CLI entrypoint for `carnot_coupling`.

    Arguments:
        args: CLI arguments.
    """
    cli.main(args, "carnot_coupling")


if __name__ == "__main__":
    main(sys.argv[1:])
