from typing import Tuple, Iterable
from pathlib import Path
from argparse import ArgumentTypeError


def check_paths(paths_exts: Iterable[Tuple[Path, str]]):
    """Check file and correct extension or raise :class:`FileNotFoundError`"""

    for path, extension in paths_exts:
        if not path.is_file() or path.suffix != f".{extension}":
            raise FileNotFoundError(
                f"{path.absolute()} is not a .{extension} file or doesn't exist"
            )


def check_seed(value: str) -> int:
    """argparse type for an unsigned 64-bit seed"""

    try:
        seed = int(value, 0)
    except ValueError:
        raise ArgumentTypeError(f"{value} is not an integer seed") from None

    if not 0 <= seed < 2 ** 64:
        raise ArgumentTypeError(f"{value} is outside the unsigned 64-bit range")

    return seed
