import logging, sys

__all__ = []

_LOGGER_NAME_ = "mfbsde"

def _init_logger():
    logger = logging.getLogger(_LOGGER_NAME_)
    logger.setLevel(logging.INFO)

    if logger.handlers:
        return

    handler = logging.StreamHandler(sys.stdout)
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(threadName)s - %(levelname)s - %(message)s'
    )

    handler.setFormatter(formatter)
    logger.addHandler(handler)

def set_verbosity(verbose: bool = False, quiet: bool = False):
    """Adjust the package logger level from the CLI flags"""

    logger = logging.getLogger(_LOGGER_NAME_)
    if verbose:
        logger.setLevel(logging.DEBUG)
    elif quiet:
        logger.setLevel(logging.WARNING)
    else:
        logger.setLevel(logging.INFO)

_init_logger()
