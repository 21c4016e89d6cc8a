import sys
import logging

import structlog


def configure_logging(level: str = 'info') -> None:
    '''
    Sets up `structlog` to write key/value lines to stderr;
    stdout stays reserved for machine-readable results
    '''

    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        numeric = logging.INFO

    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt='iso'),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric),
        # resolved per logger so a swapped sys.stderr is honoured
        logger_factory=lambda *args: structlog.PrintLogger(file=sys.stderr),
        cache_logger_on_first_use=False,
    )
