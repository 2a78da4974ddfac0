import logging
import sys


class ConsoleHandler(logging.StreamHandler):
    """
    `StreamHandler` logging subclass which routes warnings and errors to `stderr`, and everything
    else to `stdout`.
    """

    def handle(self, record):
        if record.levelno >= logging.WARNING:
            self.setStream(sys.stderr)
        else:
            self.setStream(sys.stdout)

        return super().handle(record)


logger = logging.getLogger(__package__)
handler = ConsoleHandler()
handler.setFormatter(logging.Formatter("[%(name)s] %(asctime)s:%(levelname)s: %(message)s"))
logger.addHandler(handler)
logger.propagate = False


def setup_logging(debug: bool = False) -> None:
    logger.setLevel(logging.DEBUG if debug else logging.INFO)
