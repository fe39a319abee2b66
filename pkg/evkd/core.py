import logging
import os

logger = logging.getLogger(__name__)

THREADS_ENV = "EVKD_THREADS"


def get_threads(default=1):
    """Worker cap from EVKD_THREADS, falling back to `default`."""
    value = os.environ.get(THREADS_ENV)
    if value is None or value.strip() == "":
        return default
    try:
        threads = int(value)
    except ValueError:
        logger.warning(f"Ignoring non-integer {THREADS_ENV}={value!r}")
        return default
    if threads < 1:
        logger.warning(f"Ignoring non-positive {THREADS_ENV}={value!r}")
        return default
    return threads


def read_config(path):
    """Read a `key = value` preset file into a dict of strings.

    Keys are normalised to argparse destinations (dashes become underscores,
    leading dashes dropped). Lines starting with `#` and blank lines are skipped.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    config = {}
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip().lstrip("-").replace("-", "_")
            value = value.strip().strip("\"'")
            config[key] = value
    return config


def fmt4(value):
    """Fixed four-decimal rendering used for every numeric CLI output."""
    return f"{float(value):.4f}"
