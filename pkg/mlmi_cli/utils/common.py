import math
from contextlib import contextmanager

import typer

from mlmi_cli.exceptions import MlmiError
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)


def format_number(value, digits: int = 3) -> str:
    """Formats a statistic for tables: fixed decimals, 'Inf' and 'NA' spelled out."""
    if value is None:
        return "NA"
    value = float(value)
    if math.isnan(value):
        return "NA"
    if math.isinf(value):
        return "Inf" if value > 0 else "-Inf"
    return f"{value:.{digits}f}"


def format_percent(fraction, digits: int = 1) -> str:
    """0.263 -> '26.3%'."""
    if fraction is None or math.isnan(fraction):
        return "NA"
    return f"{100.0 * fraction:.{digits}f}%"


def json_number(value):
    """JSON has no Inf/NaN: Inf becomes the string 'Inf', NaN becomes null."""
    if value is None:
        return None
    value = float(value)
    if math.isnan(value):
        return None
    if math.isinf(value):
        return "Inf" if value > 0 else "-Inf"
    return value


def from_json_number(value) -> float:
    if value is None:
        return math.nan
    if value == "Inf":
        return math.inf
    if value == "-Inf":
        return -math.inf
    return float(value)


@contextmanager
def exit_on_error():
    """Turns library errors into a logged message and the matching exit code."""
    try:
        yield
    except MlmiError as e:
        logger.error(str(e))
        raise typer.Exit(code=e.exit_code) from e
