import csv
from pathlib import Path

from mlmi_cli.utils.logger import get_logger, print_formatted_output

logger = get_logger(__name__)


def publish_report(
    rows: list,
    headers: list,
    title: str,
    out_path: Path = None,
    output_format: str = "text",
    sep: str = ",",
):
    """
    Prints a table to stdout and optionally writes it as a delimited file.
    """
    # 1. Print Local Table
    table_data = [dict(zip(headers, row)) for row in rows]
    if output_format == "text":
        print(f"\n{title}\n")
    print_formatted_output(table_data, headers=headers, output_format=output_format)

    # 2. Handle Storage
    if out_path is None:
        return

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, delimiter=sep, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(rows)
    logger.info(f"Wrote {title} to {out_path}")
