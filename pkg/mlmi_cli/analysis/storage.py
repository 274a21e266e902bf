import json
import os
from pathlib import Path
from typing import List, Sequence

from mlmi_cli.analysis.lmm_fit import LmmFit
from mlmi_cli.exceptions import ValidationError
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)


def fit_file_name(index: int) -> str:
    return f"fit_{index:03d}.json"


def write_fits(fits: Sequence[LmmFit], out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, fit in enumerate(fits, start=1):
        path = out_dir / fit_file_name(index)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(fit.to_dict(), f, indent=4, sort_keys=True)
            f.write("\n")
        os.chmod(path, 0o600)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} fit(s) to {out_dir}")
    return paths


def read_fits(fits_dir: Path) -> List[LmmFit]:
    """Reads fit_NNN.json files in index order."""
    fits_dir = Path(fits_dir)
    if not fits_dir.is_dir():
        raise ValidationError(f"Fit directory not found: {fits_dir}")
    files = sorted(fits_dir.glob("fit_*.json"))
    if not files:
        raise ValidationError(f"No fit_*.json files in {fits_dir}")
    fits = []
    for path in files:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path} is not valid JSON: {e}") from e
        fits.append(LmmFit.from_dict(data))
    return fits
