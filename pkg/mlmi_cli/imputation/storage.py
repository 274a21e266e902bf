"""
On-disk layout of an imputation run:

    <out>/imputations/imp_001.csv ...   (layout "separate")
    <out>/imputations/imputations.csv   (layout "long", leading ".imp" column)
    <out>/chains.csv                    iteration, phase, chain, one column per parameter
    <out>/spec.json                     run specification and the prior actually used
    <out>/config.json                   effective configuration (utils.config)
"""
import json
import os
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.data_model import Dataset, load_dataset, write_dataset
from mlmi_cli.imputation.mlmm_gibbs import ChainStore, ImputationResult
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)

IMPUTATION_DIR = "imputations"
CHAINS_FILE = "chains.csv"
SPEC_FILE = "spec.json"
LONG_FILE = "imputations.csv"
IMP_COLUMN = ".imp"
LAYOUTS = ("separate", "long")


def imputation_file_name(index: int) -> str:
    return f"imp_{index:03d}.csv"


def write_imputations(datasets: List[Dataset], out_dir: Path, layout: str = "separate") -> List[Path]:
    if layout not in LAYOUTS:
        raise ValidationError(f"Unknown layout '{layout}' (expected one of: {', '.join(LAYOUTS)})")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if layout == "separate":
        paths = []
        for index, d in enumerate(datasets, start=1):
            path = out_dir / imputation_file_name(index)
            write_dataset(d, path)
            paths.append(path)
        return paths

    frames = []
    for index, d in enumerate(datasets, start=1):
        frame = d.frame.copy()
        frame.insert(0, IMP_COLUMN, index)
        frames.append(frame)
    path = out_dir / LONG_FILE
    write_dataset(Dataset(pd.concat(frames, ignore_index=True), datasets[0].group_col), path)
    return [path]


def read_imputations(path: Path, group_col: str) -> List[Dataset]:
    """
    Read a directory of imp_NNN.csv files or a single long-format file.
    Rows with .imp == 0 (the incomplete original, as some tools export it) are skipped.
    """
    path = Path(path)
    if path.is_dir():
        long_file = path / LONG_FILE
        files = sorted(path.glob("imp_*.csv"))
        if not files and long_file.exists():
            return read_imputations(long_file, group_col)
        if not files:
            raise ValidationError(f"No imputed data sets found in {path}")
        return [load_dataset(f, group_col) for f in files]

    if not path.exists():
        raise ValidationError(f"File not found: {path}")
    stacked = load_dataset(path, group_col)
    if not stacked.has_column(IMP_COLUMN):
        raise ValidationError(f"{path} has no '{IMP_COLUMN}' column; expected long-format imputations")
    frame = stacked.frame
    index = frame[IMP_COLUMN].to_numpy()
    if np.isnan(index).any():
        raise ValidationError(f"'{IMP_COLUMN}' column of {path} has missing values")
    datasets = []
    for value in sorted(set(index.astype(int)) - {0}):
        part = frame[index == value].drop(columns=[IMP_COLUMN]).reset_index(drop=True)
        datasets.append(Dataset(part, group_col))
    if not datasets:
        raise ValidationError(f"{path} contains no imputed data sets")
    return datasets


def write_spec(out_dir: Path, spec: Dict) -> Path:
    path = Path(out_dir) / SPEC_FILE
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec, f, indent=4, sort_keys=True)
        f.write("\n")
    os.chmod(path, 0o600)
    return path


def write_run(result: ImputationResult, out_dir: Path, layout: str = "separate") -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    # 1. Completed data sets
    imputations = write_imputations(result.datasets, out_dir / IMPUTATION_DIR, layout=layout)

    # 2. Traces
    chains = out_dir / CHAINS_FILE
    result.chains.write(chains)

    # 3. Spec echo (no timings: primary outputs must be reproducible byte for byte)
    spec = result.spec.to_config()
    spec["prior"] = result.prior.to_dict()
    spec["n_iterations"] = result.n_iterations
    spec["parameters"] = list(result.chains.names)
    spec_path = write_spec(out_dir, spec)

    logger.info(f"Wrote {len(result.datasets)} imputed data set(s), traces and spec to {out_dir}")
    return {"imputations": out_dir / IMPUTATION_DIR, "chains": chains, "spec": spec_path, "files": imputations}


def read_spec(run_dir: Path) -> Dict:
    path = Path(run_dir) / SPEC_FILE
    if not path.exists():
        raise ValidationError(f"{run_dir} is not an imputation run directory (no {SPEC_FILE})")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def read_run_chains(run_dir: Path) -> Tuple[Dict, ChainStore]:
    """Spec and parameter traces of a run."""
    run_dir = Path(run_dir)
    spec = read_spec(run_dir)
    if not (run_dir / CHAINS_FILE).exists():
        raise ValidationError(f"{run_dir} has no {CHAINS_FILE}; transformed runs carry no traces")
    return spec, ChainStore.read(run_dir / CHAINS_FILE)


def read_run_imputations(run_dir: Path) -> Tuple[Dict, List[Dataset]]:
    """Spec and completed data sets of a run; transformed runs carry no traces."""
    run_dir = Path(run_dir)
    spec = read_spec(run_dir)
    return spec, read_imputations(run_dir / IMPUTATION_DIR, spec["group"])
