from collections.abc import Iterable
from pathlib import Path

import numpy as np
import pandas as pd
import structlog
from pydantic import ValidationError

from app.models.model import ChemicalEntry, ChemicalRecord
from app.models.spectral import ConfusionMatrix, SignatureSet, SweepResult
from app.utils.errors import DimensionMismatchError, InputDataError, LabelError, NonFiniteInputError
from app.utils.utils import save_csv

logger = structlog.get_logger(__name__)

LABEL_COLUMNS = ("trial", "reheat_class")
CHEMICAL_COLUMNS = ("trial", "class", "tbars_pct", "tbars_sig", "totox_pct", "totox_sig")
AGREEMENT_COLUMNS = ("trial", "algorithm", "property", "predicted", "reference", "jaccard")
_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


def _read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise InputDataError(f"file not found: {path}") from e
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputDataError(f"cannot parse CSV {path}: {e}") from e


def _int_column(frame: pd.DataFrame, column: str, path: Path) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    if values.isna().any() or not np.all(np.equal(np.mod(values, 1), 0)):
        raise LabelError(f"{path}: column {column!r} must hold integers")
    return values.to_numpy(dtype=np.int64)


# =============================================================================
# SIGNATURES
# =============================================================================

def signature_columns(bands: int) -> list[str]:
    return [*LABEL_COLUMNS, *(f"b{i}" for i in range(bands))]


def signatures_to_frame(signatures: SignatureSet) -> pd.DataFrame:
    frame = pd.DataFrame(signatures.values, columns=[f"b{i}" for i in range(signatures.dim)])
    frame.insert(0, "reheat_class", signatures.classes)
    frame.insert(0, "trial", signatures.trials)
    return frame


def write_signatures(signatures: SignatureSet, path: Path) -> Path:
    return save_csv(signatures_to_frame(signatures), path)


def read_signatures(path: Path) -> SignatureSet:
    """Read a ``trial,reheat_class,b0..b{B-1}`` table. Negative labels mean unlabelled."""
    path = Path(path)
    frame = _read_csv(path)
    missing = [c for c in LABEL_COLUMNS if c not in frame.columns]
    if missing:
        raise InputDataError(f"{path}: missing header columns {missing}")
    band_cols = [c for c in frame.columns if c not in LABEL_COLUMNS]
    if not band_cols:
        raise DimensionMismatchError(f"{path}: no band columns")
    if band_cols != [f"b{i}" for i in range(len(band_cols))]:
        raise DimensionMismatchError(f"{path}: band columns must be b0..b{len(band_cols) - 1}, got {band_cols}")
    if frame.empty:
        raise InputDataError(f"{path}: no signature rows")

    values = frame[band_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad_row = int(np.flatnonzero(~np.isfinite(values).all(axis=1))[0])
        raise NonFiniteInputError(f"{path}: non-finite or missing band value in data row {bad_row + 1}")

    signatures = SignatureSet(
        values=values,
        trials=_int_column(frame, "trial", path),
        classes=_int_column(frame, "reheat_class", path),
    )
    logger.info("signatures_loaded", path=str(path), rows=len(signatures), bands=signatures.dim)
    return signatures


# =============================================================================
# CHEMICAL GROUND TRUTH
# =============================================================================

def _flag(value: str, path: Path, row: int) -> bool:
    text = value.strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise InputDataError(f"{path}: row {row} has unreadable significance flag {value!r}")


def read_chemical(path: Path) -> list[ChemicalRecord]:
    path = Path(path)
    frame = _read_csv(path)
    missing = [c for c in CHEMICAL_COLUMNS if c not in frame.columns]
    if missing:
        raise InputDataError(f"{path}: missing header columns {missing}")

    entries: dict[int, list[ChemicalEntry]] = {}
    for row, rec in enumerate(frame.to_dict(orient="records"), start=1):
        try:
            entry = ChemicalEntry(
                trial=int(rec["trial"]),
                reheat_class=int(rec["class"]),
                tbars_pct=float(rec["tbars_pct"]),
                tbars_sig=_flag(rec["tbars_sig"], path, row),
                totox_pct=float(rec["totox_pct"]),
                totox_sig=_flag(rec["totox_sig"], path, row),
            )
        except (ValueError, ValidationError) as e:
            raise InputDataError(f"{path}: malformed row {row}: {e}") from e
        entries.setdefault(entry.trial, []).append(entry)

    try:
        records = [ChemicalRecord(trial=t, entries=tuple(rows)) for t, rows in sorted(entries.items())]
    except ValidationError as e:
        raise InputDataError(f"{path}: {e}") from e
    logger.info("chemical_loaded", path=str(path), trials=len(records))
    return records


def write_chemical(records: Iterable[ChemicalRecord], path: Path) -> Path:
    rows = [
        {
            "trial": e.trial,
            "class": e.reheat_class,
            "tbars_pct": e.tbars_pct,
            "tbars_sig": int(e.tbars_sig),
            "totox_pct": e.totox_pct,
            "totox_sig": int(e.totox_sig),
        }
        for record in records
        for e in sorted(record.entries, key=lambda e: e.reheat_class)
    ]
    return save_csv(pd.DataFrame(rows, columns=list(CHEMICAL_COLUMNS)), path)


# =============================================================================
# REPORT TABLES
# =============================================================================

def sweep_to_frame(sweep: SweepResult) -> pd.DataFrame:
    frame = pd.DataFrame(sweep.gaps, columns=[f"g{k}" for k in sweep.modes])
    frame.insert(0, "sigma", sweep.sigmas)
    return frame


def confusion_to_frame(confusion: ConfusionMatrix, classes: Iterable[int]) -> pd.DataFrame:
    classes = list(classes)
    frame = pd.DataFrame(confusion.counts, columns=[f"pred_{c}" for c in classes])
    frame.insert(0, "true_class", classes)
    return frame


def read_table(path: Path, required: Iterable[str]) -> pd.DataFrame:
    """Read one of this package's own CSV artifacts and check its header."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, keep_default_na=False)
    except FileNotFoundError as e:
        raise InputDataError(f"file not found: {path}") from e
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputDataError(f"cannot parse CSV {path}: {e}") from e
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise InputDataError(f"{path}: missing header columns {missing}")
    return frame
