import os
from pathlib import Path
from typing import Union

import pandas as pd

CSV_FLOAT_FORMAT = "%.6f"


def write_csv(frame: pd.DataFrame, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def _cell(value, digits: int) -> str:
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def frame_to_markdown(frame: pd.DataFrame, digits: int = 1) -> str:
    """Pipe table with a header row; floats rounded to ``digits`` decimals."""
    columns = [str(c) for c in frame.columns]
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for row in frame.itertuples(index=False):
        lines.append("| " + " | ".join(_cell(value, digits) for value in row) + " |")
    return "\n".join(lines) + "\n"
