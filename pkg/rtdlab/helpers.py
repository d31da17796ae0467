import re
from typing import Iterable, Iterator, List

import pandas as pd

TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def normalize_text(text: str) -> str:
    """Lowercase and collapse runs of whitespace to single spaces."""
    return ' '.join(text.lower().split())


def tokenize(text: str) -> List[str]:
    """Split on whitespace and punctuation; every punctuation mark is its own token."""
    return TOKEN_PATTERN.findall(normalize_text(text))


def detokenize(tokens: Iterable[str]) -> str:
    return ' '.join(tokens)


def iter_documents(lines: Iterable[str]) -> Iterator[str]:
    """Yield non-blank documents from a one-document-per-line stream."""
    for line in lines:
        line = line.strip()
        if line:
            yield line


def frame_to_text(df: pd.DataFrame, title: str = None, float_format: str = '{:.4f}') -> str:
    """Human-readable table used for the text side of every report."""
    body = df.to_string(index=False, float_format=float_format.format) if len(df) else '(empty)'
    if title:
        return f"{title}\n{'=' * len(title)}\n{body}\n"
    return f"{body}\n"


def write_csv(df: pd.DataFrame, path) -> None:
    # fixed float format keeps repeated runs byte-identical
    df.to_csv(path, index=False, float_format='%.10g', lineterminator='\n')
