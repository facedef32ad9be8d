"""Run artifacts - CSV/JSON writers and the Markdown/HTML run summary."""
import json
import math
import os
from typing import List, Optional, Sequence

import markdown
import numpy as np
import pandas as pd

from config import Config
from logger import get_logger

log = get_logger('report')

FLOAT_FORMAT = '%.10g'


def ensure_dir(path: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    return path


def write_csv(frame: pd.DataFrame, path: str) -> str:
    """Write a report table; floats with 10 significant digits, no index."""
    ensure_dir(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    log.info(f"Wrote {len(frame)} rows to {path}")
    return path


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, pd.Timestamp):
        return value.isoformat()
    return value


def write_json(document, path: str) -> str:
    """Write a JSON document with sorted keys; NaN becomes null."""
    ensure_dir(path)
    with open(path, 'w') as f:
        json.dump(_plain(document), f, indent=2, sort_keys=True)
        f.write('\n')
    log.info(f"Wrote {path}")
    return path


def markdown_to_html(md_content: str) -> str:
    """Convert Markdown to HTML."""
    extensions = ['tables', 'fenced_code']
    return markdown.markdown(md_content, extensions=extensions)


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return '-' if math.isnan(value) else f'{value:.4f}'
    return str(value)


def markdown_table(frame: pd.DataFrame, columns: Optional[Sequence[str]] = None) -> str:
    columns = list(columns or frame.columns)
    lines = ['| ' + ' | '.join(columns) + ' |', '|' + '---|' * len(columns)]
    for _, row in frame.iterrows():
        lines.append('| ' + ' | '.join(_cell(row[c]) for c in columns) + ' |')
    return '\n'.join(lines)


def write_summary(out_dir: str, title: str, sections: List[tuple], config: Optional[dict] = None) -> List[str]:
    """
    Write summary.md and its HTML rendering.

    Args:
        out_dir: Run output directory
        title: Summary heading
        sections: (heading, DataFrame or text) pairs
        config: Effective config, listed at the end

    Returns:
        Paths of the two files
    """
    parts = [f'# {title}', '']
    for heading, body in sections:
        parts += [f'## {heading}', '']
        parts.append(markdown_table(body) if isinstance(body, pd.DataFrame) else str(body))
        parts.append('')
    if config:
        parts += ['## Configuration', '', '```', json.dumps(_plain(config), indent=2, sort_keys=True), '```', '']
    md_content = '\n'.join(parts)

    md_path = os.path.join(out_dir, Config.SUMMARY_MD)
    html_path = os.path.join(out_dir, Config.SUMMARY_HTML)
    ensure_dir(md_path)
    with open(md_path, 'w', encoding='utf-8') as f:
        f.write(md_content)
    html = markdown_to_html(md_content)
    with open(html_path, 'w', encoding='utf-8') as f:
        f.write(f'<!DOCTYPE html>\n<html><head><meta charset="utf-8"><title>{title}</title></head>\n'
                f'<body>\n{html}\n</body></html>\n')
    log.info(f"Wrote run summary to {md_path}")
    return [md_path, html_path]
