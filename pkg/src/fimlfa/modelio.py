"""File formats: CSV datasets with missing-value tokens and a plain-text
model format with round-trip-exact floats."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .model import FactorModel, ObservedDataset

DEFAULT_MISSING_TOKENS = ("", "NA")

MODEL_FORMAT_TAG = "factor-model-v1"


class LoadedCsv(NamedTuple):
    dataset: ObservedDataset
    columns: list


def load_csv(path, missing_tokens: Sequence[str] = DEFAULT_MISSING_TOKENS) -> LoadedCsv:
    """Read a comma-separated dataset with a mandatory header row.

    Cells equal to one of ``missing_tokens`` (after stripping spaces) count
    as missing. Rows must all have the header's width, every non-missing
    cell must parse as a float, and no data row may be entirely missing;
    violations raise ValueError naming the offending line.
    """
    tokens = {t.strip() for t in missing_tokens}
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise ValueError(f"{path}: file contains no header row")
    columns = [c.strip() for c in lines[0].split(",")]
    p = len(columns)
    if len(lines) < 2:
        raise ValueError(f"{path}: no data rows after the header")
    n = len(lines) - 1
    values = np.zeros((n, p))
    mask = np.zeros((n, p), dtype=bool)
    empty_lines = []
    for r, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != p:
            raise ValueError(
                f"{path}: line {r + 2} has {len(cells)} fields, expected {p}"
            )
        seen_any = False
        for c, cell in enumerate(cells):
            cell = cell.strip()
            if cell in tokens:
                continue
            try:
                parsed = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}: line {r + 2}, column {columns[c]!r}: "
                    f"cannot parse {cell!r} as a number"
                ) from None
            if not np.isfinite(parsed):
                raise ValueError(
                    f"{path}: line {r + 2}, column {columns[c]!r}: "
                    f"non-finite value {cell!r}"
                )
            values[r, c] = parsed
            mask[r, c] = True
            seen_any = True
        if not seen_any:
            empty_lines.append(r + 2)
    if empty_lines:
        raise ValueError(
            f"{path}: rows with no observed values at lines {empty_lines}"
        )
    dead = [columns[c] for c in range(p) if not mask[:, c].any()]
    if dead:
        raise ValueError(f"{path}: columns with no observed values: {dead}")
    return LoadedCsv(dataset=ObservedDataset(values=values, mask=mask), columns=columns)


def write_csv(dataset: ObservedDataset, path, columns: Sequence[str] | None = None,
              missing_token: str = "") -> None:
    """Write a dataset back out; missing cells become ``missing_token``."""
    if columns is None:
        columns = [f"v{i + 1}" for i in range(dataset.n_vars)]
    if len(columns) != dataset.n_vars:
        raise ValueError("column count does not match the dataset width")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(str(c) for c in columns) + "\n")
        for r in range(dataset.n_cases):
            cells = [
                repr(float(dataset.values[r, c])) if dataset.mask[r, c] else missing_token
                for c in range(dataset.n_vars)
            ]
            fh.write(",".join(cells) + "\n")


def parse_config(path) -> dict:
    """Parse a plain-text ``key = value`` config file.

    ``#`` starts a comment, blank lines are skipped, keys are
    case-sensitive, and values stay raw strings (lists keep their commas).
    Duplicate keys raise.
    """
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {ln}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ValueError(f"{path}: line {ln}: empty key")
            if key in out:
                raise ValueError(f"{path}: line {ln}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


class ModelFile(NamedTuple):
    """A fitted model plus the fitting metadata stored alongside it."""

    model: FactorModel
    restricted: bool
    algorithm: str
    loglik: float
    iterations: int


def write_model(path, model: FactorModel, *, restricted: bool, algorithm: str,
                loglik: float, iterations: int) -> None:
    """Serialize a model as plain text.

    Floats are written with repr, which round-trips float64 exactly, so a
    read-back model compares bit-for-bit equal.
    """
    p, m = model.p, model.m
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{MODEL_FORMAT_TAG}\n")
        fh.write(f"p {p}\n")
        fh.write(f"m {m}\n")
        fh.write(f"restricted {int(bool(restricted))}\n")
        fh.write(f"algorithm {algorithm}\n")
        fh.write(f"loglik {float(loglik)!r}\n")
        fh.write(f"iterations {int(iterations)}\n")
        fh.write("mu\n")
        for i in range(p):
            fh.write(repr(float(model.mu[i])) + "\n")
        fh.write("loadings\n")
        for i in range(p):
            fh.write(" ".join(repr(float(v)) for v in model.loadings[i]) + "\n")
        fh.write("psi\n")
        for i in range(p):
            fh.write(repr(float(model.psi[i])) + "\n")


def read_model(path) -> ModelFile:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != MODEL_FORMAT_TAG:
        raise ValueError(f"{path}: not a {MODEL_FORMAT_TAG} file")
    pos = 1

    def header(name):
        nonlocal pos
        if pos >= len(lines):
            raise ValueError(f"{path}: truncated header, expected {name!r}")
        parts = lines[pos].split(None, 1)
        if len(parts) != 2 or parts[0] != name:
            raise ValueError(f"{path}: line {pos + 1}: expected {name!r} entry")
        pos += 1
        return parts[1]

    p = int(header("p"))
    m = int(header("m"))
    restricted = bool(int(header("restricted")))
    algorithm = header("algorithm")
    loglik = float(header("loglik"))
    iterations = int(header("iterations"))

    def block(name, width):
        nonlocal pos
        if pos >= len(lines) or lines[pos].strip() != name:
            raise ValueError(f"{path}: expected {name!r} block at line {pos + 1}")
        pos += 1
        if pos + p > len(lines):
            raise ValueError(f"{path}: {name!r} block is truncated")
        rows = []
        for i in range(p):
            cells = lines[pos + i].split()
            if len(cells) != width:
                raise ValueError(
                    f"{path}: line {pos + i + 1}: expected {width} values, got {len(cells)}"
                )
            rows.append([float(c) for c in cells])
        pos += p
        return np.asarray(rows)

    mu = block("mu", 1)[:, 0]
    loadings = block("loadings", m)
    psi = block("psi", 1)[:, 0]
    model = FactorModel(mu=mu, loadings=loadings, psi=psi)
    if model.p != p or model.m != m:
        raise ValueError(f"{path}: block shapes disagree with the header")
    return ModelFile(
        model=model,
        restricted=restricted,
        algorithm=algorithm,
        loglik=loglik,
        iterations=iterations,
    )
