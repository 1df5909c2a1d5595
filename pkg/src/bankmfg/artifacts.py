"""Validation of emitted artifacts against the schemas shipped in-repo.

JSON artifacts are validated with JSON Schema documents named
``<name>.schema.json``; CSV artifacts are validated against column
specifications named ``<name>.csv.json`` that list the header and the cell
type of each column (plus an optional repeated trailing group such as the
``mu_###`` measure-weight columns).  Both kinds live in the package's
``schemas/`` directory, so consumers of the exported files can validate
them with stock tooling.
"""

import csv
import json
from importlib import resources

import jsonschema


class ArtifactError(ValueError):
    """An artifact does not conform to its shipped schema."""


_SCHEMA_DIR = resources.files("bankmfg") / "schemas"
_CELL_PARSERS = {"int": int, "float": float}


def _read_schema_file(filename):
    path = _SCHEMA_DIR / filename
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        available = sorted(p.name for p in _SCHEMA_DIR.iterdir()
                           if p.name.endswith(".json"))
        raise ArtifactError(
            f"no shipped schema {filename!r}; available: {available}")


def load_schema(name) -> dict:
    """The shipped JSON Schema for the named JSON artifact."""
    return _read_schema_file(f"{name}.schema.json")


def load_csv_spec(name) -> dict:
    """The shipped column specification for the named CSV artifact."""
    return _read_schema_file(f"{name}.csv.json")


def validate_json(name, obj) -> None:
    """Check one JSON artifact (as a Python object) against its schema."""
    try:
        jsonschema.validate(obj, load_schema(name))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ArtifactError(f"{name}: {e.message} (at {where})")


def validate_csv(name, path) -> None:
    """Check a CSV file's header and cell types against its shipped spec."""
    spec = load_csv_spec(name)
    fixed = spec["columns"]
    repeated = spec.get("repeated")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=spec.get("delimiter", ","))
        try:
            header = next(reader)
        except StopIteration:
            raise ArtifactError(f"{name}: {path} is empty")
        names = [c["name"] for c in fixed]
        if header[:len(names)] != names:
            raise ArtifactError(
                f"{name}: bad header in {path}: expected it to start with "
                f"{names}, got {header[:len(names)]}")
        extras = header[len(names):]
        if repeated is None:
            if extras:
                raise ArtifactError(
                    f"{name}: unexpected extra columns {extras} in {path}")
            parsers = [_CELL_PARSERS[c["type"]] for c in fixed]
        else:
            prefix = repeated["prefix"]
            bad = [c for c in extras if not c.startswith(prefix)]
            if bad:
                raise ArtifactError(
                    f"{name}: trailing columns must start with {prefix!r}, "
                    f"got {bad} in {path}")
            parsers = ([_CELL_PARSERS[c["type"]] for c in fixed]
                       + [_CELL_PARSERS[repeated["type"]]] * len(extras))
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(parsers):
                raise ArtifactError(
                    f"{name}: row {lineno} of {path} has {len(row)} cells, "
                    f"expected {len(parsers)}")
            for cell, parse, col in zip(row, parsers, header):
                try:
                    parse(cell)
                except ValueError:
                    raise ArtifactError(
                        f"{name}: row {lineno}, column {col!r} of {path}: "
                        f"{cell!r} is not a valid {parse.__name__}")
