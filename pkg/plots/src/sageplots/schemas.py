"""Parsing and validation of the run-log, summary, and environment files.

This package never imports the simulation code; the documented file
formats are the only contract.
"""

from __future__ import annotations

import csv
import json

import numpy as np

LOG_SCHEMA = 1
ENV_SCHEMA = 1
SUMMARY_COLUMNS = ["seed", "variant", "n_prime", "n_star", "time",
                   "violations", "final_avr"]


class SchemaMismatch(Exception):
    """Input file does not match the documented schema or version."""


class EmptyLog(Exception):
    """Run log carries no usable records for the requested figure."""


def read_runlog(path) -> dict:
    """Parse a line-delimited run log into its record groups."""
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise EmptyLog(f"{path} contains no records")
    header = records[0]
    if header.get("kind") != "header":
        raise SchemaMismatch(f"{path}: first record is not a header")
    if header.get("schema") != LOG_SCHEMA:
        raise SchemaMismatch(f"{path}: log schema {header.get('schema')} "
                             f"!= {LOG_SCHEMA}")
    out = {"header": header, "rounds": [], "snapshots": [],
           "context": None, "metrics": None}
    for rec in records[1:]:
        kind = rec.get("kind")
        if kind == "round":
            out["rounds"].append(rec)
        elif kind == "snapshot":
            out["snapshots"].append(rec)
        elif kind == "context":
            out["context"] = rec
        elif kind == "metrics":
            out["metrics"] = rec
        elif kind == "perf":
            pass
        else:
            raise SchemaMismatch(f"{path}: unknown record kind {kind!r}")
    if out["metrics"] is None:
        raise SchemaMismatch(f"{path}: missing metrics record")
    return out


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SUMMARY_COLUMNS:
            raise SchemaMismatch(
                f"{path}: summary columns {reader.fieldnames} != {SUMMARY_COLUMNS}")
        return list(reader)


def read_environment(path) -> dict:
    with open(path, "rb") as fh:
        head = json.loads(fh.readline().decode())
        if head.get("schema") != ENV_SCHEMA:
            raise SchemaMismatch(f"{path}: environment schema "
                                 f"{head.get('schema')} != {ENV_SCHEMA}")
        raw = fh.read()
    ny, nx = head["shape"]
    values = np.frombuffer(raw, dtype="<f8")
    if values.size != ny * nx:
        raise SchemaMismatch(f"{path}: grid payload has {values.size} floats, "
                             f"expected {ny * nx}")
    head["values"] = values.reshape(ny, nx)
    return head


def rle_decode(rows: list, shape: tuple) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for iy, runs in enumerate(rows):
        for s, ln in runs:
            mask[iy, s:s + ln] = True
    return mask
