"""
Run summary calculation.

Summary rows and aggregate metrics are computed from stage records, either
the database rows of a run or the line-delimited records on disk, so a
summary can be rebuilt without retraining anything.
"""

import csv
import io
from collections import defaultdict

from .lab.metrics import mean_std

SUMMARY_COLUMNS = [
    "attack",
    "defense",
    "m",
    "b",
    "r",
    "delta",
    "cda",
    "asr",
    "auc",
    "seed",
    "repeat",
]
FLOAT_COLUMNS = {"delta", "cda", "asr", "auc"}


def format_cell(column, value):
    if value is None:
        return ""
    if column in FLOAT_COLUMNS:
        return "%.6f" % float(value)
    return str(value)


def rows_from_records(records):
    """Summary rows of every record that carries one, in sequence order."""
    ordered = sorted(records, key=lambda record: record["sequence"])
    return [dict(record["payload"]["row"]) for record in ordered if "row" in record["payload"]]


def summary_csv(rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for row in rows:
        writer.writerow([format_cell(column, row.get(column)) for column in SUMMARY_COLUMNS])
    return buffer.getvalue()


def write_summary_csv(rows, path):
    path.write_text(summary_csv(rows), encoding="utf-8")
    return path


class RunSummaryCalculator:
    """
    Calculator for a run's summary that is pre-computed after the sweep and
    stored on the run.
    """

    def __init__(self, run=None, records=None):
        self.run = run
        if records is None:
            records = [stage.as_record() for stage in run.stages.all()]
        self.records = records

    def calculate_all_statistics(self):
        """Calculate and return the summary for the run"""
        return {
            "row_count": len(self.calculate_rows()),
            "cells": self.calculate_cell_statistics(),
            "succ_repair": self.calculate_succ_repair(),
            "metrics": self.calculate_metric_reports(),
            "stage_counts": self.calculate_stage_counts(),
        }

    def calculate_rows(self):
        return rows_from_records(self.records)

    def calculate_cell_statistics(self):
        """
        Mean and sample standard deviation of CDA/ASR over repeats, for every
        (attack, defense, m, r, delta) cell.
        """
        groups = defaultdict(list)
        for row in self.calculate_rows():
            key = (row["attack"], row["defense"], row["m"], row["r"], row["delta"])
            groups[key].append(row)

        cells = []
        for key in sorted(groups, key=lambda k: tuple("" if v is None else str(v) for v in k)):
            rows = groups[key]
            cell = dict(zip(["attack", "defense", "m", "r", "delta"], key))
            cell["samples"] = len(rows)
            for column in ("cda", "asr", "auc"):
                values = [row[column] for row in rows if row.get(column) is not None]
                if values:
                    cell[column], cell[f"{column}_std"] = mean_std(values)
            cells.append(cell)
        return cells

    def calculate_succ_repair(self):
        """Mean of (CDA - ASR) over robustness-game rows, or None without any"""
        values = [
            record["payload"]["cda"] - record["payload"]["asr"]
            for record in self.records
            if record["kind"] == "game"
        ]
        if not values:
            return None
        return mean_std(values)[0]

    def calculate_metric_reports(self):
        return [
            record["payload"]["report"]
            for record in sorted(self.records, key=lambda r: r["sequence"])
            if record["kind"] == "metric" and "report" in record["payload"]
        ]

    def calculate_stage_counts(self):
        counts = defaultdict(int)
        for record in self.records:
            counts[record["kind"]] += 1
        return dict(sorted(counts.items()))
