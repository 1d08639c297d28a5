"""Token edit distance, per-condition WER reports, WERR, gate histograms."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class EditCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0

    @property
    def total(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(self.substitutions + other.substitutions,
                          self.insertions + other.insertions,
                          self.deletions + other.deletions)


def edit_distance(ref, hyp) -> EditCounts:
    """Levenshtein alignment with unit costs, decomposed into S/I/D.

    Ties during backtrace prefer deletion, then insertion, then substitution.
    """
    ref = list(ref)
    hyp = list(hyp)
    R, H = len(ref), len(hyp)
    dp = np.zeros((R + 1, H + 1), dtype=np.int64)
    dp[:, 0] = np.arange(R + 1)
    dp[0, :] = np.arange(H + 1)
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            sub = dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dp[i, j] = min(sub, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    counts = EditCounts()
    i, j = R, H
    while i > 0 or j > 0:
        here = dp[i, j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and here == dp[i - 1, j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and here == dp[i - 1, j] + 1:
            counts.deletions += 1
            i -= 1
        elif j > 0 and here == dp[i, j - 1] + 1:
            counts.insertions += 1
            j -= 1
        else:
            counts.substitutions += 1
            i, j = i - 1, j - 1
    return counts


def edit_distance_oracle(ref, hyp) -> int:
    """Independent minimal-edit search by recursive exploration of the full
    edit space (memoized); used only to cross-check edit_distance."""
    ref = tuple(ref)
    hyp = tuple(hyp)
    seen: dict[tuple[int, int], int] = {}

    def go(i: int, j: int) -> int:
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        key = (i, j)
        if key in seen:
            return seen[key]
        best = go(i + 1, j + 1) + (ref[i] != hyp[j])
        best = min(best, go(i + 1, j) + 1)   # delete ref[i]
        best = min(best, go(i, j + 1) + 1)   # insert hyp[j]
        seen[key] = best
        return best

    return go(0, 0)


# ---------------------------------------------------------------------------
# condition reports


@dataclass
class CellScore:
    snr_db: float
    shift_pct: float
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_tokens: int = 0
    utterances: int = 0
    failures: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.ref_tokens == 0:
            return math.nan
        return self.errors / self.ref_tokens

    def error_fractions(self) -> dict[str, float]:
        e = self.errors
        if e == 0:
            return {"sub": 0.0, "ins": 0.0, "del": 0.0}
        return {"sub": self.substitutions / e,
                "ins": self.insertions / e,
                "del": self.deletions / e}

    def key(self) -> tuple[float, float]:
        return (self.snr_db, self.shift_pct)


def score_cell(decode_fn, cell) -> CellScore:
    """Decode and score every entry of a manifest cell.

    decode_fn(entry) -> list of tokens; a raised exception marks the entry
    failed and excludes it from the tallies.
    """
    score = CellScore(snr_db=cell.snr_db, shift_pct=cell.shift_pct)
    for entry in cell.entries:
        try:
            hyp = decode_fn(entry)
        except Exception:
            score.failures += 1
            continue
        c = edit_distance(entry.transcript, hyp)
        score.substitutions += c.substitutions
        score.insertions += c.insertions
        score.deletions += c.deletions
        score.ref_tokens += len(entry.transcript)
        score.utterances += 1
    return score


@dataclass
class ConditionReport:
    system: str
    checkpoint: str = ""
    cells: dict[tuple[float, float], CellScore] = field(default_factory=dict)
    werr_vs: str | None = None
    werr_percent: float | None = None

    def add(self, score: CellScore) -> None:
        self.cells[score.key()] = score

    def snr_values(self) -> list[float]:
        return sorted({k[0] for k in self.cells})

    def shift_values(self) -> list[float]:
        return sorted({k[1] for k in self.cells})

    def to_jsonable(self) -> dict:
        cells = []
        for key in sorted(self.cells):
            s = self.cells[key]
            cells.append({
                "snr_db": s.snr_db, "shift_pct": s.shift_pct,
                "substitutions": s.substitutions, "insertions": s.insertions,
                "deletions": s.deletions, "ref_tokens": s.ref_tokens,
                "utterances": s.utterances, "failures": s.failures,
                "wer": s.wer, "error_fractions": s.error_fractions(),
            })
        doc = {"format_version": 1, "system": self.system,
               "checkpoint": self.checkpoint, "cells": cells}
        if self.werr_vs is not None:
            doc["werr"] = {"baseline": self.werr_vs, "percent": self.werr_percent}
        return doc

    @classmethod
    def from_jsonable(cls, doc: dict) -> "ConditionReport":
        if doc.get("format_version") != 1:
            raise ValueError("unsupported report format")
        rep = cls(system=doc["system"], checkpoint=doc.get("checkpoint", ""))
        for c in doc["cells"]:
            rep.add(CellScore(snr_db=c["snr_db"], shift_pct=c["shift_pct"],
                              substitutions=c["substitutions"], insertions=c["insertions"],
                              deletions=c["deletions"], ref_tokens=c["ref_tokens"],
                              utterances=c["utterances"], failures=c["failures"]))
        if "werr" in doc:
            rep.werr_vs = doc["werr"]["baseline"]
            rep.werr_percent = doc["werr"]["percent"]
        return rep

    def save(self, json_path, text_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_jsonable(), sort_keys=True, indent=1) + "\n")
        if text_path is not None:
            Path(text_path).write_text(self.format_text())

    @classmethod
    def load(cls, json_path) -> "ConditionReport":
        return cls.from_jsonable(json.loads(Path(json_path).read_text()))

    def format_text(self) -> str:
        """Fixed-width grid: one row block per shift, WER% plus error split."""
        snrs = self.snr_values()
        lines = [f"system: {self.system}"]
        if self.checkpoint:
            lines.append(f"checkpoint: {self.checkpoint}")
        if self.werr_vs is not None:
            lines.append(f"werr vs {self.werr_vs}: {self.werr_percent:.1f}% (macro over cells)")
        header = "metric".ljust(10) + "".join(f"{s:>9g}dB" for s in snrs)
        for shift in self.shift_values():
            lines.append("")
            lines.append(f"shift = {shift:g}%")
            lines.append(header)
            for metric in ("wer", "ins", "sub", "del"):
                row = [metric.ljust(10)]
                for snr in snrs:
                    cell = self.cells.get((snr, shift))
                    if cell is None or cell.ref_tokens == 0:
                        row.append(" " * 9 + "--")
                        continue
                    if metric == "wer":
                        val = 100.0 * cell.wer
                    else:
                        val = 100.0 * cell.error_fractions()[metric]
                    row.append(f"{val:>10.2f}")
                lines.append("".join(row))
        return "\n".join(lines) + "\n"


@dataclass
class WerrResult:
    percent: float
    per_cell: dict[tuple[float, float], float]
    excluded: list[tuple[float, float]]


def werr(model_report: ConditionReport, baseline_report: ConditionReport) -> WerrResult:
    """Macro-averaged relative WER reduction over the shared grid, percent.

    Cells where the baseline WER is 0 cannot define a relative reduction;
    they are excluded and flagged.
    """
    keys = sorted(set(model_report.cells) & set(baseline_report.cells))
    if not keys:
        raise ValueError("reports share no grid cells")
    per_cell: dict[tuple[float, float], float] = {}
    excluded: list[tuple[float, float]] = []
    for key in keys:
        base = baseline_report.cells[key].wer
        mine = model_report.cells[key].wer
        if not math.isfinite(base) or base == 0.0:
            excluded.append(key)
            continue
        per_cell[key] = 100.0 * (base - mine) / base
    if not per_cell:
        raise ValueError("every shared cell had baseline WER 0; WERR undefined")
    return WerrResult(percent=sum(per_cell.values()) / len(per_cell),
                      per_cell=per_cell, excluded=excluded)


# ---------------------------------------------------------------------------
# gate histograms


@dataclass
class GateHistogram:
    bin_edges: np.ndarray
    target_counts: np.ndarray
    background_counts: np.ndarray
    target_mean: float
    background_mean: float

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_start", "bin_end", "count_target", "count_background"])
            for i in range(len(self.target_counts)):
                w.writerow([f"{self.bin_edges[i]:.6f}", f"{self.bin_edges[i + 1]:.6f}",
                            int(self.target_counts[i]), int(self.background_counts[i])])


def placement_frame_classes(main_len_raw: int, total_len_raw: int, stack_factor: int):
    """Encoder-frame indices that are purely target vs purely background.

    Only exact placements count: an encoder frame straddling the main/background
    boundary belongs to neither class.
    """
    t_enc = total_len_raw // stack_factor
    last_pure_target = main_len_raw // stack_factor
    first_pure_bg = -(-main_len_raw // stack_factor)
    target = np.arange(0, min(last_pure_target, t_enc))
    background = np.arange(min(first_pure_bg, t_enc), t_enc)
    return target, background


def gate_histogram(gate_fn, cell, stack_factor: int, bins: int = 50,
                   lo: float = 0.25, hi: float = 0.75) -> GateHistogram:
    """Histogram per-frame gate values split into target/background frames.

    gate_fn(entry) -> per-encoder-frame b_t. Needs a cell whose shift gives
    exact placement (100%); entries with no pure background frames simply
    contribute none.
    """
    edges = np.linspace(lo, hi, bins + 1)
    t_counts = np.zeros(bins, dtype=np.int64)
    b_counts = np.zeros(bins, dtype=np.int64)
    t_vals: list[np.ndarray] = []
    b_vals: list[np.ndarray] = []
    for entry in cell.entries:
        b = np.asarray(gate_fn(entry))
        tgt, bg = placement_frame_classes(entry.main_len, len(b) * stack_factor, stack_factor)
        tgt = tgt[tgt < len(b)]
        bg = bg[bg < len(b)]
        if len(tgt):
            t_vals.append(b[tgt])
            t_counts += np.histogram(b[tgt], bins=edges)[0]
        if len(bg):
            b_vals.append(b[bg])
            b_counts += np.histogram(b[bg], bins=edges)[0]
    tm = float(np.concatenate(t_vals).mean()) if t_vals else math.nan
    bm = float(np.concatenate(b_vals).mean()) if b_vals else math.nan
    return GateHistogram(bin_edges=edges, target_counts=t_counts,
                         background_counts=b_counts, target_mean=tm, background_mean=bm)
