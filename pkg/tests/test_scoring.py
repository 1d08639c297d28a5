"""Edit distance, WER reporting, WERR, and gate histogram bookkeeping."""
import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from anchorasr.scoring import (CellScore, ConditionReport, EditCounts,
                               GateHistogram, edit_distance,
                               edit_distance_oracle, gate_histogram,
                               placement_frame_classes, score_cell, werr)


def test_edit_distance_basic_decomposition():
    c = edit_distance(["a", "b", "c"], ["a", "x", "c", "d"])
    assert (c.substitutions, c.insertions, c.deletions) == (1, 1, 0)
    assert c.total == 2
    assert edit_distance([], []).total == 0
    assert edit_distance(["a"], []).deletions == 1
    assert edit_distance([], ["a", "b"]).insertions == 2


def test_edit_distance_matches_independent_oracle():
    symbols = (0, 1, 2)
    seqs = [s for n in range(4) for s in itertools.product(symbols, repeat=n)]
    for ref in seqs:
        for hyp in seqs:
            got = edit_distance(ref, hyp).total
            want = edit_distance_oracle(ref, hyp)
            assert got == want, (ref, hyp)


def test_edit_distance_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = rng.integers(0, 4, size=rng.integers(0, 8)).tolist()
        hyp = rng.integers(0, 4, size=rng.integers(0, 8)).tolist()
        c = edit_distance(ref, hyp)
        assert c.substitutions + c.deletions <= len(ref)
        assert c.substitutions + c.insertions <= len(hyp)
        assert c.total >= abs(len(ref) - len(hyp))
        assert c.total <= max(len(ref), len(hyp))


def test_edit_distance_tie_break_prefers_deletion_insertion():
    # "ab" vs "ba" admits sub+sub or del+ins at cost 2; backtrace is pinned
    c = edit_distance(["a", "b"], ["b", "a"])
    assert c.total == 2
    assert (c.deletions, c.insertions, c.substitutions) == (1, 1, 0)


def test_edit_counts_add():
    a = EditCounts(1, 2, 3) + EditCounts(4, 0, 1)
    assert (a.substitutions, a.insertions, a.deletions) == (5, 2, 4)


# ---------------------------------------------------------------------------
# cell scores and reports


def _fake_cell(snr=5.0, shift=100.0, transcripts=((1, 2), (3,))):
    entries = [SimpleNamespace(transcript=list(t)) for t in transcripts]
    return SimpleNamespace(snr_db=snr, shift_pct=shift, entries=entries)


def test_score_cell_accumulates_and_excludes_failures():
    cell = _fake_cell(transcripts=((1, 2, 3), (4, 5), (6,)))
    hyps = {0: [1, 9, 3], 1: None, 2: [6]}
    calls = []

    def decode(entry):
        i = len(calls)
        calls.append(entry)
        if hyps[i] is None:
            raise RuntimeError("decode exploded")
        return hyps[i]

    s = score_cell(decode, cell)
    assert s.failures == 1
    assert s.utterances == 2
    assert s.ref_tokens == 4          # failed entry not counted
    assert s.substitutions == 1 and s.insertions == 0 and s.deletions == 0
    assert abs(s.wer - 0.25) < 1e-15


def test_cell_score_wer_and_fractions():
    s = CellScore(snr_db=1.0, shift_pct=0.0, substitutions=2, insertions=1,
                  deletions=1, ref_tokens=8, utterances=3)
    assert abs(s.wer - 0.5) < 1e-15
    f = s.error_fractions()
    assert abs(f["sub"] - 0.5) < 1e-15
    assert abs(f["ins"] - 0.25) < 1e-15
    assert abs(f["del"] - 0.25) < 1e-15
    empty = CellScore(snr_db=1.0, shift_pct=0.0)
    assert math.isnan(empty.wer)
    assert empty.error_fractions() == {"sub": 0.0, "ins": 0.0, "del": 0.0}


def test_condition_report_roundtrip(tmp_path):
    rep = ConditionReport(system="anchored", checkpoint="best.ckpt")
    rep.add(CellScore(1.0, 0.0, substitutions=3, insertions=1, deletions=2,
                      ref_tokens=50, utterances=10))
    rep.add(CellScore(10.0, 100.0, substitutions=1, insertions=0, deletions=0,
                      ref_tokens=40, utterances=10, failures=1))
    rep.werr_vs = "baseline"
    rep.werr_percent = 41.5
    rep.save(tmp_path / "r.json", tmp_path / "r.txt")
    back = ConditionReport.load(tmp_path / "r.json")
    assert back.system == "anchored"
    assert back.checkpoint == "best.ckpt"
    assert set(back.cells) == {(1.0, 0.0), (10.0, 100.0)}
    assert back.cells[(1.0, 0.0)].substitutions == 3
    assert back.cells[(10.0, 100.0)].failures == 1
    assert back.werr_vs == "baseline" and back.werr_percent == 41.5
    text = (tmp_path / "r.txt").read_text()
    assert "shift = 0%" in text and "shift = 100%" in text
    assert "werr vs baseline: 41.5%" in text
    assert "12.00" in text  # 6/50 at (1, 0)


def test_condition_report_rejects_unknown_version():
    with pytest.raises(ValueError):
        ConditionReport.from_jsonable({"format_version": 2, "system": "x", "cells": []})


def test_werr_macro_average():
    base = ConditionReport(system="baseline")
    mine = ConditionReport(system="anchored")
    base.add(CellScore(1.0, 100.0, substitutions=6571, ref_tokens=10000, utterances=1))
    mine.add(CellScore(1.0, 100.0, substitutions=2915, ref_tokens=10000, utterances=1))
    r = werr(mine, base)
    assert abs(r.percent - 100.0 * (0.6571 - 0.2915) / 0.6571) < 1e-9
    assert r.excluded == []
    assert set(r.per_cell) == {(1.0, 100.0)}


def test_werr_excludes_zero_baseline_cells():
    base = ConditionReport(system="baseline")
    mine = ConditionReport(system="anchored")
    base.add(CellScore(1.0, 0.0, ref_tokens=100, utterances=1))            # WER 0
    base.add(CellScore(5.0, 0.0, substitutions=50, ref_tokens=100, utterances=1))
    mine.add(CellScore(1.0, 0.0, substitutions=10, ref_tokens=100, utterances=1))
    mine.add(CellScore(5.0, 0.0, substitutions=25, ref_tokens=100, utterances=1))
    r = werr(mine, base)
    assert r.excluded == [(1.0, 0.0)]
    assert abs(r.percent - 50.0) < 1e-12


def test_werr_error_cases():
    a = ConditionReport(system="a")
    b = ConditionReport(system="b")
    with pytest.raises(ValueError):
        werr(a, b)
    a.add(CellScore(1.0, 0.0, ref_tokens=10, utterances=1))
    b.add(CellScore(1.0, 0.0, ref_tokens=10, utterances=1))
    with pytest.raises(ValueError):
        werr(a, b)  # only shared cell has baseline WER 0


# ---------------------------------------------------------------------------
# gate histograms


def test_placement_frame_classes_excludes_straddlers():
    tgt, bg = placement_frame_classes(main_len_raw=10, total_len_raw=20, stack_factor=4)
    assert tgt.tolist() == [0, 1]       # frames 0..7 raw
    assert bg.tolist() == [3, 4]        # frames 12.. raw; frame 2 straddles
    tgt, bg = placement_frame_classes(main_len_raw=8, total_len_raw=16, stack_factor=4)
    assert tgt.tolist() == [0, 1]
    assert bg.tolist() == [2, 3]        # exact boundary: nothing excluded


def test_gate_histogram_splits_and_means():
    # 8-raw-frame main inside 16 raw frames, stack 4: enc frames 0,1 target,
    # 2,3 background; a second entry with a straddler contributes only pure frames
    entries = [SimpleNamespace(main_len=8, transcript=[1]),
               SimpleNamespace(main_len=10, transcript=[1])]
    cell = SimpleNamespace(snr_db=1.0, shift_pct=100.0, entries=entries)
    gates = {8: np.array([0.30, 0.32, 0.70, 0.72]),
             10: np.array([0.30, 0.34, 0.99, 0.68, 0.66])}

    def gate_fn(entry):
        return gates[entry.main_len]

    h = gate_histogram(gate_fn, cell, stack_factor=4, bins=10, lo=0.25, hi=0.75)
    assert h.target_counts.sum() == 4          # 2 + 2 pure-target frames
    assert h.background_counts.sum() == 4      # 0.99 straddler frame excluded
    assert abs(h.target_mean - np.mean([0.30, 0.32, 0.30, 0.34])) < 1e-12
    assert abs(h.background_mean - np.mean([0.70, 0.72, 0.68, 0.66])) < 1e-12
    assert len(h.bin_edges) == 11


def test_gate_histogram_csv(tmp_path):
    h = GateHistogram(bin_edges=np.linspace(0.25, 0.75, 3),
                      target_counts=np.array([3, 1]),
                      background_counts=np.array([0, 5]),
                      target_mean=0.3, background_mean=0.7)
    h.save_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().strip().splitlines()
    assert lines[0] == "bin_start,bin_end,count_target,count_background"
    assert lines[1].endswith(",3,0")
    assert lines[2].endswith(",1,5")
