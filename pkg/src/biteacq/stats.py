"""Trial ingestion, empirical success tables, exact homogeneity tests and evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import softmax

ACTIONS = ("VS-0", "VS-90", "TV-0", "TV-90", "TA-0", "TA-90")
MACROS = ("VS", "TV", "TA")
ROLLS = (0, 90)
ENVS = ("ISO", "WALL", "STACK")
OUTCOMES = ("success", "failure", "discard")
CATEGORIES = ("long", "non-flat", "flat", "leafy")
CSV_HEADER = ["trial_id", "item", "category", "macro", "roll", "env", "outcome"]
MAX_FISHER_TOTAL = 200


def split_action(action: str) -> tuple[str, int]:
    macro, roll = action.split("-")
    return macro, int(roll)


def action_index(macro: str, roll: int) -> int:
    return ACTIONS.index(f"{macro}-{roll}")


class TrialParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CoverageError(KeyError):
    def __init__(self, gaps):
        self.gaps = list(gaps)
        super().__init__(f"{len(self.gaps)} missing (item, env, action) cells: {self.gaps[:10]}")


class EnumerationLimitError(ValueError):
    pass


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    item: str
    category: str | None
    macro: str
    roll: int
    env: str
    outcome: str

    @property
    def action(self) -> str:
        return f"{self.macro}-{self.roll}"


def ingest_trials(csv_path, mirror_symmetric: bool = False) -> list[TrialRecord]:
    """Parse and validate a trial CSV.

    With ``mirror_symmetric``, items that only have roll-0 trials (rotationally
    symmetric foods) get a roll-90 copy of each record, ids suffixed ``/m90``.
    """
    records: list[TrialRecord] = []
    seen: dict[str, int] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise TrialParseError(1, f"header must be {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise TrialParseError(lineno, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            tid, item, cat, macro, roll, env, outcome = row
            if not tid or not item:
                raise TrialParseError(lineno, "trial_id and item must be non-empty")
            if tid in seen:
                raise TrialParseError(lineno, f"duplicate trial_id {tid!r} (first on line {seen[tid]})")
            if cat and cat not in CATEGORIES:
                raise TrialParseError(lineno, f"unknown category {cat!r}")
            if macro not in MACROS:
                raise TrialParseError(lineno, f"unknown macro {macro!r}")
            if roll not in ("0", "90"):
                raise TrialParseError(lineno, f"unknown roll {roll!r}")
            if env not in ENVS:
                raise TrialParseError(lineno, f"unknown env {env!r}")
            if outcome not in OUTCOMES:
                raise TrialParseError(lineno, f"unknown outcome {outcome!r}")
            seen[tid] = lineno
            records.append(TrialRecord(tid, item, cat or None, macro, int(roll), env, outcome))
    if mirror_symmetric:
        records = mirror_single_roll(records)
    return records


def mirror_single_roll(records: Sequence[TrialRecord]) -> list[TrialRecord]:
    rolls: dict[str, set[int]] = defaultdict(set)
    for r in records:
        rolls[r.item].add(r.roll)
    out = list(records)
    for r in records:
        if rolls[r.item] == {0}:
            out.append(TrialRecord(r.trial_id + "/m90", r.item, r.category, r.macro, 90, r.env, r.outcome))
    return out


def write_trials(records: Iterable[TrialRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.trial_id, r.item, r.category or "", r.macro, r.roll, r.env, r.outcome])


# ---------------------------------------------------------------- success table

@dataclass
class SuccessTable:
    counts: dict[tuple[str, str, str], tuple[int, int]]  # (item, env, action) -> (s, f)
    categories: dict[str, str | None] = field(default_factory=dict)

    def successes(self, item, env, action) -> int:
        return self.counts[(item, str(env), action)][0]

    def n(self, item, env, action) -> int:
        s, f = self.counts[(item, str(env), action)]
        return s + f

    def rate(self, item, env, action) -> float:
        s, f = self.counts[(item, str(env), action)]
        if s + f == 0:
            raise ValueError(f"rate undefined for {(item, env, action)} with no trials")
        return s / (s + f)

    def items(self) -> list[str]:
        return sorted({k[0] for k in self.counts})

    def gaps(self, items: Iterable[str] | None = None) -> list[tuple[str, str, str]]:
        items = self.items() if items is None else items
        return [(i, e, a) for i in items for e in ENVS for a in ACTIONS if (i, e, a) not in self.counts]

    def rates(self, item, env) -> np.ndarray:
        missing = [(item, str(env), a) for a in ACTIONS if (item, str(env), a) not in self.counts]
        if missing:
            raise CoverageError(missing)
        return np.array([self.rate(item, env, a) for a in ACTIONS])

    def best(self, item, env) -> tuple[int, float]:
        r = self.rates(item, env)
        return int(np.argmax(r)), float(r.max())


def success_table(records: Iterable[TrialRecord]) -> SuccessTable:
    counts: dict[tuple[str, str, str], list[int]] = defaultdict(lambda: [0, 0])
    cats: dict[str, str | None] = {}
    for r in records:
        if r.outcome == "discard":
            continue
        c = counts[(r.item, r.env, r.action)]
        c[0 if r.outcome == "success" else 1] += 1
        cats.setdefault(r.item, r.category)
    if not counts:
        raise ValueError("no usable trials after discarding")
    return SuccessTable({k: (v[0], v[1]) for k, v in sorted(counts.items())}, cats)


def target_vector(table: SuccessTable, item: str, env, axis_gt) -> np.ndarray:
    """[x0, y0, x1, y1 (crop-normalised, smaller-x first), 6 rates in ACTIONS order]."""
    axis = np.asarray(axis_gt, dtype=np.float64).reshape(4)
    if (axis[2], axis[3]) < (axis[0], axis[1]):
        axis = axis[[2, 3, 0, 1]]
    return np.concatenate([axis, table.rates(item, env)])


# -------------------------------------------------------------------- fisher

def fisher_exact(table, max_total: int = MAX_FISHER_TOTAL) -> float:
    """Two-sided Fisher exact test for homogeneity of a 2xN table (N = 2 or 3).

    Row 0 counts successes, row 1 failures, columns are the compared
    conditions. The p-value sums the probability of every table with the same
    margins that is no more likely than the observed one. Probabilities are
    compared as exact integers, so ties are never lost to rounding.
    """
    t = np.asarray(table, dtype=np.int64)
    if t.ndim != 2 or t.shape[0] != 2 or t.shape[1] not in (2, 3):
        raise ValueError(f"expected a 2x2 or 2x3 table, got shape {t.shape}")
    if np.any(t < 0):
        raise ValueError("counts must be non-negative")
    total = int(t.sum())
    if total > max_total:
        raise EnumerationLimitError(f"table total {total} exceeds enumeration bound {max_total}")
    cols = [int(c) for c in t.sum(axis=0)]
    k = int(t[0].sum())  # successes
    # P(table) = prod_j C(col_j, top_j) / C(total, k); compare the integer numerators
    denom = math.comb(total, k)
    if denom == 0:
        return 1.0

    def weight(top) -> int:
        w = 1
        for n, x in zip(cols, top):
            w *= math.comb(n, x)
        return w

    observed = weight([int(x) for x in t[0]])
    acc = 0
    if len(cols) == 2:
        for x in range(max(0, k - cols[1]), min(cols[0], k) + 1):
            w = weight((x, k - x))
            if w <= observed:
                acc += w
    else:
        for x in range(0, min(cols[0], k) + 1):
            for y in range(0, min(cols[1], k - x) + 1):
                z = k - x - y
                if z > cols[2]:
                    continue
                w = weight((x, y, z))
                if w <= observed:
                    acc += w
    return min(1.0, acc / denom)


@dataclass
class GateResult:
    p_value: float
    significant: bool
    significant_uncorrected: bool


def bonferroni_threshold(alpha: float = 0.05, m: int = 21) -> float:
    if m < 1:
        raise ValueError("m must be >= 1")
    return alpha / m


def bonferroni_gate(p_values: Sequence[float], alpha: float = 0.05, m: int | None = None) -> list[GateResult]:
    """Flag p < alpha/m (corrected) and p < alpha (uncorrected); m defaults to len(p_values)."""
    m = len(p_values) if m is None else m
    thr = bonferroni_threshold(alpha, m)
    return [GateResult(float(p), p < thr, p < alpha) for p in p_values]


# ------------------------------------------------------------ hypothesis specs

@dataclass
class Hypothesis:
    """Pool trials matching ``where`` and compare groups of ``factor`` levels.

    ``factor`` is one of env, macro, roll, item, category; each entry of
    ``groups`` is a list of levels pooled into one column.
    """

    name: str
    factor: str
    groups: list[list[str]]
    where: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_json(cls, d: Mapping) -> "Hypothesis":
        return cls(d["name"], d["factor"], [list(map(str, g)) for g in d["groups"]],
                   {k: list(map(str, v)) for k, v in d.get("where", {}).items()})


def _field(r: TrialRecord, name: str) -> str:
    return str(getattr(r, name))


def contingency(records: Iterable[TrialRecord], hyp: Hypothesis) -> np.ndarray:
    table = np.zeros((2, len(hyp.groups)), dtype=np.int64)
    lookup = {lvl: j for j, g in enumerate(hyp.groups) for lvl in g}
    for r in records:
        if r.outcome == "discard":
            continue
        if any(_field(r, k) not in v for k, v in hyp.where.items()):
            continue
        j = lookup.get(_field(r, hyp.factor))
        if j is None:
            continue
        table[0 if r.outcome == "success" else 1, j] += 1
    return table


def default_hypotheses(categories: Sequence[str] = CATEGORIES) -> list[Hypothesis]:
    """Per category: environment effect, pitch (macro) effect, roll effect."""
    out = []
    for c in categories:
        out.append(Hypothesis(f"{c}: env ISO/WALL/STACK", "env", [["ISO"], ["WALL"], ["STACK"]], {"category": [c]}))
        out.append(Hypothesis(f"{c}: macro VS/TV/TA", "macro", [["VS"], ["TV"], ["TA"]], {"category": [c]}))
        out.append(Hypothesis(f"{c}: roll 0/90", "roll", [["0"], ["90"]], {"category": [c]}))
    return out


def analyze(records: Sequence[TrialRecord], hypotheses: Sequence[Hypothesis], alpha: float = 0.05,
            m: int | None = None, max_total: int = MAX_FISHER_TOTAL) -> dict:
    """Fisher test per hypothesis plus Bonferroni gate; JSON-ready report."""
    m = len(hypotheses) if m is None else m
    rows = []
    for h in hypotheses:
        t = contingency(records, h)
        if np.any(t.sum(axis=0) == 0) or np.any(t.sum(axis=1) == 0):
            p = 1.0
            note = "degenerate margins"
        elif t.sum() > max_total:
            raise EnumerationLimitError(f"{h.name}: pooled total {int(t.sum())} exceeds {max_total}")
        else:
            p, note = fisher_exact(t, max_total), ""
        rows.append({"name": h.name, "factor": h.factor, "groups": h.groups, "where": h.where,
                     "table": t.tolist(), "p_value": p, "note": note})
    gates = bonferroni_gate([r["p_value"] for r in rows], alpha, m)
    for r, g in zip(rows, gates):
        r["significant_corrected"] = g.significant
        r["significant_uncorrected"] = g.significant_uncorrected
    return {"alpha": alpha, "m": m, "max_total": max_total, "corrected_threshold": bonferroni_threshold(alpha, m), "tests": rows}


def load_hypotheses(path) -> list[Hypothesis]:
    return [Hypothesis.from_json(d) for d in json.loads(Path(path).read_text())]


# --------------------------------------------------------------- evaluation

@dataclass
class ProposalScore:
    mean: float
    stderr: float
    benchmark: float
    regret: float
    n: int


def expected_success_of_proposal(samples: Sequence[tuple[str, str, np.ndarray]], truth: SuccessTable) -> ProposalScore:
    """``samples`` are (item, env, predicted 6 rates); score the argmax against true rates."""
    if not samples:
        raise ValueError("no samples")
    got, best = [], []
    for item, env, rates in samples:
        try:
            true = truth.rates(item, env)
        except (CoverageError, KeyError) as exc:
            raise KeyError(f"no ground truth for ({item}, {env})") from exc
        got.append(true[int(np.argmax(rates))])
        best.append(true.max())
    got_a = np.array(got)
    stderr = float(got_a.std(ddof=1) / math.sqrt(len(got_a))) if len(got_a) > 1 else 0.0
    bench = float(np.mean(best))
    return ProposalScore(float(got_a.mean()), stderr, bench, bench - float(got_a.mean()), len(got_a))


def random_proposal_expectation(samples: Sequence[tuple[str, str]], truth: SuccessTable) -> float:
    """Expected success when the action is drawn uniformly: the mean of the 6 true rates."""
    return float(np.mean([truth.rates(i, e).mean() for i, e in samples]))


def softmax_l2(u, v) -> float:
    return float(np.linalg.norm(softmax(u) - softmax(v)))


@dataclass
class SimilarityReport:
    nearest: dict[str, str]  # ooc item -> nearest reference item
    nearest_group: dict[str, str]  # ooc item -> group with the highest normalised affinity
    groups: list[str]
    matrix: np.ndarray  # ooc rows x groups, each row min-max normalised to [0, 1]
    distances: dict[str, dict[str, float]]

    def to_json(self) -> dict:
        return {"nearest": self.nearest, "nearest_group": self.nearest_group, "groups": self.groups,
                "matrix": self.matrix.tolist(), "distances": self.distances}


def ooc_similarity(predictions: Mapping[str, Sequence[float]], truths: Mapping[str, Sequence[float]],
                   groups: Mapping[str, str]) -> SimilarityReport:
    """Nearest reference item under softmax-L2 and a per-group affinity matrix.

    ``groups`` maps every reference item to its group. Affinity is the
    negative distance; a group's entry is its best (max) member affinity and
    each row is min-max normalised.
    """
    names = sorted(set(groups.values()))
    missing = [i for i in truths if i not in groups]
    if missing:
        raise ValueError(f"reference items without a group: {missing}")
    empty = [g for g in names if not any(groups[i] == g for i in truths)]
    if empty:
        raise ValueError(f"empty groups: {empty}")
    matrix = np.zeros((len(predictions), len(names)))
    nearest, nearest_group, dists = {}, {}, {}
    for row, (ooc, pred) in enumerate(predictions.items()):
        if len(pred) != 6:
            raise ValueError(f"{ooc}: prediction vector must have 6 rates")
        d = {ref: softmax_l2(pred, vec) for ref, vec in truths.items()}
        dists[ooc] = d
        nearest[ooc] = min(d, key=lambda k: (d[k], k))
        aff = np.array([max(-d[ref] for ref in d if groups[ref] == g) for g in names])
        span = aff.max() - aff.min()
        matrix[row] = (aff - aff.min()) / span if span > 0 else np.ones_like(aff)
        nearest_group[ooc] = names[int(np.argmax(matrix[row]))]
    return SimilarityReport(nearest, nearest_group, names, matrix, dists)
