"""Run statistics: detection counts, STP ratio, attack success rate, and
Fisher's exact test / odds ratio on 2x2 count tables."""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .detector import PEDESTRIAN, STOP_SIGN
from .harness import classify_success

FINITE, INFINITE, ZERO, UNDEFINED = "", "infinite", "zero", "undefined"


@dataclass(frozen=True)
class ContingencyTable:
    """Rows are two scenarios; columns (stop-sign, pedestrian) or (success, failure)."""
    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for v in (self.a, self.b, self.c, self.d):
            if int(v) != v or v < 0:
                raise ValueError("table entries must be non-negative integers")
        if self.a + self.b + self.c + self.d == 0:
            raise ValueError("table is empty")

    @classmethod
    def of(cls, rows):
        (a, b), (c, d) = rows
        return cls(int(a), int(b), int(c), int(d))

    def row_swapped(self):
        return ContingencyTable(self.c, self.d, self.a, self.b)

    def col_swapped(self):
        return ContingencyTable(self.b, self.a, self.d, self.c)


def count_detections(record):
    """(frames with a stop-sign detection, frames with a pedestrian detection)."""
    stop = ped = 0
    for f in record.frames:
        classes = {int(d[0]) for d in f["detections"]}
        stop += STOP_SIGN in classes
        ped += PEDESTRIAN in classes
    return stop, ped


def stp(stop_mean, ped_mean):
    """(ratio, flag); a zero pedestrian mean gives inf, both zero is undefined."""
    if ped_mean == 0:
        return (float("nan"), UNDEFINED) if stop_mean == 0 else (float("inf"), INFINITE)
    return stop_mean / ped_mean, FINITE


def asr(records):
    records = list(records)
    if not records:
        raise ValueError("no runs")
    return sum(bool(classify_success(r)) for r in records) / len(records)


def _log_hypergeom(x, r1, c1, n):
    """log P(top-left = x) for margins row1 = r1, col1 = c1, total n."""
    lf = lambda k: math.lgamma(k + 1)
    return (lf(r1) + lf(n - r1) + lf(c1) + lf(n - c1)
            - lf(n) - lf(x) - lf(r1 - x) - lf(c1 - x) - lf(n - r1 - c1 + x))


def fisher_exact(table, slack=1e-7):
    """Two-sided p: total probability of tables no more likely than the observed one."""
    t = table if isinstance(table, ContingencyTable) else ContingencyTable.of(table)
    r1, c1 = t.a + t.b, t.a + t.c
    n = t.a + t.b + t.c + t.d
    lo, hi = max(0, r1 + c1 - n), min(r1, c1)
    logs = np.array([_log_hypergeom(x, r1, c1, n) for x in range(lo, hi + 1)])
    observed = logs[t.a - lo]
    keep = logs <= observed + math.log1p(slack)
    m = logs.max()
    p = math.fsum(np.exp(logs[keep] - m)) * math.exp(m)
    return min(1.0, p)


def odds_ratio(table):
    """(a*d / (b*c), flag) with flags for zero cells."""
    t = table if isinstance(table, ContingencyTable) else ContingencyTable.of(table)
    num, den = t.a * t.d, t.b * t.c
    if den == 0:
        return (float("nan"), UNDEFINED) if num == 0 else (float("inf"), INFINITE)
    if num == 0:
        return 0.0, ZERO
    return num / den, FINITE


@dataclass
class ScenarioSummary:
    config: str
    dynamic: bool
    stop_counts: list = field(default_factory=list)
    ped_counts: list = field(default_factory=list)
    successes: list = field(default_factory=list)

    @classmethod
    def from_records(cls, config, dynamic, records):
        s = cls(config, dynamic)
        for r in records:
            st, pe = count_detections(r)
            s.stop_counts.append(st)
            s.ped_counts.append(pe)
            s.successes.append(bool(classify_success(r)))
        return s

    @staticmethod
    def _std(values, ddof=1):
        v = np.asarray(values, dtype=np.float64)
        return float(v.std(ddof=ddof)) if len(v) > ddof else 0.0

    @property
    def stop_mean(self):
        return float(np.mean(self.stop_counts)) if self.stop_counts else 0.0

    @property
    def ped_mean(self):
        return float(np.mean(self.ped_counts)) if self.ped_counts else 0.0

    @property
    def stop_std(self):
        return self._std(self.stop_counts)

    @property
    def ped_std(self):
        return self._std(self.ped_counts)

    @property
    def stp(self):
        return stp(self.stop_mean, self.ped_mean)[0]

    @property
    def asr(self):
        if not self.successes:
            raise ValueError("no runs")
        return sum(self.successes) / len(self.successes)


def build_model_level_table(summary_a, summary_b):
    """Rows (A, B); columns (total stop-sign, total pedestrian) over the stored runs."""
    totals = []
    for s in (summary_a, summary_b):
        for counts in (s.stop_counts, s.ped_counts):
            total = sum(counts)
            if int(total) != total:
                raise ValueError("totals must come from integer per-run counts")
            totals.append(int(total))
    return ContingencyTable(*totals)


DEFAULT_PAIRS = (("patch-both", "patch"), ("camellia-both", "camellia"),
                 ("collusion-benign", "single-benign"))

SUMMARY_FIELDS = ("config", "dynamic", "stop_mean", "stop_std", "ped_mean", "ped_std", "stp", "asr")
FISHER_FIELDS = ("pair", "odds_ratio", "p_value", "significant")


def summary_rows(summaries):
    return [{"config": s.config, "dynamic": int(s.dynamic), "stop_mean": s.stop_mean,
             "stop_std": s.stop_std, "ped_mean": s.ped_mean, "ped_std": s.ped_std,
             "stp": s.stp, "asr": s.asr} for s in summaries]


def fisher_rows(summaries, pairs=DEFAULT_PAIRS, alpha=0.05):
    by_key = {(s.config, s.dynamic): s for s in summaries}
    rows = []
    for dynamic in (True, False):
        for a, b in pairs:
            if (a, dynamic) not in by_key or (b, dynamic) not in by_key:
                continue
            pair = f"{a} vs {b} ({'dynamic' if dynamic else 'static'})"
            try:
                table = build_model_level_table(by_key[(a, dynamic)], by_key[(b, dynamic)])
            except ValueError:
                # no detections at all in either scenario: nothing to test
                rows.append({"pair": pair, "odds_ratio": float("nan"), "p_value": float("nan"),
                             "significant": 0})
                continue
            ratio, _ = odds_ratio(table)
            p = fisher_exact(table)
            rows.append({"pair": pair, "odds_ratio": ratio, "p_value": p, "significant": int(p < alpha)})
    return rows


def _csv_text(fields, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def summary_csv(summaries):
    return _csv_text(SUMMARY_FIELDS, summary_rows(summaries))


def fisher_csv(summaries, pairs=DEFAULT_PAIRS):
    return _csv_text(FISHER_FIELDS, fisher_rows(summaries, pairs))


def parse_csv(text):
    """Rows as dicts with numeric fields converted (ints stay ints)."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        conv = {}
        for k, v in row.items():
            try:
                conv[k] = int(v)
            except ValueError:
                try:
                    conv[k] = float(v)
                except ValueError:
                    conv[k] = v
        out.append(conv)
    return out


def _fmt(v, digits=2):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, float) and math.isnan(v):
        return "n/a"
    return f"{v:.{digits}f}"


def report(summaries, pairs=DEFAULT_PAIRS):
    """Aligned-text tables: system ASR, model-level counts with STP, and Fisher/OR rows."""
    lines = ["System-level ASR", f"{'configuration':<20}{'static':>10}{'dynamic':>10}"]
    order = []
    for s in summaries:
        if s.config not in order:
            order.append(s.config)
    by_key = {(s.config, s.dynamic): s for s in summaries}
    for name in order:
        cells = [_fmt(by_key[(name, d)].asr) if (name, d) in by_key else "-" for d in (False, True)]
        lines.append(f"{name:<20}{cells[0]:>10}{cells[1]:>10}")
    lines += ["", "Model-level detections per run",
              f"{'configuration':<28}{'stop mean':>11}{'stop std':>10}{'ped mean':>10}{'ped std':>9}{'STP':>8}"]
    for s in summaries:
        label = f"{s.config} ({'dynamic' if s.dynamic else 'static'})"
        lines.append(f"{label:<28}{_fmt(s.stop_mean):>11}{_fmt(s.stop_std):>10}"
                     f"{_fmt(s.ped_mean):>10}{_fmt(s.ped_std):>9}{_fmt(s.stp):>8}")
    rows = fisher_rows(summaries, pairs)
    if rows:
        lines += ["", "Collusion vs single (model level)",
                  f"{'pair':<48}{'OR':>10}{'p':>12}{'':>3}"]
        for r in rows:
            lines.append(f"{r['pair']:<48}{_fmt(r['odds_ratio'], 4):>10}{r['p_value']:>12.4g}"
                         f"{' *' if r['significant'] else '':>3}")
    return "\n".join(lines) + "\n"
