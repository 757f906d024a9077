"""PAD metrics: APCER, BPCER, ACER, ROC/AUC and fixed-APCER operating points.

Scores are oriented so that higher means more live. A sample is accepted as
bona fide when ``score >= threshold`` (ties accept). AUC is accumulated on
integer counts so it equals the Mann-Whitney statistic exactly.
"""

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from .errors import UsageError

CLARKSON_SPECIES = ("ecoflex", "photopaper", "playdoh", "woodglue", "synthetic")
COLFISPOOF_SPECIES = (
    "dragonskin",
    "ecoflex",
    "gelafix",
    "gelatin",
    "glue",
    "knetosil",
    "latex",
    "modelling-clay",
    "mouldable-glue",
    "paper-printout",
    "playdoh",
    "silly-putty",
)


def _scores(values, what):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise UsageError(f"{what} score list is empty")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{what} scores must be finite")
    return arr


@dataclass
class ScoreSet:
    bona_fide: np.ndarray
    attacks: dict  # species -> scores

    def __post_init__(self):
        self.bona_fide = np.asarray(self.bona_fide, dtype=np.float64).reshape(-1)
        self.attacks = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in self.attacks.items()}
        for name, arr in [("bona fide", self.bona_fide), *self.attacks.items()]:
            if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
                raise UsageError(f"{name} scores must be finite and lie in [0, 1]")

    @property
    def species(self):
        return [k for k in self.attacks if self.attacks[k].size]

    def attack_scores(self):
        parts = [self.attacks[k] for k in self.species]
        return np.concatenate(parts) if parts else np.zeros(0)


def apcer(attack_scores, threshold):
    """Fraction of attacks accepted as bona fide (score >= threshold)."""
    a = _scores(attack_scores, "attack")
    return np.count_nonzero(a >= threshold) / a.size


def bpcer(bona_fide_scores, threshold):
    """Fraction of bona fide presentations rejected (score < threshold)."""
    b = _scores(bona_fide_scores, "bona fide")
    return np.count_nonzero(b < threshold) / b.size


def acer(apcer_value, bpcer_value):
    return (apcer_value + bpcer_value) / 2


@dataclass
class RocCurve:
    thresholds: np.ndarray  # decreasing, starts at +inf and ends at -inf
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self):
        rows = ["threshold,fpr,tpr\n"]
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            rows.append(f"{_fmt(t)},{_fmt(f)},{_fmt(p)}\n")
        return "".join(rows)


def _fmt(x):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _roc_counts(bona, attack):
    """Distinct thresholds (descending) with cumulative accept counts."""
    values = np.unique(np.concatenate([bona, attack]))[::-1]
    b_sorted = np.sort(bona)
    a_sorted = np.sort(attack)
    # count of scores >= t
    tp = b_sorted.size - np.searchsorted(b_sorted, values, side="left")
    fp = a_sorted.size - np.searchsorted(a_sorted, values, side="left")
    return values, tp, fp


def roc(scoreset):
    bona = scoreset.bona_fide
    attack = scoreset.attack_scores()
    if bona.size == 0 or attack.size == 0:
        raise UsageError("ROC needs at least one bona fide and one attack score")
    values, tp, fp = _roc_counts(bona, attack)
    tp = np.concatenate([[0], tp, [bona.size]])
    fp = np.concatenate([[0], fp, [attack.size]])
    thresholds = np.concatenate([[np.inf], values, [-np.inf]])
    # trapezoid in integer units: sum d(fp) * (tp_i + tp_{i-1}), over 2 * nb * na
    twice_area = int(np.sum(np.diff(fp).astype(np.int64) * (tp[1:] + tp[:-1]).astype(np.int64)))
    auc = twice_area / (2 * bona.size * attack.size)
    return RocCurve(thresholds, fp / attack.size, tp / bona.size, auc)


def auc(scoreset):
    return roc(scoreset).auc


@dataclass
class OperatingPoint:
    target_apcer: float
    threshold: float
    apcer: float
    bpcer: float
    attainable: bool


def bpcer_at_apcer(scoreset, target):
    """BPCER at the smallest threshold whose pooled APCER is <= ``target``.

    Candidate thresholds are the observed scores. When no observed score
    meets the target, everything must be rejected: the point is returned with
    BPCER 1 and ``attainable=False``.
    """
    if not 0.0 < target < 1.0:
        raise UsageError(f"target APCER must lie in (0, 1), got {target}")
    bona = _scores(scoreset.bona_fide, "bona fide")
    attack = _scores(scoreset.attack_scores(), "attack")
    values, tp, fp = _roc_counts(bona, attack)
    # fp grows as the threshold falls, so the admissible set is a prefix
    ok = fp / attack.size <= target
    if not ok[0]:
        return OperatingPoint(target, math.inf, 0.0, 1.0, False)
    i = np.count_nonzero(ok) - 1
    t = float(values[i])
    a_rate = int(fp[i]) / attack.size
    b_rate = (bona.size - int(tp[i])) / bona.size
    return OperatingPoint(target, t, a_rate, b_rate, True)


def select_threshold(scoreset):
    """Threshold minimizing ACER on ``scoreset``.

    All thresholds in ``(u_{i-1}, u_i]`` between consecutive distinct scores
    give the same decisions. The widest run of optimal candidates is chosen
    and the midpoint of its interval returned (lowest run on ties).
    """
    bona = _scores(scoreset.bona_fide, "bona fide")
    species = scoreset.species
    if not species:
        raise UsageError("threshold selection needs attack scores")
    values = np.unique(np.concatenate([bona, scoreset.attack_scores()]))
    # candidate i accepts scores >= values[i]; candidate len(values) rejects everything
    cands = np.concatenate([values, [np.inf]])
    b_sorted = np.sort(bona)
    bp = np.searchsorted(b_sorted, cands, side="left") / bona.size
    ap = np.zeros(cands.size)
    for k in species:
        a_sorted = np.sort(scoreset.attacks[k])
        ap += (a_sorted.size - np.searchsorted(a_sorted, cands, side="left")) / a_sorted.size
    ap /= len(species)
    err = (ap + bp) / 2
    best = err.min()
    opt = err == best
    # runs of consecutive optimal candidates
    runs, start = [], None
    for i, flag in enumerate(opt):
        if flag and start is None:
            start = i
        if not flag and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, opt.size - 1))

    def bounds(run):
        lo_idx, hi_idx = run
        lo = values[lo_idx - 1] if lo_idx > 0 else min(0.0, values[0])
        if hi_idx < values.size:
            hi = values[hi_idx]
        else:
            hi = max(1.0, np.nextafter(values[-1], np.inf))
        return float(lo), float(hi)

    lo, hi = bounds(max(runs, key=lambda r: (bounds(r)[1] - bounds(r)[0], -r[0])))
    t = (lo + hi) / 2
    # every t in (lo, hi] gives the optimal decisions
    return t if lo < t <= hi else hi


@dataclass
class EvalReport:
    per_pai_apcer: dict
    bpcer: float
    apcer: float
    acer: float
    auc: float
    threshold: float
    bpcer_at_apcer: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "acer": self.acer,
            "apcer": self.apcer,
            "auc": self.auc,
            "bpcer": self.bpcer,
            "threshold": self.threshold,
        }
        for k, v in self.per_pai_apcer.items():
            out[f"apcer.{k}"] = v
        for k, v in self.counts.items():
            out[f"count.{k}"] = v
        for target, op in self.bpcer_at_apcer.items():
            out[f"bpcer_at_apcer.{float(target)!r}"] = op.bpcer
            out[f"bpcer_at_apcer.{float(target)!r}.attainable"] = op.attainable
            out[f"bpcer_at_apcer.{float(target)!r}.threshold"] = op.threshold
        return out

    def to_kv(self):
        d = self.to_dict()
        lines = []
        for k in sorted(d):
            v = d[k]
            if isinstance(v, (bool, np.bool_)):
                text = "true" if v else "false"
            elif isinstance(v, float):
                text = _fmt(v)
            else:
                text = str(v)
            lines.append(f"{k} = {text}\n")
        return "".join(lines)

    def render(self, species_order=None):
        """Aligned text table of percentages (half-even, 2 decimals)."""
        names = ordered_species(self.per_pai_apcer, species_order)
        rows = [("APCER%", "")] + [(n.upper(), pct(self.per_pai_apcer[n])) for n in names]
        rows += [("BPCER%", ""), ("LIVE", pct(self.bpcer))]
        rows += [("SUMMARY%", ""), ("APCER", pct(self.apcer)), ("BPCER", pct(self.bpcer))]
        rows += [("ACER", pct(self.acer)), ("AUC", f"{self.auc:.4f}")]
        for target, op in self.bpcer_at_apcer.items():
            label = f"BPCER@APCER={pct(target)}"
            rows.append((label, pct(op.bpcer) + ("" if op.attainable else " (unattainable)")))
        width = max(len(r[0]) for r in rows)
        out = []
        for name, value in rows:
            if not value:
                out.append(f"{name}\n")
            else:
                out.append(f"  {name.ljust(width)}  {value.rjust(8)}\n")
        return "".join(out)


def pct(rate, places=2):
    """Format a rate as a percentage string, rounding half to even."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(rate) * 100)).quantize(q, rounding=ROUND_HALF_EVEN))


def ordered_species(species, order=None):
    order = list(order) if order else list(CLARKSON_SPECIES) + list(COLFISPOOF_SPECIES)
    rank = {name: i for i, name in enumerate(dict.fromkeys(order))}
    return sorted(species, key=lambda s: (rank.get(s, len(rank)), s))


AGGREGATIONS = ("unweighted", "weighted")


def evaluate(scoreset, threshold=0.5, bpcer_at=(), aggregation="unweighted"):
    """Per-PAI APCER, BPCER, overall APCER, ACER and AUC at ``threshold``.

    The overall APCER is the plain mean over species present by default;
    ``aggregation="weighted"`` weights each species by its sample count.
    """
    species = scoreset.species
    if not species:
        raise UsageError("evaluation needs attack scores")
    if aggregation not in AGGREGATIONS:
        raise UsageError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    per = {k: apcer(scoreset.attacks[k], threshold) for k in ordered_species(species)}
    if aggregation == "unweighted":
        overall = sum(per.values()) / len(per)
    else:
        overall = apcer(scoreset.attack_scores(), threshold)
    b = bpcer(scoreset.bona_fide, threshold)
    ops = {float(t): bpcer_at_apcer(scoreset, float(t)) for t in bpcer_at}
    counts = {"bona_fide": int(scoreset.bona_fide.size)}
    counts.update({k: int(scoreset.attacks[k].size) for k in per})
    return EvalReport(
        per_pai_apcer=per,
        bpcer=b,
        apcer=overall,
        acer=acer(overall, b),
        auc=roc(scoreset).auc,
        threshold=float(threshold),
        bpcer_at_apcer=ops,
        counts=counts,
    )


# ---------------------------------------------------------------------------
# score files: sample_id,label,pai_species,score


def write_scores(path, rows):
    """``rows``: iterable of (sample_id, label, pai_species or None, score)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("sample_id,label,pai_species,score\n")
        for sid, label, species, s in rows:
            fh.write(f"{sid},{label},{species or ''},{float(s)!r}\n")


def read_scores(path):
    import csv

    bona, attacks = [], {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["sample_id", "label", "pai_species", "score"]:
            raise UsageError(f"{path}: bad score file header {reader.fieldnames}")
        for lineno, row in enumerate(reader, 2):
            s = float(row["score"])
            if row["label"] == "bona_fide":
                bona.append(s)
            elif row["label"] == "attack":
                if not row["pai_species"]:
                    raise UsageError(f"{path}:{lineno}: attack row without pai_species")
                attacks.setdefault(row["pai_species"], []).append(s)
            else:
                raise UsageError(f"{path}:{lineno}: unknown label {row['label']!r}")
    return ScoreSet(bona, attacks)
