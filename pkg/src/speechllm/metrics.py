"""Character error rate, per-dialect aggregation and the evaluation harness."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from speechllm import kernels
from speechllm.errors import UndefinedRateError


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self):
        if self.ref_length == 0:
            raise UndefinedRateError("CER is undefined for an empty reference")
        return self.errors / self.ref_length


def _codes(text):
    return np.fromiter((ord(c) for c in text), dtype=np.int64, count=len(text))


def cer(hyp, ref):
    """Character-level Levenshtein alignment of ``hyp`` against ``ref`` with unit costs."""
    if len(ref) == 0:
        raise UndefinedRateError("CER is undefined for an empty reference")
    _, s, i, d = kernels.edit_ops(_codes(ref), _codes(hyp))
    return EditCounts(int(s), int(i), int(d), len(ref))


@dataclass
class UtteranceResult:
    utt_id: str
    dialect: str
    ref: str
    hyp: str
    counts: EditCounts
    truncated: bool = False


@dataclass
class CerReport:
    """Micro-averaged CER: summed edit operations over summed reference lengths."""

    utterances: list = field(default_factory=list)

    @staticmethod
    def _rate(results):
        n = sum(r.counts.ref_length for r in results)
        if n == 0:
            raise UndefinedRateError("no reference characters to score")
        return sum(r.counts.errors for r in results) / n

    @property
    def overall(self):
        return self._rate(self.utterances)

    def by_dialect(self):
        groups = defaultdict(list)
        for r in self.utterances:
            groups[r.dialect].append(r)
        return {tag: self._rate(rs) for tag, rs in sorted(groups.items())}

    @property
    def n_truncated(self):
        return sum(r.truncated for r in self.utterances)

    def totals(self):
        out = {"S": 0, "I": 0, "D": 0, "N": 0}
        for r in self.utterances:
            out["S"] += r.counts.substitutions
            out["I"] += r.counts.insertions
            out["D"] += r.counts.deletions
            out["N"] += r.counts.ref_length
        return out

    def merge(self, other):
        return CerReport(self.utterances + other.utterances)

    def to_dict(self):
        return {
            "overall": self.overall,
            "by_dialect": self.by_dialect(),
            "totals": self.totals(),
            "n_utterances": len(self.utterances),
            "n_truncated": self.n_truncated,
            "utterances": [
                {**{k: v for k, v in asdict(r).items() if k != "counts"}, **asdict(r.counts)} for r in self.utterances
            ],
        }

    def format_table(self):
        rows = [("dialect", "CER%", "S", "I", "D", "N", "utts")]
        groups = defaultdict(list)
        for r in self.utterances:
            groups[r.dialect].append(r)
        for tag, rs in sorted(groups.items()) + [("overall", self.utterances)]:
            sub = CerReport(rs)
            t = sub.totals()
            rows.append((tag, f"{100 * sub.overall:.2f}", t["S"], t["I"], t["D"], t["N"], len(rs)))
        return format_rows(rows)


def _numeric(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def format_rows(rows):
    """Plain-text table; numeric columns are right-aligned, text columns left-aligned."""
    rows = [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    right = [any(_numeric(r[i]) for r in rows[1:]) for i in range(len(widths))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.rjust(w) if rt else c.ljust(w) for c, w, rt in zip(r, widths, right)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def evaluate(model, dataset, max_len=None, batch_size=64):
    """Greedy-decode every utterance and score it; truncated generations are counted, not fatal."""
    from speechllm.model import collate

    dataset = list(dataset)
    if max_len is None:
        max_len = max(len(u.transcript) for u in dataset) + 5 if dataset else 1
    # length-sorted batches waste less padding; results are re-ordered afterwards
    order = sorted(range(len(dataset)), key=lambda i: dataset[i].features.shape[0])
    results = [None] * len(dataset)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batch = collate([dataset[i] for i in idx], model.tokenizer, model.dtype)
        outs = model.transcribe(batch, max_len)
        for i, seq in zip(idx, outs):
            u = dataset[i]
            hyp = model.tokenizer.decode(seq.ids)
            results[i] = UtteranceResult(u.utt_id, u.dialect, u.transcript, hyp, cer(hyp, u.transcript), seq.truncated)
    return CerReport(results)
