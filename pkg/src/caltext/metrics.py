"""Character and word error rates via minimal edit distance.

Distances are computed for converting the target sequence into the output
sequence: insertions add symbols the target lacks, deletions drop symbols
the output lacks. Among minimal alignments the counts follow a fixed
preference at every cell: substitution (or match) over insertion over
deletion. Rates are (I + S + D) / N * 100 with N the target length; values
above 100 are possible and are not clamped.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class EditCounts:
    insertions: int
    substitutions: int
    deletions: int

    def __post_init__(self):
        if min(self.insertions, self.substitutions, self.deletions) < 0:
            raise ValueError("edit counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.insertions + self.substitutions + self.deletions


def levenshtein(target, output) -> EditCounts:
    n, m = len(target), len(output)
    if n == 0:
        return EditCounts(insertions=m, substitutions=0, deletions=0)
    if m == 0:
        return EditCounts(insertions=0, substitutions=0, deletions=n)

    # each cell carries (total, insertions, substitutions, deletions) under
    # the substitution > insertion > deletion preference, resolved eagerly
    prev = [(j, j, 0, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        t_ch = target[i - 1]
        row = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            diag = prev[j - 1]
            left = row[j - 1]
            up = prev[j]
            sub_cost = 0 if t_ch == output[j - 1] else 1
            best = diag[0] + sub_cost
            ins = left[0] + 1
            dele = up[0] + 1
            if best <= ins and best <= dele:
                cell = (best, diag[1], diag[2] + sub_cost, diag[3])
            elif ins <= dele:
                cell = (ins, left[1] + 1, left[2], left[3])
            else:
                cell = (dele, up[1], up[2], up[3] + 1)
            row.append(cell)
        prev = row

    total, ins, subs, dels = prev[m]
    counts = EditCounts(insertions=ins, substitutions=subs, deletions=dels)
    assert counts.total == total
    return counts


def cer(target: str, output: str) -> float:
    """Character error rate in percent; target must be nonempty."""
    if len(target) == 0:
        raise ValueError("character error rate undefined for an empty target")
    return levenshtein(target, output).total / len(target) * 100.0


def wer(target: str, output: str) -> float:
    """Word error rate in percent over whitespace-run tokens."""
    target_words = target.split()
    if not target_words:
        raise ValueError("word error rate undefined for a target with no words")
    return levenshtein(target_words, output.split()).total / len(target_words) * 100.0


@dataclass(frozen=True)
class LineResult:
    line_id: str
    target_length: int
    counts: EditCounts
    cer: float
    wer: float  # nan when the target has no words


@dataclass(frozen=True)
class CorpusReport:
    lines: tuple
    excluded: tuple  # line ids skipped for empty targets
    aggregate_cer: float
    aggregate_wer: float
    mean_line_cer: float
    mean_line_wer: float

    @property
    def character_accuracy(self) -> float:
        return 100.0 - self.aggregate_cer

    @property
    def word_accuracy(self) -> float:
        return 100.0 - self.aggregate_wer

    def to_tsv(self) -> str:
        rows = ["line_id\tN\tI\tS\tD\tcer\twer"]
        for line in self.lines:
            c = line.counts
            rows.append(f"{line.line_id}\t{line.target_length}\t{c.insertions}"
                        f"\t{c.substitutions}\t{c.deletions}"
                        f"\t{line.cer:.4f}\t{line.wer:.4f}")
        rows.append(f"ALL\t-\t-\t-\t-\t{self.aggregate_cer:.4f}"
                    f"\t{self.aggregate_wer:.4f}")
        return "\n".join(rows) + "\n"


def corpus_report(pairs, line_ids=None) -> CorpusReport:
    """Micro-averaged corpus rates over (target, output) pairs.

    Empty-target lines are excluded from every aggregate and reported in
    `excluded`. Mean-of-line rates are exposed alongside the micro-averages.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus report needs at least one line")
    if line_ids is None:
        line_ids = [str(i) for i in range(len(pairs))]
    if len(line_ids) != len(pairs):
        raise ValueError("line_ids length does not match pairs")

    lines, excluded = [], []
    char_edits = char_total = 0
    word_edits = word_total = 0
    line_cers, line_wers = [], []
    for line_id, (target, output) in zip(line_ids, pairs):
        if len(target) == 0:
            excluded.append(line_id)
            continue
        counts = levenshtein(target, output)
        line_cer = counts.total / len(target) * 100.0
        char_edits += counts.total
        char_total += len(target)
        line_cers.append(line_cer)

        target_words = target.split()
        if target_words:
            word_counts = levenshtein(target_words, output.split())
            line_wer = word_counts.total / len(target_words) * 100.0
            word_edits += word_counts.total
            word_total += len(target_words)
            line_wers.append(line_wer)
        else:
            line_wer = float("nan")
        lines.append(LineResult(line_id, len(target), counts, line_cer, line_wer))

    if not lines:
        raise ValueError("corpus report needs at least one nonempty target")
    return CorpusReport(
        lines=tuple(lines),
        excluded=tuple(excluded),
        aggregate_cer=char_edits / char_total * 100.0,
        aggregate_wer=(word_edits / word_total * 100.0) if word_total else float("nan"),
        mean_line_cer=sum(line_cers) / len(line_cers),
        mean_line_wer=(sum(line_wers) / len(line_wers)) if line_wers else float("nan"),
    )
