"""Text-overlap metrics for generated questions.

BLEU-n (clipped n-gram precision, geometric mean over orders, brevity
penalty), ROUGE-L (LCS F-measure, recall-weighted), and CIDEr (tf-idf n-gram
cosine over a corpus), plus corpus aggregation into a report and
first-word-position frequency tables.

Tokens are arbitrary hashables; callers tokenize (and strip reserved ids)
before scoring.
"""

import math
from collections import Counter
from dataclasses import dataclass, field

CIDER_MAX_ORDER = 4
ROUGE_BETA = 1.2


def ngrams(tokens, n: int):
    tokens = list(tokens)
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _closest_ref_length(cand_len: int, references) -> int:
    # ties between two reference lengths resolve to the shorter one
    return min((abs(len(r) - cand_len), len(r)) for r in references)[1]


def _clipped_counts(candidate, references, k: int):
    """(clipped matches, candidate n-gram total) for order k."""
    cand_counts = Counter(ngrams(candidate, k))
    total = sum(cand_counts.values())
    if total == 0:
        return 0, 0
    max_ref = Counter()
    for ref in references:
        for g, v in Counter(ngrams(ref, k)).items():
            if v > max_ref[g]:
                max_ref[g] = v
    clipped = sum(min(v, max_ref[g]) for g, v in cand_counts.items())
    return clipped, total


def _precision_log_sum(pairs, smooth: bool):
    """Sum of log precisions over (clipped, total) pairs; None means the
    score is identically zero (an order with no matches and no smoothing, or
    no n-grams at all)."""
    acc = 0.0
    for clipped, total in pairs:
        if total == 0:
            return None
        if clipped == 0:
            if not smooth:
                return None
            acc += math.log(1.0 / (total + 1.0))
        else:
            acc += math.log(clipped / total)
    return acc


def bleu_n(candidate, references, n: int, smooth: bool = False) -> float:
    """BLEU of order n in [0, 1].

    Precision at each order 1..n clips candidate n-gram counts by the
    per-reference maximum; the score is the geometric mean times the brevity
    penalty exp(1 - r/c) for candidates shorter than the closest reference.
    smooth=True scores zero-match orders as 1/(total+1) instead of failing
    the whole product. An empty candidate scores 0.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    if not references:
        raise ValueError("BLEU needs at least one reference")
    candidate = list(candidate)
    c = len(candidate)
    if c == 0:
        return 0.0
    pairs = [_clipped_counts(candidate, references, k) for k in range(1, n + 1)]
    log_sum = _precision_log_sum(pairs, smooth)
    if log_sum is None:
        return 0.0
    r = _closest_ref_length(c, references)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def corpus_bleu(candidates, references_list, n: int, smooth: bool = False) -> float:
    """Corpus BLEU: clipped counts and totals are summed over all examples
    before taking ratios; the brevity penalty compares summed lengths."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    if len(candidates) != len(references_list) or not candidates:
        raise ValueError("corpus BLEU needs matched, nonempty candidate/reference lists")
    totals = [[0, 0] for _ in range(n)]
    c_sum, r_sum = 0, 0
    for cand, refs in zip(candidates, references_list):
        if not refs:
            raise ValueError("BLEU needs at least one reference")
        cand = list(cand)
        if not cand:
            continue
        c_sum += len(cand)
        r_sum += _closest_ref_length(len(cand), refs)
        for k in range(1, n + 1):
            clipped, total = _clipped_counts(cand, refs, k)
            totals[k - 1][0] += clipped
            totals[k - 1][1] += total
    if c_sum == 0:
        return 0.0
    log_sum = _precision_log_sum([tuple(t) for t in totals], smooth)
    if log_sum is None:
        return 0.0
    bp = 1.0 if c_sum >= r_sum else math.exp(1.0 - r_sum / c_sum)
    return bp * math.exp(log_sum / n)


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = ROUGE_BETA) -> float:
    """ROUGE-L in [0, 1]: LCS F-measure with recall weighted by beta^2,
    maximized over the references."""
    if not references:
        raise ValueError("ROUGE-L needs at least one reference")
    candidate = list(candidate)
    best = 0.0
    for ref in references:
        ref = list(ref)
        l = lcs_length(candidate, ref)
        if l == 0:
            continue
        p = l / len(candidate)
        r = l / len(ref)
        f = (1.0 + beta * beta) * p * r / (r + beta * beta * p)
        best = max(best, f)
    return best


def _tfidf(tokens, k: int, df: Counter, n_docs: int):
    # n-grams absent from every reference set carry zero weight; with them
    # excluded, duplicating the whole corpus leaves every score unchanged
    counts = Counter(ngrams(tokens, k))
    total = sum(counts.values())
    if total == 0:
        return {}
    log_n = math.log(n_docs)
    return {g: (v / total) * (log_n - math.log(df[g]))
            for g, v in counts.items() if df[g] > 0}


def _cosine(a: dict, b: dict):
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return None
    dot = sum(v * b.get(g, 0.0) for g, v in a.items())
    return dot / (na * nb)


def cider(candidates, references_list, n_max: int = CIDER_MAX_ORDER):
    """Consensus tf-idf similarity, 10 * mean over n-gram orders of the
    average cosine against the references.

    idf counts how many examples mention each n-gram anywhere in their
    reference set; n-grams no reference mentions carry zero weight. An order
    contributes only where both vectors carry weight (too-short sentences
    and all-zero-idf orders drop out of the mean rather than scoring 0).
    Returns (per-example scores, corpus mean).
    """
    if len(candidates) != len(references_list) or not candidates:
        raise ValueError("CIDEr needs matched, nonempty candidate/reference lists")
    n_docs = len(references_list)
    dfs = [Counter() for _ in range(n_max)]
    for refs in references_list:
        if not refs:
            raise ValueError("CIDEr needs at least one reference per example")
        for k in range(1, n_max + 1):
            seen = set()
            for ref in refs:
                seen.update(ngrams(ref, k))
            for g in seen:
                dfs[k - 1][g] += 1
    scores = []
    for cand, refs in zip(candidates, references_list):
        terms = []
        for k in range(1, n_max + 1):
            cv = _tfidf(cand, k, dfs[k - 1], n_docs)
            cells = []
            for ref in refs:
                cell = _cosine(cv, _tfidf(ref, k, dfs[k - 1], n_docs))
                if cell is not None:
                    cells.append(cell)
            if cells:
                terms.append(sum(cells) / len(cells))
        scores.append(10.0 * sum(terms) / len(terms) if terms else 0.0)
    return scores, sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# corpus aggregation

@dataclass
class EvalReport:
    """Corpus scores (BLEU/ROUGE on the 0-100 scale, CIDEr on its native
    0-10 scale), one score row per example, and first-word frequency
    tables."""
    bleu: dict
    rouge_l: float
    cider: float
    per_example: list
    first_words: dict = field(default_factory=dict)

    def score_rows(self):
        rows = [(f"bleu{n}", self.bleu[n]) for n in sorted(self.bleu)]
        rows.append(("rouge_l", self.rouge_l))
        rows.append(("cider", self.cider))
        return rows

    def to_csv(self) -> str:
        lines = ["metric,score"]
        lines += [f"{name},{value:.10g}" for name, value in self.score_rows()]
        return "\n".join(lines) + "\n"


def evaluate_corpus(candidates, references_list, bleu_mode: str = "max",
                    smooth: bool = False) -> EvalReport:
    """Score a corpus of candidates against per-example reference sets.

    bleu_mode "max" scores each example against each reference separately
    and keeps the best (then means over examples); "corpus" aggregates
    clipped counts across the corpus. ROUGE-L is always the per-example max;
    CIDEr is corpus-level by construction.
    """
    if bleu_mode not in ("max", "max_ref", "corpus"):
        raise ValueError(f"unknown bleu_mode {bleu_mode!r}")
    if len(candidates) != len(references_list) or not candidates:
        raise ValueError("evaluation needs matched, nonempty candidate/reference lists")
    cider_scores, cider_mean = cider(candidates, references_list)
    per_example = []
    for cand, refs, cd in zip(candidates, references_list, cider_scores):
        row = {}
        for n in range(1, 5):
            row[f"bleu{n}"] = 100.0 * max(bleu_n(cand, [ref], n, smooth) for ref in refs)
        row["rouge_l"] = 100.0 * rouge_l(cand, refs)
        row["cider"] = cd
        per_example.append(row)
    if bleu_mode == "corpus":
        bleu = {n: 100.0 * corpus_bleu(candidates, references_list, n, smooth)
                for n in range(1, 5)}
    else:
        count = len(per_example)
        bleu = {n: sum(r[f"bleu{n}"] for r in per_example) / count for n in range(1, 5)}
    rouge = sum(r["rouge_l"] for r in per_example) / len(per_example)
    return EvalReport(bleu=bleu, rouge_l=rouge, cider=cider_mean,
                      per_example=per_example,
                      first_words=question_word_stats(candidates))


def question_word_stats(questions, positions: int = 4) -> dict:
    """Frequency table of the word at each of the first `positions`
    positions, over the questions long enough to have one. Entries sort by
    descending frequency then token; frequencies per position sum to 1."""
    if not questions:
        raise ValueError("word statistics need at least one question")
    tables = {}
    for pos in range(1, positions + 1):
        words = [q[pos - 1] for q in questions if len(q) >= pos]
        if not words:
            tables[pos] = []
            continue
        counts = Counter(words)
        total = len(words)
        tables[pos] = sorted(((w, v / total) for w, v in counts.items()),
                             key=lambda item: (-item[1], str(item[0])))
    return tables


def word_stats_csv(tables: dict) -> str:
    lines = ["position,word,frequency"]
    for pos in sorted(tables):
        lines += [f"{pos},{word},{freq:.10g}" for word, freq in tables[pos]]
    return "\n".join(lines) + "\n"
