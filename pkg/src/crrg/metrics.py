"""Text-generation evaluation suite: BLEU-1..4, ROUGE-L, METEOR-lite,
CIDEr, and TF-IDF cosine similarity over a shared tokenizer.

Conventions baked into this module:
  * one reference per candidate; BLEU and CIDEr aggregate at corpus level,
    METEOR/ROUGE-L/TF-IDF average per pair;
  * BLEU uses no smoothing (any zero precision zeroes the score) and the
    brevity penalty exp(min(0, 1 - R/C)) over corpus totals;
  * ROUGE-L is the beta=1.2 F-measure of the LCS;
  * METEOR-lite aligns exact matches then stem matches (Porter), leftmost
    greedy, with the 0.5*(chunks/m)^3 fragmentation penalty and no synonym
    stage, making it a lower bound on full METEOR;
  * CIDEr is the mean over n=1..4 of TF-IDF cosines with idf =
    ln(N/max(1,df)), without the x10 scaling or length penalty, so it stays
    in [0,1];
  * TF-IDF similarity uses unigram idf = ln((1+N)/(1+df)) + 1.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass

from .errors import InputError

TokenSeq = list[str]

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> TokenSeq:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# Porter stemmer (suffix stripping for the METEOR stem stage)
# ---------------------------------------------------------------------------

_VOWELS = "aeiou"


def _cons(w: str, i: int) -> bool:
    c = w[i]
    if c in _VOWELS:
        return False
    if c == "y":
        return True if i == 0 else not _cons(w, i - 1)
    return True


def _measure(w: str) -> int:
    """Number of VC sequences in the [C](VC)^m[V] decomposition."""
    m = 0
    i = 0
    n = len(w)
    while i < n and _cons(w, i):
        i += 1
    while i < n:
        while i < n and not _cons(w, i):
            i += 1
        if i >= n:
            break
        m += 1
        while i < n and _cons(w, i):
            i += 1
    return m


def _has_vowel(w: str) -> bool:
    return any(not _cons(w, i) for i in range(len(w)))


def _double_cons(w: str) -> bool:
    return len(w) >= 2 and w[-1] == w[-2] and _cons(w, len(w) - 1)


def _cvc(w: str) -> bool:
    if len(w) < 3:
        return False
    return (_cons(w, len(w) - 3) and not _cons(w, len(w) - 2)
            and _cons(w, len(w) - 1) and w[-1] not in "wxy")


def _longest_rule(word: str, rules: list[tuple[str, str]]):
    """Longest matching suffix among rules, or None. No fallthrough."""
    best = None
    for suf, rep in rules:
        if word.endswith(suf) and (best is None or len(suf) > len(best[0])):
            best = (suf, rep)
    return best


_STEP2 = [("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
          ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
          ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
          ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
          ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble")]

_STEP3 = [("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
          ("ical", "ic"), ("ful", ""), ("ness", "")]

_STEP4 = ["al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
          "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize"]


def porter_stem(word: str) -> str:
    w = word
    if len(w) <= 2:
        return w
    # step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif w.endswith("ss"):
        pass
    elif w.endswith("s"):
        w = w[:-1]
    # step 1b
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    else:
        stripped = None
        if w.endswith("ed") and _has_vowel(w[:-2]):
            stripped = w = w[:-2]
        elif w.endswith("ing") and _has_vowel(w[:-3]):
            stripped = w = w[:-3]
        if stripped is not None:
            if w.endswith(("at", "bl", "iz")):
                w = w + "e"
            elif _double_cons(w) and w[-1] not in "lsz":
                w = w[:-1]
            elif _measure(w) == 1 and _cvc(w):
                w = w + "e"
    # step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"
    # step 2
    hit = _longest_rule(w, _STEP2)
    if hit and _measure(w[:-len(hit[0])]) > 0:
        w = w[:-len(hit[0])] + hit[1]
    # step 3
    hit = _longest_rule(w, _STEP3)
    if hit and _measure(w[:-len(hit[0])]) > 0:
        w = w[:-len(hit[0])] + hit[1]
    # step 4
    hit = _longest_rule(w, [(s, "") for s in _STEP4])
    if hit:
        stem = w[:-len(hit[0])]
        if _measure(stem) > 1 and (hit[0] != "ion" or stem.endswith(("s", "t"))):
            w = stem
    # step 5a
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _cvc(stem)):
            w = stem
    # step 5b
    if _measure(w) > 1 and _double_cons(w) and w.endswith("l"):
        w = w[:-1]
    return w


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens: TokenSeq, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates: list[TokenSeq], references: list[TokenSeq], n: int,
           sentence_level: bool = False) -> float:
    """Corpus BLEU of order n (geometric mean of precisions 1..n times BP).

    sentence_level=True averages per-pair BLEU instead of pooling counts.
    """
    if len(candidates) != len(references):
        raise InputError("candidate and reference lists differ in length")
    if n < 1 or n > 4:
        raise InputError("n must lie in 1..4")
    if not candidates:
        raise InputError("empty corpus")
    if sentence_level:
        return sum(bleu_n([c], [r], n) for c, r in zip(candidates, references)) / len(candidates)
    matched = [0] * n
    total = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for k in range(1, n + 1):
            cg = _ngrams(cand, k)
            rg = _ngrams(ref, k)
            matched[k - 1] += sum(min(c, rg[g]) for g, c in cg.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or any(t == 0 or m == 0 for m, t in zip(matched, total)):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def _lcs_len(a: TokenSeq, b: TokenSeq) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: TokenSeq, reference: TokenSeq, beta: float = 1.2) -> float:
    lcs = _lcs_len(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta * beta) * p * r / (r + beta * beta * p)


# ---------------------------------------------------------------------------
# METEOR-lite
# ---------------------------------------------------------------------------

def _align(candidate: TokenSeq, reference: TokenSeq) -> list[tuple[int, int]]:
    """Leftmost greedy one-to-one alignment: exact stage then stem stage."""
    pairs: list[tuple[int, int]] = []
    used_ref = [False] * len(reference)
    aligned_cand = [False] * len(candidate)
    for stage in (lambda t: t, porter_stem):
        ref_keys = [stage(t) for t in reference]
        for i, tok in enumerate(candidate):
            if aligned_cand[i]:
                continue
            key = stage(tok)
            for j, rk in enumerate(ref_keys):
                if not used_ref[j] and rk == key:
                    pairs.append((i, j))
                    used_ref[j] = True
                    aligned_cand[i] = True
                    break
    return sorted(pairs)


def meteor_lite(candidate: TokenSeq, reference: TokenSeq) -> float:
    if not candidate or not reference:
        return 0.0
    pairs = _align(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    fmean = 10 * p * r / (r + 9 * p)
    chunks = 1
    for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
        if c1 != c0 + 1 or r1 != r0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1 - penalty)


# ---------------------------------------------------------------------------
# Corpus statistics, CIDEr, TF-IDF
# ---------------------------------------------------------------------------

@dataclass
class CorpusStats:
    """Document frequencies of 1..4-grams over the reference corpus."""
    document_frequency: dict[tuple[str, ...], int]
    document_count: int

    def df(self, gram: tuple[str, ...]) -> int:
        return self.document_frequency.get(gram, 0)


def build_corpus_stats(references: list[TokenSeq], max_n: int = 4) -> CorpusStats:
    if not references:
        raise InputError("empty reference corpus")
    df: dict[tuple[str, ...], int] = {}
    for ref in references:
        seen = set()
        for n in range(1, max_n + 1):
            seen.update(_ngrams(ref, n))
        for g in seen:
            df[g] = df.get(g, 0) + 1
    return CorpusStats(df, len(references))


def _cider_vector(tokens: TokenSeq, n: int, stats: CorpusStats) -> dict:
    grams = _ngrams(tokens, n)
    total = max(len(tokens) - n + 1, 0)
    if total == 0:
        return {}
    logn = math.log(stats.document_count)
    return {g: (c / total) * (logn - math.log(max(1, stats.df(g))))
            for g, c in grams.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (na * nb)


def cider(candidates: list[TokenSeq], references: list[TokenSeq],
          stats: CorpusStats) -> float:
    """Mean over pairs of the mean over n=1..4 TF-IDF cosine."""
    if len(candidates) != len(references):
        raise InputError("candidate and reference lists differ in length")
    if not candidates:
        raise InputError("empty corpus")
    if stats.document_count <= 0:
        raise InputError("empty corpus stats")
    score = 0.0
    for cand, ref in zip(candidates, references):
        per_n = 0.0
        for n in range(1, 5):
            per_n += _cosine(_cider_vector(cand, n, stats),
                             _cider_vector(ref, n, stats))
        score += per_n / 4.0
    return score / len(candidates)


def tfidf_similarity(a: TokenSeq, b: TokenSeq, stats: CorpusStats) -> float:
    """Cosine of unigram TF-IDF vectors, idf = ln((1+N)/(1+df)) + 1."""
    if stats.document_count <= 0:
        raise InputError("empty corpus stats")

    def vec(tokens):
        n1 = 1 + stats.document_count
        return {(t,): c * (math.log(n1 / (1 + stats.df((t,)))) + 1.0)
                for t, c in Counter(tokens).items()}

    return _cosine(vec(a), vec(b))


# ---------------------------------------------------------------------------
# Full report-set evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    tfidf: float

    KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider", "tfidf")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.KEYS}

    def format_row(self) -> str:
        """Three-decimal row in column order BLEU1..4, METEOR, ROUGE-L, CIDEr, TF-IDF."""
        return " & ".join(f"{getattr(self, k):.3f}" for k in self.KEYS)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        head = ",".join(self.KEYS)
        row = ",".join(f"{getattr(self, k):.6f}" for k in self.KEYS)
        return head + "\n" + row + "\n"


def evaluate_report_set(pairs: list[tuple[str, str]]) -> MetricReport:
    """Scores (generated, reference) text pairs with the whole suite."""
    if not pairs:
        raise InputError("no report pairs to evaluate")
    cands = [tokenize(g) for g, _ in pairs]
    refs = [tokenize(r) for _, r in pairs]
    stats = build_corpus_stats(refs)
    n = len(pairs)
    return MetricReport(
        bleu1=bleu_n(cands, refs, 1),
        bleu2=bleu_n(cands, refs, 2),
        bleu3=bleu_n(cands, refs, 3),
        bleu4=bleu_n(cands, refs, 4),
        meteor=sum(meteor_lite(c, r) for c, r in zip(cands, refs)) / n,
        rouge_l=sum(rouge_l(c, r) for c, r in zip(cands, refs)) / n,
        cider=cider(cands, refs, stats),
        tfidf=sum(tfidf_similarity(c, r, stats) for c, r in zip(cands, refs)) / n,
    )
