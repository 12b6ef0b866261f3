#!/usr/bin/env python3
"""Reference caption metrics for the frozen micro-corpus test values.

Definitions implemented here (and mirrored by the C++ library):
  BLEU-n   corpus-level modified n-gram precision with brevity penalty.
           p_k = sum of clipped matches / sum of candidate k-grams, over the
           corpus. Effective reference length per candidate is the closest
           length (ties to the shorter). BLEU-n = BP * exp(mean log p_k),
           zero if any p_k is zero.
  ROUGE-L  LCS F-measure with beta = 1.2, max over references, mean over
           candidates.
  CIDEr    plain cosine variant: per n in 1..4, vectors of raw n-gram counts
           scaled by IDF(w) = log(M / max(1, DF(w))) where DF counts items
           whose reference set contains w. Per item: mean cosine against
           each reference; total = mean over n then mean over items. No x10
           scaling, no length penalty.

Run: python3 cider_oracle.py
"""

import math
from collections import Counter


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n=4):
    match = [0] * (max_n + 1)
    total = [0] * (max_n + 1)
    cand_len = 0
    eff_ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        eff_ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cn = ngrams(cand, n)
            clip = Counter()
            for r in refs:
                rn = ngrams(r, n)
                for g, c in rn.items():
                    clip[g] = max(clip[g], c)
            match[n] += sum(min(c, clip[g]) for g, c in cn.items())
            total[n] += sum(cn.values())
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > eff_ref_len else math.exp(1.0 - eff_ref_len / cand_len)
    out = []
    logsum = 0.0
    dead = False
    for n in range(1, max_n + 1):
        p = match[n] / total[n] if total[n] > 0 else 0.0
        if p == 0.0:
            dead = True
        else:
            logsum += math.log(p)
        out.append(0.0 if dead else bp * math.exp(logsum / n))
    return out


def lcs(a, b):
    dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            dp[i][j] = dp[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(
                dp[i - 1][j], dp[i][j - 1])
    return dp[len(a)][len(b)]


def rouge_l(candidates, references, beta=1.2):
    scores = []
    for cand, refs in zip(candidates, references):
        best = 0.0
        for r in refs:
            if not cand or not r:
                continue
            l = lcs(cand, r)
            if l == 0:
                continue
            p = l / len(cand)
            rec = l / len(r)
            f = (1 + beta * beta) * p * rec / (rec + beta * beta * p)
            best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores)


def cider(candidates, references, max_n=4):
    m = len(candidates)
    df = [Counter() for _ in range(max_n + 1)]
    for refs in references:
        for n in range(1, max_n + 1):
            seen = set()
            for r in refs:
                seen.update(ngrams(r, n).keys())
            for g in seen:
                df[n][g] += 1

    def vec(tokens, n):
        return {g: c * math.log(m / max(1.0, df[n][g]))
                for g, c in ngrams(tokens, n).items()}

    def cosine(a, b):
        na = math.sqrt(sum(x * x for x in a.values()))
        nb = math.sqrt(sum(x * x for x in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        dot = sum(v * b.get(g, 0.0) for g, v in a.items())
        return dot / (na * nb)

    total = 0.0
    for cand, refs in zip(candidates, references):
        per_n = 0.0
        for n in range(1, max_n + 1):
            cv = vec(cand, n)
            per_n += sum(cosine(cv, vec(r, n)) for r in refs) / len(refs)
        total += per_n / max_n
    return total / m


def main():
    corpus = [
        ("C moves the red square left",
         ["C moves the red square left",
          "C shifts the red square leftward"]),
        ("O pushes the blue triangle",
         ["O shoves the blue triangle upward"]),
        ("the green circle is moved right by C",
         ["C moves the green circle right",
          "the green circle is shifted rightward by C"]),
    ]
    cands = [c.split() for c, _ in corpus]
    refs = [[r.split() for r in rs] for _, rs in corpus]

    b = bleu(cands, refs)
    for n in range(4):
        print(f"BLEU-{n + 1}:  {b[n]:.12f}")
    print(f"ROUGE-L: {rouge_l(cands, refs):.12f}")
    print(f"CIDEr:   {cider(cands, refs):.12f}")


if __name__ == "__main__":
    main()
