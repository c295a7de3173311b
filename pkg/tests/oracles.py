"""Independent brute-force reference implementations used by tests only."""

import math


def oracle_bleu(candidates, reference_lists, n_max):
    """Plain dict/list BLEU with clipping, geometric mean, and brevity
    penalty; shares no code with the package implementation."""
    per_n = []
    for n in range(1, n_max + 1):
        match = 0
        total = 0
        for cand, refs in zip(candidates, reference_lists):
            grams = {}
            for i in range(len(cand) - n + 1):
                g = tuple(cand[i : i + n])
                grams[g] = grams.get(g, 0) + 1
            for g, count in grams.items():
                best = 0
                for ref in refs:
                    c = 0
                    for i in range(len(ref) - n + 1):
                        if tuple(ref[i : i + n]) == g:
                            c += 1
                    best = max(best, c)
                match += min(count, best)
            total += max(len(cand) - n + 1, 0)
        per_n.append((match, total))
    c_len = sum(len(c) for c in candidates)
    r_len = 0
    for cand, refs in zip(candidates, reference_lists):
        lens = sorted(len(r) for r in refs)
        r_len += min(lens, key=lambda L: (abs(L - len(cand)), L))
    if c_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    out = []
    for n in range(1, n_max + 1):
        ps = []
        ok = True
        for match, total in per_n[:n]:
            if total == 0 or match == 0:
                ok = False
                break
            ps.append(match / total)
        out.append(bp * math.exp(sum(math.log(p) for p in ps) / n) if ok else 0.0)
    return out
