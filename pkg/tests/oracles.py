"""Independent scalar reference implementations used as test oracles.

Plain Python loops and ``math`` only; nothing here calls into the package.
"""

import math


def normalize_row(row, eps=1e-12):
    n = math.sqrt(sum(x * x for x in row) + eps)
    return [x / n for x in row]


def pair_weight(m_i, m_j, span, similarity=True):
    d = abs(m_i - m_j) / abs(span)
    return 1.0 - d if similarity else d


def soft_contrastive(S_v, S_t, labels, mapping, tau, normalize=True, similarity=True):
    """Mean over image anchors of -log(sum_j w_ij e^{sim_ij} / sum_j e^{sim_ij})."""
    B = len(S_v)
    if normalize:
        S_v = [normalize_row(r) for r in S_v]
        S_t = [normalize_row(r) for r in S_t]
    span = max(mapping) - min(mapping)
    total, count = 0.0, 0
    for i in range(B):
        sims = [sum(a * b for a, b in zip(S_v[i], S_t[j])) / tau for j in range(B)]
        m = max(sims)
        num = den = 0.0
        for j in range(B):
            e = math.exp(sims[j] - m)
            num += pair_weight(mapping[labels[i]], mapping[labels[j]], span, similarity) * e
            den += e
        if num == 0.0:
            continue
        total += -(math.log(num) - math.log(den))
        count += 1
    return total / count if count else 0.0


def info_nce(S_v, S_t, tau):
    """Standard InfoNCE with the matching index as the only positive (normalized rows)."""
    S_v = [normalize_row(r) for r in S_v]
    S_t = [normalize_row(r) for r in S_t]
    B = len(S_v)
    loss = 0.0
    for i in range(B):
        logits = [sum(a * b for a, b in zip(S_v[i], S_t[j])) / tau for j in range(B)]
        m = max(logits)
        lse = m + math.log(sum(math.exp(x - m) for x in logits))
        loss += lse - logits[i]
    return loss / B
