"""Plain-Python reference implementations used as test oracles.

Every function loops over scalars with ``math`` only, so none of them shares
code with the vectorized implementations under test.
"""

import math

LOG_CLAMP = 1e-12


def norm(v):
    return math.sqrt(sum(x * x for x in v))


def softmax(z):
    m = max(z)
    ex = [math.exp(v - m) for v in z]
    s = sum(ex)
    return [v / s for v in ex]


def itm_probs(f, class_feats, tau):
    nf = norm(f)
    logits = []
    for e in class_feats:
        ne = norm(e)
        logits.append(sum(a * b for a, b in zip(f, e)) / (nf * ne) / tau)
    return softmax(logits)


def cat_probs(s, W):
    return softmax([sum(w[r] * s[r] for r in range(len(s))) for w in W])


def cwt(f, gamma, beta):
    return [g * x + b for x, g, b in zip(f, gamma, beta)]


def cat_loss(image_feats, text_feats, labels, gamma_img, beta_img, gamma_txt, beta_txt, W,
             image_only=False):
    rows = []
    for j, y in enumerate(labels):
        rows.append((cwt(image_feats[j], gamma_img, beta_img), y))
        if not image_only:
            rows.append((cwt(text_feats[j], gamma_txt, beta_txt), y))
    total = 0.0
    for s, y in rows:
        total -= math.log(max(cat_probs(s, W)[y], LOG_CLAMP))
    return total / len(rows)


def channel_importance(image_feats, labels, class_feats, eps=1e-12):
    F = [[x / norm(f) for x in f] for f in image_feats]
    E = [[x / norm(e) for x in e] for e in class_feats]
    d, m = len(F[0]), len(E)
    ci = []
    for r in range(d):
        total, kept = 0.0, 0
        for j, f in enumerate(F):
            mean = 0.0
            for i in range(m):
                mean += max(E[i][r] * f[r], 0.0)
            mean /= m
            if mean == 0.0:
                continue
            total += max(E[labels[j]][r] * f[r], 0.0) / (mean + eps)
            kept += 1
        ci.append(total / kept if kept else 0.0)
    return ci


def harmonic(b, n):
    return 2 * b * n / (b + n)
