"""Scalar AdamW recurrence (decoupled decay applied before the Adam step)."""
from mpmath import mp, mpf, sqrt

mp.dps = 40
lr, b1, b2, wd, eps = mpf("0.01"), mpf("0.9"), mpf("0.99"), mpf("0.01"), mpf("1e-8")
p, m, v = mpf("1.5"), mpf(0), mpf(0)
for k, g in enumerate([mpf("0.3"), mpf("-0.7"), mpf("1.1")], start=1):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    p = p * (1 - lr * wd)
    p = p - lr * (m / (1 - b1**k)) / (sqrt(v / (1 - b2**k)) + eps)
print(mp.nstr(p, 20))
