"""Regenerates tests/frozen_values.hpp from independent reference computations.

The random inputs replay the library's generator (SplitMix64 plus the
Box-Muller cosine branch) in plain Python; every expected value is then
computed with mpmath at 50 significant digits and rounded once to double.

    python3 tests/oracles/freeze_values.py > tests/frozen_values.hpp
"""

import itertools
import math

import mpmath

mpmath.mp.dps = 50
MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def uniform(self):
        return (self.next() >> 11) * 2.0**-53

    def normal(self):
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def seeded(count, seed):
    rng = SplitMix64(seed)
    return [rng.normal() for _ in range(count)]


def mp(values):
    return [mpmath.mpf(v) for v in values]


def matmul_case():
    a, b = mp(seeded(20, 11)), mp(seeded(12, 12))
    return [
        sum(a[i * 4 + t] * b[t * 3 + j] for t in range(4)) for i in range(5) for j in range(3)
    ]


def softmax_case():
    row = [mpmath.mpf(10000), mpmath.mpf(0)]
    m = max(row)
    denom = sum(mpmath.exp(x - m) for x in row)
    return [mpmath.exp(x - m) / denom for x in row]


def pool_case():
    keys, n, b, d = mp(seeded(24, 21)), 8, 3, 3
    out = []
    for lo in range(0, n, b):
        hi = min(n, lo + b)
        for t in range(d):
            out.append(sum(keys[j * d + t] for j in range(lo, hi)) / (hi - lo))
    return out


def affinity_case():
    q, keys, b, d = mp(seeded(3, 31)), mp(seeded(24, 32)), 2, 3
    scores = []
    for blk in range(4):
        mean = [(keys[(2 * blk) * d + t] + keys[(2 * blk + 1) * d + t]) / b for t in range(d)]
        scores.append(sum(q[t] * mean[t] for t in range(d)))
    return scores


def attention(q, k, v, n, h, d, visible):
    scale = 1 / mpmath.sqrt(d)
    out = [mpmath.mpf(0)] * (n * h * d)
    at = lambda x, i, hh, t: x[(i * h + hh) * d + t]
    for hh in range(h):
        for i in range(n):
            keys = [j for j in range(n) if visible(hh, i, j)]
            logits = {j: scale * sum(at(q, i, hh, t) * at(k, j, hh, t) for t in range(d)) for j in keys}
            m = max(logits.values())
            denom = sum(mpmath.exp(x - m) for x in logits.values())
            for t in range(d):
                out[(i * h + hh) * d + t] = sum(
                    mpmath.exp(logits[j] - m) / denom * at(v, j, hh, t) for j in keys
                )
    return out


def dense_case():
    n, h, d = 16, 2, 4
    q, k, v = (mp(seeded(n * h * d, s)) for s in (41, 42, 43))
    return attention(q, k, v, n, h, d, lambda hh, i, j: j <= i)


def gather_case():
    n, h, d, b, top_k = 8, 1, 4, 2, 2
    q, k, v = (mp(seeded(n * h * d, s)) for s in (51, 52, 53))
    blocks = n // b
    pooled = [[sum(k[j * d + t] for j in range(blk * b, blk * b + b)) / b for t in range(d)]
              for blk in range(blocks)]
    selected = []
    for i in range(n):
        current = i // b
        scores = {blk: sum(q[i * d + t] * pooled[blk][t] for t in range(d)) for blk in range(current)}
        want = min(top_k - 1, current)
        # Best descending score list, then smallest index list.
        best = min(itertools.combinations(range(current), want),
                   key=lambda s: ([-x for x in sorted((scores[j] for j in s), reverse=True)], s))
        selected.append(set(best) | {current})
    return attention(q, k, v, n, h, d, lambda hh, i, j: j <= i and j // b in selected[i])


LM_TARGETS = [0, 4, 2, 1, 3, 3, 0, 2]


def lm_loss_case():
    logits = mp(seeded(40, 61))
    total = mpmath.mpf(0)
    for i, target in enumerate(LM_TARGETS):
        row = logits[i * 5:(i + 1) * 5]
        total += mpmath.log(sum(mpmath.exp(x) for x in row)) - row[target]
    return [total / len(LM_TARGETS)]


def emit(name, values):
    body = ",\n".join(f"    {float(v)!r}" for v in values)
    return f"inline constexpr double {name}[] = {{\n{body},\n}};\n"


def main():
    print("// Generated by tests/oracles/freeze_values.py; do not edit.")
    print("#pragma once\n")
    print("namespace frozen {\n")
    print(emit("kSeed0Normals", seeded(4, 0)))
    print(emit("kMatmul5x4x3", matmul_case()))
    print(emit("kSoftmaxWide", softmax_case()))
    print(emit("kPoolN8B3", pool_case()))
    print(emit("kAffinityN8B2", affinity_case()))
    print(emit("kDenseCausalN16H2D4", dense_case()))
    print(emit("kGatherN8B2K2", gather_case()))
    targets = ", ".join(str(t) for t in LM_TARGETS)
    print(f"inline constexpr unsigned long kLmTargets[] = {{{targets}}};\n")
    print(emit("kLmLossN8V5", lm_loss_case()))
    print("}  // namespace frozen")


if __name__ == "__main__":
    main()
