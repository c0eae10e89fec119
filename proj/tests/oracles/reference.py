"""Independent reference values frozen into the unit tests.

Run with python3 (numpy required). Nothing here imports the C++ code; the
generators are re-implemented from their published definitions.
"""
import math

import numpy as np

M64 = (1 << 64) - 1


def splitmix64(state):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        yield z ^ (z >> 31)


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & M64


class Xoshiro:
    def __init__(self, seed=None, state=None):
        if state is None:
            sm = splitmix64(seed)
            state = [next(sm) for _ in range(4)]
        self.s = list(state)
        self.spare = None

    def next(self):
        s = self.s
        result = (rotl((s[1] * 5) & M64, 7) * 9) & M64
        t = (s[1] << 17) & M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        return result

    def uniform(self):
        return (self.next() >> 11) * 2.0**-53

    def below(self, bound):
        threshold = ((1 << 64) - bound) % bound
        while True:
            r = self.next()
            if r >= threshold:
                return r % bound

    def normal(self):
        if self.spare is not None:
            v, self.spare = self.spare, None
            return v
        u1 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        angle = 2.0 * math.pi * u2
        self.spare = radius * math.sin(angle)
        return radius * math.cos(angle)

    def shuffle(self, items):
        for i in range(len(items), 1, -1):
            j = self.below(i)
            items[i - 1], items[j] = items[j], items[i - 1]


def derive_seed(seed, stream):
    return next(splitmix64(seed ^ ((stream * 0xD1B54A32D192ED03) & M64)))


def fuzziness_pinv(x, labels, rel_tol=1e-10):
    n, _ = x.shape
    classes = sorted(set(labels))
    mean = x.mean(axis=0)
    ssb = np.zeros((x.shape[1],) * 2)
    ssw = np.zeros_like(ssb)
    for k in classes:
        xk = x[labels == k]
        mk = xk.mean(axis=0)
        ssb += len(xk) / n * np.outer(mk - mean, mk - mean)
        ssw += (xk - mk).T @ (xk - mk) / n
    w, v = np.linalg.eigh(ssb)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    keep = [j for j in range(min(len(classes) - 1, len(w))) if w[j] > rel_tol * w[0]]
    pinv = sum(np.outer(v[:, j], v[:, j]) / w[j] for j in keep)
    return float(np.trace(ssw @ pinv))


def main():
    sm = splitmix64(1234567)
    print("splitmix64(1234567):", [next(sm) for _ in range(5)])
    r = Xoshiro(state=[1, 2, 3, 4])
    print("xoshiro256** {1,2,3,4}:", [r.next() for _ in range(6)])
    r = Xoshiro(42)
    print("seed 42 next:", [r.next() for _ in range(3)])
    r = Xoshiro(42)
    print("seed 42 uniform:", [repr(r.uniform()) for _ in range(3)])
    r = Xoshiro(42)
    print("seed 42 below(10):", [r.below(10) for _ in range(8)])
    r = Xoshiro(42)
    print("seed 42 normal:", [repr(r.normal()) for _ in range(4)])
    r = Xoshiro(7)
    items = list(range(10))
    r.shuffle(items)
    print("seed 7 shuffle 0..9:", items)
    print("derive_seed(5, 3):", derive_seed(5, 3))

    # Frozen separation instance: 60 points, 4 features, 3 classes.
    r = Xoshiro(2024)
    labels = np.array([i % 3 for i in range(60)])
    x = np.array([[r.normal() + (1.5 * labels[i] if j == labels[i] else 0.0) for j in range(4)]
                  for i in range(60)])
    print("frozen instance D:", repr(fuzziness_pinv(x, labels)))


if __name__ == "__main__":
    main()
