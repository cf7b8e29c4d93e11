"""Permutohedral-lattice Gaussian filtering (Adams, Baek & Davis 2010), vectorized.

``PermutohedralLattice(features).filter(values)`` approximates
``sum_j exp(-|f_i - f_j|^2 / 2) * values_j`` up to a global constant; callers
that need exact scale divide by ``filter(ones)``.
"""
from __future__ import annotations

import numpy as np


class PermutohedralLattice:
    def __init__(self, features: np.ndarray):
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError("features must be N x d")
        n, d = f.shape
        self.n, self.d = n, d
        d1 = d + 1

        inv_std = np.sqrt(2.0 / 3.0) * d1
        scale = inv_std / np.sqrt((np.arange(d) + 1.0) * (np.arange(d) + 2.0))
        cf = f * scale

        # elevate onto the hyperplane x . 1 = 0 in d+1 dimensions
        elevated = np.empty((n, d1))
        sm = np.zeros(n)
        for j in range(d, 0, -1):
            elevated[:, j] = sm - j * cf[:, j - 1]
            sm += cf[:, j - 1]
        elevated[:, 0] = sm

        # nearest remainder-0 lattice point
        v = elevated / d1
        up = np.ceil(v) * d1
        down = np.floor(v) * d1
        rem0 = np.where(up - elevated < elevated - down, up, down).astype(np.int64)
        total = rem0.sum(axis=1) // d1

        # rank of each coordinate of the differential
        diff = elevated - rem0
        rank = np.zeros((n, d1), dtype=np.int64)
        for i in range(d1):
            for j in range(i + 1, d1):
                less = diff[:, i] < diff[:, j]
                rank[:, i] += less
                rank[:, j] += ~less

        # wrap points whose coordinate sum is off the zero plane
        s = total[:, None]
        pos = s > 0
        neg = s < 0
        hi = pos & (rank >= d1 - s)
        rem0 = np.where(hi, rem0 - d1, rem0)
        rank = np.where(hi, rank + s - d1, np.where(pos, rank + s, rank))
        lo = neg & (rank < -s)
        rem0 = np.where(lo, rem0 + d1, rem0)
        rank = np.where(lo, rank + d1 + s, np.where(neg & ~lo, rank + s, rank))

        # barycentric weights of the enclosing simplex
        bary = np.zeros((n, d + 2))
        val = (elevated - rem0) / d1
        rows = np.arange(n)[:, None]
        np.add.at(bary, (rows, d - rank), val)
        np.add.at(bary, (rows, d - rank + 1), -val)
        bary[:, 0] += 1.0 + bary[:, d + 1]
        self.weights = bary[:, :d1]  # n x (d+1)

        # vertex keys: rem0 + canonical simplex offset, first d coordinates
        ks = np.arange(d1)[:, None, None]  # remainder
        r = rank[None, :, :d]
        offs = np.where(r <= d - ks, ks, ks - d1)  # (d+1) x n x d
        keys = (rem0[None, :, :d] + offs).transpose(1, 0, 2).reshape(-1, d)

        self._lo = keys.min(axis=0) - d1 - 1
        self._span = keys.max(axis=0) - self._lo + d1 + 2
        packed = self._pack(keys)
        uniq, inverse = np.unique(packed, return_inverse=True)
        self.m = uniq.size
        self.index = inverse.reshape(n, d1)

        ukeys = self._unpack(uniq)
        self.neighbors = []
        for j in range(d1):
            n1 = ukeys + 1
            n2 = ukeys - 1
            if j < d:
                n1[:, j] = ukeys[:, j] - d
                n2[:, j] = ukeys[:, j] + d
            self.neighbors.append((self._lookup(uniq, n1), self._lookup(uniq, n2)))

    def _pack(self, keys: np.ndarray) -> np.ndarray:
        k = keys - self._lo
        out = np.zeros(k.shape[0], dtype=np.int64)
        for j in range(self.d):
            out = out * int(self._span[j]) + k[:, j]
        return out

    def _unpack(self, packed: np.ndarray) -> np.ndarray:
        out = np.empty((packed.size, self.d), dtype=np.int64)
        p = packed.copy()
        for j in range(self.d - 1, -1, -1):
            out[:, j] = p % int(self._span[j])
            p //= int(self._span[j])
        return out + self._lo

    def _lookup(self, uniq: np.ndarray, keys: np.ndarray) -> np.ndarray:
        packed = self._pack(keys)
        pos = np.searchsorted(uniq, packed)
        pos = np.minimum(pos, uniq.size - 1)
        return np.where(uniq[pos] == packed, pos, -1)

    def filter(self, values: np.ndarray) -> np.ndarray:
        """values: n x c -> n x c."""
        values = np.asarray(values, dtype=np.float64)
        squeeze = values.ndim == 1
        if squeeze:
            values = values[:, None]
        c = values.shape[1]
        # splat
        grid = np.zeros((self.m + 1, c))  # last row is the zero "missing neighbour"
        idx = self.index.ravel()
        w = self.weights.ravel()
        contrib = (w[:, None] * np.repeat(values, self.d + 1, axis=0))
        for ch in range(c):
            grid[: self.m, ch] = np.bincount(idx, weights=contrib[:, ch], minlength=self.m)
        # blur along each lattice direction with [1 2 1] / 4
        for n1, n2 in self.neighbors:
            a = grid[np.where(n1 < 0, self.m, n1)]
            b = grid[np.where(n2 < 0, self.m, n2)]
            new = grid.copy()
            new[: self.m] = 0.5 * grid[: self.m] + 0.25 * (a + b)
            grid = new
        # slice
        out = (self.weights[:, :, None] * grid[self.index]).sum(axis=1)
        return out[:, 0] if squeeze else out
