"""Neighbourhood-constrained patch shuffling.

An image is partitioned into an N x N grid of patches. Each row of the grid
is permuted by sorting a jittered position vector (q_j = j + d_j with
d_j ~ U(-k, k)), which bounds every patch's column displacement by 2k. The
row-shuffled grid then gets the same treatment per column, bounding row
displacement by 2k as well. Global layout is destroyed while every patch
stays inside its local neighbourhood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class ShuffleSpecError(ValueError):
    """Invalid (grid size, neighbourhood range) combination."""


class DimensionError(ValueError):
    """Image dimensions not divisible by the grid size."""


@dataclass(frozen=True)
class ShuffleSpec:
    """Grid side length N and neighbourhood range k.

    N == 1 denotes the identity transform (k is ignored). For N > 1 the
    range must satisfy 1 <= k < N.
    """

    n: int
    k: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ShuffleSpecError(f"grid size must be >= 1, got {self.n}")
        if self.n > 1 and not (1 <= self.k < self.n):
            raise ShuffleSpecError(
                f"neighbourhood range must satisfy 1 <= k < n, got k={self.k}, n={self.n}"
            )


@dataclass(frozen=True)
class PermutationPair:
    """The row and column permutations applied by one shuffle.

    row_perms[i, j] is the new column of the patch originally at (i, j);
    col_perms[j, i] is the new row assigned to row i within column j of the
    row-shuffled grid. All indices 0-based.
    """

    row_perms: np.ndarray  # (N, N) int
    col_perms: np.ndarray  # (N, N) int

    @property
    def n(self) -> int:
        return self.row_perms.shape[0]

    def to_json(self) -> dict:
        return {
            "n": int(self.n),
            "row_perms": self.row_perms.tolist(),
            "col_perms": self.col_perms.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PermutationPair":
        return cls(
            row_perms=np.asarray(obj["row_perms"], dtype=np.int64),
            col_perms=np.asarray(obj["col_perms"], dtype=np.int64),
        )


def make_permutation(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """One neighbourhood-bounded permutation of {0..n-1}.

    Draws q_j = j + d_j, d_j ~ U(-k, k), and stably sorts q; the returned
    sigma maps each original index j to its rank, so |sigma[j] - j| <= 2k.
    """
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    if not (1 <= k < n):
        raise ShuffleSpecError(f"need 1 <= k < n, got k={k}, n={n}")
    q = np.arange(n, dtype=np.float64) + rng.uniform(-k, k, size=n)
    order = np.argsort(q, kind="stable")
    sigma = np.empty(n, dtype=np.int64)
    sigma[order] = np.arange(n)
    return sigma


def _permutation_block(n: int, k: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` independent bounded permutations, one per output row."""
    q = np.arange(n, dtype=np.float64) + rng.uniform(-k, k, size=(count, n))
    order = np.argsort(q, axis=1, kind="stable")
    sigma = np.empty((count, n), dtype=np.int64)
    np.put_along_axis(sigma, order, np.broadcast_to(np.arange(n), (count, n)), axis=1)
    return sigma


def make_pair(spec: ShuffleSpec, rng: np.random.Generator) -> PermutationPair:
    """Draw one permutation per row and one per column."""
    n = spec.n
    if n == 1:
        zero = np.zeros((1, 1), dtype=np.int64)
        return PermutationPair(row_perms=zero, col_perms=zero.copy())
    rows = _permutation_block(n, spec.k, n, rng)
    cols = _permutation_block(n, spec.k, n, rng)
    return PermutationPair(row_perms=rows, col_perms=cols)


def destination_grid(pair: PermutationPair) -> tuple[np.ndarray, np.ndarray]:
    """Final (row, col) of each patch after the row pass then the column pass.

    Returns (dest_row, dest_col), each of shape (N, N), indexed by the
    patch's original position.
    """
    n = pair.n
    i_idx, j_idx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    dest_col = pair.row_perms[i_idx, j_idx]
    dest_row = pair.col_perms[dest_col, i_idx]
    return dest_row, dest_col


def verify_pair(pair: PermutationPair, k: int) -> bool:
    """True iff every permutation is a bijection within the 2k bound."""
    n = pair.n
    idx = np.arange(n)
    for perms in (pair.row_perms, pair.col_perms):
        if perms.shape != (n, n):
            return False
        if not np.array_equal(np.sort(perms, axis=1), np.broadcast_to(idx, (n, n))):
            return False
        if np.abs(perms - idx).max() > 2 * k:
            return False
    return True


def shuffle_image(
    image: np.ndarray, spec: ShuffleSpec, rng: np.random.Generator
) -> tuple[np.ndarray, PermutationPair]:
    """Shuffle an (H, W[, C]) array patch-wise; returns (output, applied pair).

    Height and width must be exact multiples of spec.n; callers resize first,
    nothing is cropped silently.
    """
    h, w = image.shape[:2]
    n = spec.n
    if n == 1:
        return image.copy(), PermutationPair(
            row_perms=np.zeros((1, 1), dtype=np.int64),
            col_perms=np.zeros((1, 1), dtype=np.int64),
        )
    if h % n or w % n:
        raise DimensionError(f"image {h}x{w} not divisible by grid size {n}")
    pair = make_pair(spec, rng)
    dest_row, dest_col = destination_grid(pair)
    ph, pw = h // n, w // n
    out = np.empty_like(image)
    for i in range(n):
        for j in range(n):
            di, dj = dest_row[i, j], dest_col[i, j]
            out[di * ph : (di + 1) * ph, dj * pw : (dj + 1) * pw] = image[
                i * ph : (i + 1) * ph, j * pw : (j + 1) * pw
            ]
    return out, pair


def shuffle_batch(
    x: torch.Tensor, spec: ShuffleSpec, rng: np.random.Generator
) -> torch.Tensor:
    """Shuffle a (B, C, H, W) tensor, drawing a fresh pair per image."""
    n = spec.n
    if n == 1:
        return x
    b, c, h, w = x.shape
    if h % n or w % n:
        raise DimensionError(f"batch {h}x{w} not divisible by grid size {n}")
    ph, pw = h // n, w // n
    out = torch.empty_like(x)
    for bi in range(b):
        pair = make_pair(spec, rng)
        dest_row, dest_col = destination_grid(pair)
        flat = (dest_row * n + dest_col).reshape(-1)
        patches = (
            x[bi].reshape(c, n, ph, n, pw).permute(1, 3, 0, 2, 4).reshape(n * n, c, ph, pw)
        )
        shuffled = torch.empty_like(patches)
        shuffled[torch.from_numpy(flat)] = patches
        out[bi] = (
            shuffled.reshape(n, n, c, ph, pw).permute(2, 0, 3, 1, 4).reshape(c, h, w)
        )
    return out
