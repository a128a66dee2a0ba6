"""Low-rank integral map: one rectifying warp per image block.

Blocks are solved row by row.  Within a row each block starts from the warp
of its left neighbour (warm start), so rows are the unit of parallel work.
Any point inherits the warp of the block containing it, re-centred on the
point.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from lrsift.imaging import AffineWarp
from lrsift.lowrank import TiltParams, TiltProblem, solve_tilt

DEFAULT_BLOCK = 60
CSV_FIELDS = ["row", "col", "l00", "l01", "l10", "l11", "t0", "t1", "converged", "outer_iterations", "cx", "cy"]


@dataclass(frozen=True)
class BlockEntry:
    warp: AffineWarp
    converged: bool
    outer_iterations: int
    block_center: np.ndarray
    solved_warp: AffineWarp | None = None


@dataclass
class LowRankIntegralMap:
    block_size: int
    image_dims: tuple  # (width, height)
    col_edges: np.ndarray
    row_edges: np.ndarray
    grid: list  # grid[i][j] -> BlockEntry
    solve_calls: int = 0

    @property
    def shape(self):
        return len(self.row_edges) - 1, len(self.col_edges) - 1

    @property
    def n_blocks(self):
        r, c = self.shape
        return r * c

    def entries(self):
        for i, row in enumerate(self.grid):
            for j, entry in enumerate(row):
                yield i, j, entry

    def block_index(self, p):
        x, y = float(p[0]), float(p[1])
        w, h = self.image_dims
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise ValueError(f"point ({x}, {y}) lies outside the {w}x{h} image")
        j = int(np.searchsorted(self.col_edges, x, side="right")) - 1
        i = int(np.searchsorted(self.row_edges, y, side="right")) - 1
        return min(i, self.shape[0] - 1), min(j, self.shape[1] - 1)


def block_edges(length, block_size):
    """Block boundaries along one axis; a ragged tail shorter than half a
    block is merged into the previous block."""
    edges = list(range(0, length, block_size)) + [length]
    if len(edges) > 2 and edges[-1] - edges[-2] < block_size // 2:
        del edges[-2]
    return np.array(edges)


def _solve_row(img, i, row_edges, col_edges, params, warm_start):
    y0, y1 = row_edges[i], row_edges[i + 1]
    entries = []
    prev = AffineWarp.identity()
    for j in range(len(col_edges) - 1):
        x0, x1 = col_edges[j], col_edges[j + 1]
        center = np.array([(x0 + x1 - 1) / 2.0, (y0 + y1 - 1) / 2.0])
        init = prev if (warm_start and j > 0) else AffineWarp.identity()
        sol = solve_tilt(TiltProblem(img, init_warp=init, params=params, center=center, window=(x1 - x0, y1 - y0)))
        # non-converged blocks fall back to the identity warp
        warp = sol.warp if sol.converged else AffineWarp.identity()
        entries.append(BlockEntry(warp, sol.converged, sol.outer_iterations, center, sol.warp))
        prev = warp
    return entries


def default_threads():
    env = os.environ.get("LRSIFT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def build_integral_map(img, block_size=DEFAULT_BLOCK, params=None, warm_start=True, threads=None):
    """Solve one rectifying warp per block of ``img``.

    The first block of each row starts from the identity; block ``j`` starts
    from the warp of block ``j - 1``.  Rows run concurrently on ``threads``
    workers; the result does not depend on scheduling.
    """
    params = params or TiltParams()
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    if block_size < 20:
        raise ValueError("block_size must be at least 20")
    if w <= block_size or h <= block_size:
        raise ValueError(f"image {w}x{h} is not larger than one {block_size}px block")
    col_edges = block_edges(w, block_size)
    row_edges = block_edges(h, block_size)
    n_rows = len(row_edges) - 1
    threads = threads or default_threads()
    args = [(img, i, row_edges, col_edges, params, warm_start) for i in range(n_rows)]
    if threads > 1 and n_rows > 1:
        with ThreadPoolExecutor(max_workers=min(threads, n_rows)) as pool:
            grid = list(pool.map(lambda a: _solve_row(*a), args))
    else:
        grid = [_solve_row(*a) for a in args]
    return LowRankIntegralMap(block_size, (w, h), col_edges, row_edges, grid,
                              solve_calls=n_rows * (len(col_edges) - 1))


def transform_at(imap, p):
    """Warp for a window centred at ``p``: the containing block's linear part
    with the translation re-centred so that ``p`` is the fixed point."""
    i, j = imap.block_index(p)
    entry = imap.grid[i][j]
    # T = T0 o Tt maps x to L (x - p): zero translation in p-centred coordinates
    return AffineWarp(entry.warp.linear, np.zeros(2))


def dump_csv(imap, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for i, j, e in imap.entries():
            writer.writerow([i, j, *(f"{v:.9g}" for v in e.warp.entries()), int(e.converged),
                             e.outer_iterations, f"{e.block_center[0]:.9g}", f"{e.block_center[1]:.9g}"])


def load_csv(path, image_dims, block_size=DEFAULT_BLOCK):
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            i, j = int(rec["row"]), int(rec["col"])
            warp = AffineWarp.from_entries([float(rec[k]) for k in CSV_FIELDS[2:8]])
            center = np.array([float(rec["cx"]), float(rec["cy"])])
            rows.setdefault(i, {})[j] = BlockEntry(warp, bool(int(rec["converged"])),
                                                   int(rec["outer_iterations"]), center)
    grid = [[rows[i][j] for j in sorted(rows[i])] for i in sorted(rows)]
    w, h = image_dims
    return LowRankIntegralMap(block_size, (w, h), block_edges(w, block_size), block_edges(h, block_size), grid)
