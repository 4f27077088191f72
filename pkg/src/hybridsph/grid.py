"""Uniform-grid neighbor index over particles.

Two preallocated arrays form per-cell linked lists, the same trick a FAT
filesystem uses for cluster chains: ``heads[cell]`` is the first particle in
that cell (or END), and ``next[i]`` links particle ``i`` to the next particle
sharing its cell. Rebuilding the index each step touches no allocator once
the arrays exist, which is the whole point of the layout.

Positions outside the grid region clamp to the boundary cells, so queries
stay complete for an unbounded scene.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

END = -1


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned uniform grid: origin corner, cubic cell edge, cell counts."""

    origin: tuple[float, float, float]
    cell_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be > 0")
        if any(d < 1 for d in self.dims):
            raise ValueError("dims components must be >= 1")

    @property
    def cell_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def cell_coords(x: float, y: float, z: float, grid: GridSpec) -> tuple[int, int, int]:
    """Clamped integer cell coordinates of a point."""
    ox, oy, oz = grid.origin
    nx, ny, nz = grid.dims
    inv = 1.0 / grid.cell_size
    ix = int((x - ox) * inv)
    iy = int((y - oy) * inv)
    iz = int((z - oz) * inv)
    # int() truncates toward zero; points below the origin need floor.
    if x < ox:
        ix -= 1
    if y < oy:
        iy -= 1
    if z < oz:
        iz -= 1
    if ix < 0:
        ix = 0
    elif ix >= nx:
        ix = nx - 1
    if iy < 0:
        iy = 0
    elif iy >= ny:
        iy = ny - 1
    if iz < 0:
        iz = 0
    elif iz >= nz:
        iz = nz - 1
    return ix, iy, iz


def cell_of(position: Sequence[float], grid: GridSpec) -> int:
    """Linear cell index ``ix + nx*(iy + ny*iz)`` of a (possibly clamped) point."""
    x, y, z = position
    ix, iy, iz = cell_coords(x, y, z, grid)
    nx, ny, _ = grid.dims
    return ix + nx * (iy + ny * iz)


class SpatialIndex:
    """Per-cell particle chains over a :class:`GridSpec`.

    ``build`` may be called repeatedly; after the first call over a given
    particle count it reuses the two arrays in place.
    """

    __slots__ = ("grid", "heads", "next", "_empty_heads")

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.heads: list[int] = [END] * grid.cell_count
        self.next: list[int] = []
        self._empty_heads = [END] * grid.cell_count

    def build(self, particles: Sequence) -> "SpatialIndex":
        """Insert all particles in ascending order (prepend per cell).

        Inserting 0..n-1 leaves each chain in descending particle order;
        the order is fixed by this algorithm, so two builds over the same
        particle array produce identical chains.
        """
        self.heads[:] = self._empty_heads
        n = len(particles)
        nxt = self.next
        if len(nxt) != n:
            del nxt[:]
            nxt.extend([END] * n)
        heads = self.heads
        grid = self.grid
        ox, oy, oz = grid.origin
        nx, ny, nz = grid.dims
        inv = 1.0 / grid.cell_size
        nx1, ny1, nz1 = nx - 1, ny - 1, nz - 1
        for i in range(n):
            p = particles[i]
            ix = int((p.x - ox) * inv)
            iy = int((p.y - oy) * inv)
            iz = int((p.z - oz) * inv)
            if ix < 0 or p.x < ox:
                ix = 0
            elif ix > nx1:
                ix = nx1
            if iy < 0 or p.y < oy:
                iy = 0
            elif iy > ny1:
                iy = ny1
            if iz < 0 or p.z < oz:
                iz = 0
            elif iz > nz1:
                iz = nz1
            c = ix + nx * (iy + ny * iz)
            nxt[i] = heads[c]
            heads[c] = i
        return self


def build_index(particles: Sequence, grid: GridSpec,
                index: SpatialIndex | None = None) -> SpatialIndex:
    """Build (or rebuild in place) the spatial index for a particle array."""
    if index is None or index.grid != grid:
        index = SpatialIndex(grid)
    return index.build(particles)


def cell_range(point: Sequence[float], radius: float,
               grid: GridSpec) -> tuple[int, int, int, int, int, int]:
    """Clamped cell coordinate bounds covering the cube of half-width radius."""
    x, y, z = point
    lo = cell_coords(x - radius, y - radius, z - radius, grid)
    hi = cell_coords(x + radius, y + radius, z + radius, grid)
    return lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]


def neighbor_candidates(index: SpatialIndex, point: Sequence[float],
                        radius: float) -> Iterator[int]:
    """Yield every particle index within ``radius`` of ``point`` (and possibly
    a few beyond it; the caller filters by distance).

    Visits exactly the cells overlapping the axis-aligned cube of half-width
    ``radius`` around the point, in a fixed z-outer/y-middle/x-inner order,
    walking each cell chain head to end. Completeness holds even for points
    outside the grid region because the cell range clamps to the boundary.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    grid = index.grid
    x0, x1, y0, y1, z0, z1 = cell_range(point, radius, grid)
    heads = index.heads
    nxt = index.next
    nx, ny, _ = grid.dims
    for iz in range(z0, z1 + 1):
        zbase = ny * iz
        for iy in range(y0, y1 + 1):
            rowbase = nx * (iy + zbase)
            for ix in range(x0, x1 + 1):
                j = heads[rowbase + ix]
                while j != END:
                    yield j
                    j = nxt[j]
