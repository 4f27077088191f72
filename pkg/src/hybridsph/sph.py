"""SPH nebula model: cubic-spline kernel, per-particle field sums, a
grid-based gravity field, and the four-phase simulation step.

Phases 2 and 3 are pure functions of the pre-phase state snapshot: each
application reads only fields no other application writes during the same
phase (phase 2 writes density/pressure/acceleration and reads positions and
masses; phase 3 writes acceleration and reads everything phase 2 produced).
That independence is what lets a step farm particles out to host workers and
devices in any order and still produce bit-identical results.

All field sums accumulate in spatial-index chain order, which is fully
determined by the particle array and the grid, so host and device evaluate
identical floating-point sequences.
"""

from __future__ import annotations

import math
import random
import struct
import time
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

from .grid import GridSpec, SpatialIndex, build_index, cell_coords
from .wire import ByteReader, ByteWriter

_PI = math.pi


# ---------------------------------------------------------------------------
# Particle
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Particle:
    """One SPH particle. Field order matches the 108-byte wire layout."""

    id: int
    material: int
    x: float
    y: float
    z: float
    mass: float
    density: float = 0.0
    pressure: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    az: float = 0.0


# id u64, material u32, then 12 f64: pos, mass, density, pressure, vel, acc.
_PARTICLE_STRUCT = struct.Struct("<QI12d")
PARTICLE_WIRE_SIZE = _PARTICLE_STRUCT.size  # 108


class ParticleCodec:
    """Fixed 108-byte little-endian particle record."""

    __slots__ = ()

    def serialize(self, p: Particle, writer: ByteWriter) -> int:
        return writer.write_bytes(_PARTICLE_STRUCT.pack(
            p.id, p.material, p.x, p.y, p.z, p.mass, p.density, p.pressure,
            p.vx, p.vy, p.vz, p.ax, p.ay, p.az))

    def deserialize(self, reader: ByteReader) -> Particle:
        start = reader._take(PARTICLE_WIRE_SIZE)
        return Particle(*_PARTICLE_STRUCT.unpack_from(reader.data, start))

    def size(self, p: Particle) -> int:
        return PARTICLE_WIRE_SIZE


PARTICLE_CODEC = ParticleCodec()


# ---------------------------------------------------------------------------
# Parameters and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimParams:
    """Simulation constants. ``world_box`` bounds the spatial grids only;
    particles are free to leave it (queries clamp to boundary cells)."""

    h: float = 0.12                      # smoothing radius
    dt: float = 0.001                    # timestep
    k_eos: float = 1.0                   # isothermal pressure stiffness
    G: float = 1.0                       # gravitational constant
    epsilon: float = 0.05                # gravity softening length
    world_box: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-2.0, -2.0, -2.0), (2.0, 2.0, 2.0))
    gravity_dims: tuple[int, int, int] = (8, 8, 8)

    def __post_init__(self):
        if min(self.h, self.dt, self.epsilon) <= 0:
            raise ValueError("h, dt and epsilon must all be > 0")
        # Zero stiffness / zero gravity are legitimate test regimes
        # (ballistic motion, momentum conservation).
        if self.k_eos < 0 or self.G < 0:
            raise ValueError("k_eos and G must be >= 0")
        lo, hi = self.world_box
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("world_box must be non-degenerate")
        if any(d < 1 for d in self.gravity_dims):
            raise ValueError("gravity_dims components must be >= 1")

    def index_grid(self) -> GridSpec:
        """Neighbor grid: cell edge = h, sized to cover the world box."""
        lo, hi = self.world_box
        dims = tuple(max(1, math.ceil((b - a) / self.h)) for a, b in zip(lo, hi))
        return GridSpec(origin=lo, cell_size=self.h, dims=dims)

    def gravity_grid(self) -> GridSpec:
        """Gravity grid: cubic cells sized so the configured dims cover the box."""
        lo, hi = self.world_box
        cell = max((b - a) / d for a, b, d in zip(lo, hi, self.gravity_dims))
        return GridSpec(origin=lo, cell_size=cell, dims=self.gravity_dims)


class GravityField:
    """Force-per-mass vectors at grid cell centers, one contiguous array.

    ``cells`` is a flat list of 3*cell_count floats in x-fastest row-major
    cell order (gx0, gy0, gz0, gx1, ...).
    """

    __slots__ = ("grid", "cells")

    def __init__(self, grid: GridSpec, cells: list[float]):
        if len(cells) != 3 * grid.cell_count:
            raise ValueError("cells length must be 3 * cell_count")
        self.grid = grid
        self.cells = cells

    def sample(self, x: float, y: float, z: float) -> tuple[float, float, float]:
        """Field vector of the cell containing the point (nearest-cell)."""
        ix, iy, iz = cell_coords(x, y, z, self.grid)
        nx, ny, _ = self.grid.dims
        base = 3 * (ix + nx * (iy + ny * iz))
        cells = self.cells
        return cells[base], cells[base + 1], cells[base + 2]


@dataclass
class SimulationState:
    """Whole problem state: particles, gravity field, spatial index, params."""

    particles: list[Particle]
    params: SimParams
    gravity: GravityField | None = None
    index: SpatialIndex | None = None


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

def kernel_w(r: float, h: float) -> float:
    """Cubic-spline kernel W(r, h) = 8/(pi h^3) * M(r/h).

    M = 1 - 6x^2 + 6x^3 on [0, 1/2], 2(1-x)^3 on (1/2, 1], 0 beyond; the
    x = 0 point belongs to the first branch so W(0) = 8/(pi h^3). Compact
    support: identically zero for r > h.
    """
    x = r / h
    if x > 1.0:
        return 0.0
    if x <= 0.5:
        x2 = x * x
        m = 1.0 - 6.0 * x2 + 6.0 * x2 * x
    else:
        u = 1.0 - x
        m = 2.0 * u * u * u
    return 8.0 / (_PI * h * h * h) * m


def kernel_dw(r: float, h: float) -> float:
    """Radial derivative dW/dr = 8/(pi h^4) * M'(r/h).

    M' = -12x + 18x^2 on [0, 1/2], -6(1-x)^2 on (1/2, 1], 0 beyond.
    Non-positive everywhere on the support.
    """
    x = r / h
    if x > 1.0:
        return 0.0
    if x <= 0.5:
        m = -12.0 * x + 18.0 * x * x
    else:
        u = 1.0 - x
        m = -6.0 * u * u
    return 8.0 / (_PI * h * h * h * h) * m


# ---------------------------------------------------------------------------
# Field evaluation
# ---------------------------------------------------------------------------

def field_property(point: Sequence[float], state: SimulationState,
                   accessor: Callable[[Particle], float | Sequence[float]]):
    """Kernel-weighted field value sum(m_j * A_j / d_j * W(|x - pos_j|, h)).

    ``accessor`` maps a particle to the property A_j, either a scalar or a
    3-sequence (the result is then a 3-tuple). Contributions accumulate in
    spatial-index chain order; particles at distance >= h contribute nothing.
    Densities of contributing particles must be positive (run phase 2 first
    when using a non-density accessor).
    """
    x, y, z = point
    h = state.params.h
    h2 = h * h
    parts = state.particles
    index = state.index
    scalar_total = 0.0
    vec_total: list[float] | None = None
    from .grid import neighbor_candidates

    for j in neighbor_candidates(index, point, h):
        p = parts[j]
        dx = x - p.x
        dy = y - p.y
        dz = z - p.z
        r2 = dx * dx + dy * dy + dz * dz
        if r2 >= h2:
            continue
        w = kernel_w(math.sqrt(r2), h) * p.mass / p.density
        a = accessor(p)
        if isinstance(a, (int, float)):
            scalar_total += a * w
        else:
            if vec_total is None:
                vec_total = [0.0, 0.0, 0.0]
            vec_total[0] += a[0] * w
            vec_total[1] += a[1] * w
            vec_total[2] += a[2] * w
    if vec_total is not None:
        return tuple(vec_total)
    return scalar_total


def build_gravity_field(particles: Sequence[Particle], grid: GridSpec,
                        G: float, epsilon: float) -> GravityField:
    """Softened point-mass field at every cell center:
    g(c) = sum_j G m_j (pos_j - c) / (|pos_j - c|^2 + eps^2)^(3/2).

    O(cells * particles); runs once per step on the host and ships to
    devices, so it is vectorized rather than kept loop-identical.
    """
    import numpy as np  # deferred: keeps device-worker startup lean

    ncells = grid.cell_count
    n = len(particles)
    if n == 0:
        return GravityField(grid, [0.0] * (3 * ncells))

    pos = np.empty((n, 3), dtype=np.float64)
    mass = np.empty(n, dtype=np.float64)
    for i, p in enumerate(particles):
        pos[i, 0] = p.x
        pos[i, 1] = p.y
        pos[i, 2] = p.z
        mass[i] = p.mass

    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    cs = grid.cell_size
    iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    centers = np.empty((ncells, 3), dtype=np.float64)
    centers[:, 0] = ox + (ix.ravel() + 0.5) * cs
    centers[:, 1] = oy + (iy.ravel() + 0.5) * cs
    centers[:, 2] = oz + (iz.ravel() + 0.5) * cs

    eps2 = epsilon * epsilon
    out = np.empty((ncells, 3), dtype=np.float64)
    # Chunk size depends only on n so the summation order is reproducible.
    chunk = max(1, 4_194_304 // n)
    for start in range(0, ncells, chunk):
        c = centers[start : start + chunk]
        d = pos[None, :, :] - c[:, None, :]
        r2 = (d * d).sum(axis=2) + eps2
        w = (G * mass)[None, :] / (r2 * np.sqrt(r2))
        out[start : start + chunk] = (w[:, :, None] * d).sum(axis=1)
    return GravityField(grid, out.ravel().tolist())


# ---------------------------------------------------------------------------
# Simulation phases
# ---------------------------------------------------------------------------

def phase1_prepare(state: SimulationState) -> SimulationState:
    """Rebuild the spatial index and gravity field over current positions.

    Serial by design: both structures have global data dependencies.
    """
    p = state.params
    state.index = build_index(state.particles, p.index_grid(), state.index)
    state.gravity = build_gravity_field(state.particles, p.gravity_grid(),
                                        p.G, p.epsilon)
    return state


def phase2_density_gravity(state: SimulationState, p: Particle) -> Particle:
    """Density, pressure and gravity acceleration for one particle.

    density = sum over neighbors (self included) of m_j W(r, h);
    pressure = k_eos * density; acceleration is set (not accumulated) to the
    gravity field vector of the particle's cell. Reads only neighbor
    positions and masses, so it is pure in the pre-phase snapshot.
    """
    params = state.params
    h = params.h
    h2 = h * h
    px, py, pz = p.x, p.y, p.z
    parts = state.particles
    index = state.index
    heads = index.heads
    nxt = index.next
    grid = index.grid
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    inv = 1.0 / grid.cell_size
    sqrt = math.sqrt
    kw = kernel_w

    x0, x1, y0, y1, z0, z1 = _cell_bounds(px, py, pz, h, ox, oy, oz, inv,
                                          nx, ny, nz)
    rho = 0.0
    for iz in range(z0, z1 + 1):
        zb = ny * iz
        for iy in range(y0, y1 + 1):
            rb = nx * (iy + zb)
            for ix in range(x0, x1 + 1):
                j = heads[rb + ix]
                while j != -1:
                    q = parts[j]
                    dx = px - q.x
                    dy = py - q.y
                    dz = pz - q.z
                    r2 = dx * dx + dy * dy + dz * dz
                    if r2 < h2:
                        rho += q.mass * kw(sqrt(r2), h)
                    j = nxt[j]
    p.density = rho
    p.pressure = params.k_eos * rho
    gx, gy, gz = state.gravity.sample(px, py, pz)
    p.ax = gx
    p.ay = gy
    p.az = gz
    return p


def phase3_pressure(state: SimulationState, p: Particle) -> Particle:
    """Symmetric SPH pressure force applied to one particle's acceleration:

        a_i -= sum_{j != i} m_j (p_i/d_i^2 + p_j/d_j^2) dW/dr(r_ij) rhat_ij

    Pairs at exactly zero separation (self, or coincident particles) are
    skipped: the self term vanishes analytically and a coincident pair has
    no defined direction, so it contributes zero force. Requires phase 2
    densities (> 0) for every particle in range.
    """
    params = state.params
    h = params.h
    h2 = h * h
    px, py, pz = p.x, p.y, p.z
    self_term = p.pressure / (p.density * p.density)
    parts = state.particles
    index = state.index
    heads = index.heads
    nxt = index.next
    grid = index.grid
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    inv = 1.0 / grid.cell_size
    sqrt = math.sqrt
    kdw = kernel_dw

    x0, x1, y0, y1, z0, z1 = _cell_bounds(px, py, pz, h, ox, oy, oz, inv,
                                          nx, ny, nz)
    ax = p.ax
    ay = p.ay
    az = p.az
    for iz in range(z0, z1 + 1):
        zb = ny * iz
        for iy in range(y0, y1 + 1):
            rb = nx * (iy + zb)
            for ix in range(x0, x1 + 1):
                j = heads[rb + ix]
                while j != -1:
                    q = parts[j]
                    dx = px - q.x
                    dy = py - q.y
                    dz = pz - q.z
                    r2 = dx * dx + dy * dy + dz * dz
                    if 0.0 < r2 < h2:
                        r = sqrt(r2)
                        coef = (q.mass
                                * (self_term + q.pressure / (q.density * q.density))
                                * kdw(r, h) / r)
                        ax -= coef * dx
                        ay -= coef * dy
                        az -= coef * dz
                    j = nxt[j]
    p.ax = ax
    p.ay = ay
    p.az = az
    return p


def phase4_integrate(p: Particle, dt: float) -> Particle:
    """Semi-implicit Euler: v += a dt, then pos += v dt; acceleration resets
    to zero so each step is self-contained."""
    p.vx += p.ax * dt
    p.vy += p.ay * dt
    p.vz += p.az * dt
    p.x += p.vx * dt
    p.y += p.vy * dt
    p.z += p.vz * dt
    p.ax = 0.0
    p.ay = 0.0
    p.az = 0.0
    return p


def _cell_bounds(px, py, pz, radius, ox, oy, oz, inv, nx, ny, nz):
    """Clamped cell coordinate bounds of the radius cube around a point."""
    x0 = int((px - radius - ox) * inv)
    if x0 < 0 or px - radius < ox:
        x0 = 0
    x1 = int((px + radius - ox) * inv)
    if x1 > nx - 1:
        x1 = nx - 1
    elif x1 < 0:
        x1 = 0
    y0 = int((py - radius - oy) * inv)
    if y0 < 0 or py - radius < oy:
        y0 = 0
    y1 = int((py + radius - oy) * inv)
    if y1 > ny - 1:
        y1 = ny - 1
    elif y1 < 0:
        y1 = 0
    z0 = int((pz - radius - oz) * inv)
    if z0 < 0 or pz - radius < oz:
        z0 = 0
    z1 = int((pz + radius - oz) * inv)
    if z1 > nz - 1:
        z1 = nz - 1
    elif z1 < 0:
        z1 = 0
    return x0, x1, y0, y1, z0, z1


# ---------------------------------------------------------------------------
# State wire format
# ---------------------------------------------------------------------------

_PARAMS_STRUCT = struct.Struct("<5d6d3Q")


class SimStateCodec:
    """Whole-state payload: params, gravity field, particle array.

    The spatial index never crosses the wire; the receiving side rebuilds it
    from the particle array and the grid derived from the params, which
    reproduces the exact same chains.
    """

    __slots__ = ()

    def serialize(self, state: SimulationState, writer: ByteWriter) -> int:
        start = writer.position
        p = state.params
        lo, hi = p.world_box
        writer.write_bytes(_PARAMS_STRUCT.pack(
            p.h, p.dt, p.k_eos, p.G, p.epsilon,
            lo[0], lo[1], lo[2], hi[0], hi[1], hi[2],
            p.gravity_dims[0], p.gravity_dims[1], p.gravity_dims[2]))
        grav = state.gravity
        gd = grav.grid.dims
        writer.write_bytes(struct.pack("<3Q", gd[0], gd[1], gd[2]))
        writer.write_bytes(struct.pack(f"<{len(grav.cells)}d", *grav.cells))
        writer.write_u64(len(state.particles))
        pack = _PARTICLE_STRUCT.pack
        out = writer.write_bytes
        for q in state.particles:
            out(pack(q.id, q.material, q.x, q.y, q.z, q.mass, q.density,
                     q.pressure, q.vx, q.vy, q.vz, q.ax, q.ay, q.az))
        return writer.position - start

    def deserialize(self, reader: ByteReader) -> SimulationState:
        vals = _PARAMS_STRUCT.unpack(reader.read_bytes(_PARAMS_STRUCT.size))
        params = SimParams(
            h=vals[0], dt=vals[1], k_eos=vals[2], G=vals[3], epsilon=vals[4],
            world_box=((vals[5], vals[6], vals[7]), (vals[8], vals[9], vals[10])),
            gravity_dims=(vals[11], vals[12], vals[13]))
        gdims = struct.unpack("<3Q", reader.read_bytes(24))
        if gdims != params.gravity_dims:
            raise ValueError("gravity field dims disagree with params")
        ncells = gdims[0] * gdims[1] * gdims[2]
        cells = list(struct.unpack(f"<{3 * ncells}d",
                                   reader.read_bytes(24 * ncells)))
        gravity = GravityField(params.gravity_grid(), cells)
        n = reader.read_u64()
        unpack_from = _PARTICLE_STRUCT.unpack_from
        data = reader.data
        particles = []
        for _ in range(n):
            off = reader._take(PARTICLE_WIRE_SIZE)
            particles.append(Particle(*unpack_from(data, off)))
        state = SimulationState(particles=particles, params=params,
                                gravity=gravity)
        state.index = build_index(particles, params.index_grid())
        return state

    def size(self, state: SimulationState) -> int:
        return (_PARAMS_STRUCT.size
                + 24 + 24 * state.gravity.grid.cell_count
                + 8 + PARTICLE_WIRE_SIZE * len(state.particles))


SIM_STATE_CODEC = SimStateCodec()


def gravity_field_wire_size(grid: GridSpec) -> int:
    """Wire bytes of a gravity field: 3 u64 dims + 3 f64 per cell."""
    return 24 + 24 * grid.cell_count


# ---------------------------------------------------------------------------
# Scene construction and stepping
# ---------------------------------------------------------------------------

def make_scene(n: int, params: SimParams | None = None, seed: int = 1234,
               radius: float = 1.0, total_mass: float = 1.0) -> SimulationState:
    """Seeded initial conditions: n equal-mass particles uniform in a sphere,
    at rest, with material assigned by radius band."""
    params = params or SimParams()
    rng = random.Random(seed)
    mass = total_mass / n if n else total_mass
    particles: list[Particle] = []
    band1 = 0.4 * radius
    band2 = 0.75 * radius
    while len(particles) < n:
        x = rng.uniform(-radius, radius)
        y = rng.uniform(-radius, radius)
        z = rng.uniform(-radius, radius)
        r2 = x * x + y * y + z * z
        if r2 > radius * radius:
            continue
        r = math.sqrt(r2)
        material = 0 if r < band1 else (1 if r < band2 else 2)
        particles.append(Particle(id=len(particles), material=material,
                                  x=x, y=y, z=z, mass=mass))
    return SimulationState(particles=particles, params=params)


@dataclass
class StepTiming:
    """Wall seconds per phase of one step, plus device work accounting."""

    phase1_s: float = 0.0
    phase2_s: float = 0.0
    phase3_s: float = 0.0
    phase4_s: float = 0.0
    items_total: int = 0
    items_on_devices: int = 0
    stats: list = dc_field(default_factory=list)

    @property
    def coproc_fraction(self) -> float:
        if self.items_total == 0:
            return 0.0
        return self.items_on_devices / self.items_total


def simulation_step(state: SimulationState, device_specs: Sequence = (),
                    host_workers: int | None = None, chunk: int = 1,
                    buffer_capacity: int = 1 << 20,
                    hot_buffers: int = 2) -> StepTiming:
    """Advance the state by one step.

    Phase 1 runs serially on the host. Phases 2 and 3 run through
    hybrid_for_each with a fresh whole-state transfer per phase (devices are
    connected per phase and discard their state copies afterwards). Phase 4
    runs with local parallelism only; shipping it would cost more in
    transfers than it saves.
    """
    from . import functors
    from .runtime import connect_device, hybrid_for_each

    timing = StepTiming()
    t0 = time.perf_counter()
    phase1_prepare(state)
    t1 = time.perf_counter()
    timing.phase1_s = t1 - t0

    n = len(state.particles)
    timing.items_total = 2 * n

    for phase_name, functor in (
            ("phase2_s", functors.DensityGravityAction(state)),
            ("phase3_s", functors.PressureForceAction(state))):
        devices = [connect_device(spec, i) for i, spec in enumerate(device_specs)]
        t0 = time.perf_counter()
        stats = hybrid_for_each(state.particles, functor, devices,
                                host_workers=host_workers, chunk=chunk,
                                buffer_capacity=buffer_capacity,
                                hot_buffers=hot_buffers)
        setattr(timing, phase_name, time.perf_counter() - t0)
        timing.stats.append(stats)
        timing.items_on_devices += sum(
            c for u, c in stats.items_by_unit.items() if u.startswith("device/"))

    t0 = time.perf_counter()
    integrate = functors.IntegrateAction(state.params.dt)
    stats4 = hybrid_for_each(state.particles, integrate, (),
                             host_workers=host_workers, chunk=max(chunk, 64))
    timing.phase4_s = time.perf_counter() - t0
    timing.stats.append(stats4)
    return timing
