"""Volume ray casting of a particle state snapshot.

One pinhole ray per pixel, density sampled at fixed intervals along it via
the spatial index, front-to-back emission-absorption compositing with early
exit once the pixel is effectively opaque. Sampling is jitter-free (interval
midpoints), accumulation is linear-light, and rows partition across the
shared pool with each pixel written to its own slot, so the output bytes are
identical for any worker count.

Rendering always runs on the local pool; snapshots never ship to devices.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

from .grid import build_index
from .sph import SimulationState, kernel_w

DEFAULT_PALETTE = (
    (1.00, 0.88, 0.62),   # core material
    (0.95, 0.48, 0.22),   # mid band
    (0.45, 0.32, 0.85),   # outer shell
)


def _normalize(v: tuple[float, float, float]) -> tuple[float, float, float]:
    n = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if n == 0.0:
        raise ValueError("zero-length vector")
    return (v[0] / n, v[1] / n, v[2] / n)


def _cross(a, b) -> tuple[float, float, float]:
    return (a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``fov`` is the vertical field of view in radians."""

    origin: tuple[float, float, float] = (0.0, 0.0, 3.2)
    direction: tuple[float, float, float] = (0.0, 0.0, -1.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov: float = math.pi / 3.0
    resolution: tuple[int, int] = (100, 100)

    def __post_init__(self):
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must be in (0, pi)")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise ValueError("resolution must be positive")
        d = _normalize(self.direction)
        right = _cross(d, _normalize(self.up))
        if right == (0.0, 0.0, 0.0):
            raise ValueError("up must not be parallel to direction")
        object.__setattr__(self, "direction", d)

    def basis(self):
        right = _normalize(_cross(self.direction, self.up))
        true_up = _cross(right, self.direction)
        return right, true_up


@dataclass(frozen=True)
class RenderParams:
    step: float = 0.08                    # sample spacing along the ray
    absorption: float = 25.0              # opacity per (density * length)
    max_distance: float = 8.0
    early_exit_alpha: float = 0.995
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    palette: tuple = DEFAULT_PALETTE

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.absorption < 0:
            raise ValueError("absorption must be >= 0")
        if not 0.0 < self.early_exit_alpha <= 1.0:
            raise ValueError("early_exit_alpha must be in (0, 1]")


@dataclass
class Image:
    """Row-major 8-bit RGB raster."""

    width: int
    height: int
    pixels: bytearray

    def tobytes(self) -> bytes:
        return bytes(self.pixels)


@dataclass
class RenderStats:
    rays: int = 0
    samples: int = 0


def generate_ray(camera: Camera, px: int, py: int):
    """Ray through the center of pixel (px, py); direction has unit length."""
    w, h = camera.resolution
    right, true_up = camera.basis()
    tan_half = math.tan(camera.fov / 2.0)
    aspect = w / h
    u = ((px + 0.5) / w * 2.0 - 1.0) * tan_half * aspect
    v = (1.0 - (py + 0.5) / h * 2.0) * tan_half
    d = camera.direction
    raw = (d[0] + u * right[0] + v * true_up[0],
           d[1] + u * right[1] + v * true_up[1],
           d[2] + u * right[2] + v * true_up[2])
    return camera.origin, _normalize(raw)


def sample_medium(state: SimulationState, point, palette=DEFAULT_PALETTE):
    """Density and blended material color of the medium at a point.

    Density is the usual kernel sum over in-range particles; the color is
    the palette blend weighted by each particle's density contribution.
    Zero density reports a zero-weight sample (the compositor then adds
    nothing for it).
    """
    x, y, z = point
    h = state.params.h
    h2 = h * h
    parts = state.particles
    index = state.index
    heads = index.heads
    nxt = index.next
    grid = index.grid
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    inv = 1.0 / grid.cell_size
    sqrt = math.sqrt

    from .sph import _cell_bounds
    x0, x1, y0, y1, z0, z1 = _cell_bounds(x, y, z, h, ox, oy, oz, inv,
                                          nx, ny, nz)
    rho = 0.0
    cr = cg = cb = 0.0
    for iz in range(z0, z1 + 1):
        zb = ny * iz
        for iy in range(y0, y1 + 1):
            rb = nx * (iy + zb)
            for ix in range(x0, x1 + 1):
                j = heads[rb + ix]
                while j != -1:
                    q = parts[j]
                    dx = x - q.x
                    dy = y - q.y
                    dz = z - q.z
                    r2 = dx * dx + dy * dy + dz * dz
                    if r2 < h2:
                        w = q.mass * kernel_w(sqrt(r2), h)
                        rho += w
                        col = palette[q.material if q.material < len(palette)
                                      else len(palette) - 1]
                        cr += w * col[0]
                        cg += w * col[1]
                        cb += w * col[2]
                    j = nxt[j]
    if rho <= 0.0:
        return 0.0, (0.0, 0.0, 0.0)
    return rho, (cr / rho, cg / rho, cb / rho)


def _particle_bounds(state: SimulationState, margin: float):
    parts = state.particles
    if not parts:
        return None
    xs = [p.x for p in parts]
    ys = [p.y for p in parts]
    zs = [p.z for p in parts]
    return ((min(xs) - margin, min(ys) - margin, min(zs) - margin),
            (max(xs) + margin, max(ys) + margin, max(zs) + margin))


def _clip_to_box(origin, direction, lo, hi, t0: float, t1: float):
    """Intersect [t0, t1] with the slab box; None when the ray misses it."""
    for o, d, a, b in zip(origin, direction, lo, hi):
        if d == 0.0:
            if o < a or o > b:
                return None
            continue
        ta = (a - o) / d
        tb = (b - o) / d
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return None
    return t0, t1


def composite_ray(state: SimulationState, ray, params: RenderParams,
                  sample_fn=None, alpha_trace: list | None = None,
                  stats: RenderStats | None = None, bounds=None):
    """Front-to-back emission-absorption march along one ray.

    Samples sit at t = step/2 + k*step up to max_distance. Per sample,
    alpha = 1 - exp(-absorption * density * step); color and opacity
    accumulate front to back and the march stops once accumulated opacity
    reaches the early-exit threshold. The remaining transparency is filled
    with the background color.

    With the default sampler, sample positions where the density is provably
    zero (outside the particle bounding box inflated by the smoothing
    radius) are skipped without evaluation; the skipped samples contribute
    exactly nothing, so the result is bit-identical to the full march.
    """
    origin, direction = ray
    half = params.step / 2.0
    kmax = int((params.max_distance - half) / params.step)
    if kmax < 0:
        kmax = -1
    k0, k1 = 0, kmax

    if sample_fn is None:
        if bounds is None:
            bounds = _particle_bounds(state, state.params.h)
        if bounds is None:
            k1 = -1
        else:
            clipped = _clip_to_box(origin, direction, bounds[0], bounds[1],
                                   0.0, params.max_distance)
            if clipped is None:
                k1 = -1
            else:
                # Widen by one sample each way: boundary samples have zero
                # density, and the slack absorbs float rounding in k.
                k0 = max(0, int((clipped[0] - half) / params.step) - 1)
                k1 = min(kmax, int((clipped[1] - half) / params.step) + 1)
        palette = params.palette
        sample_fn = lambda pt: sample_medium(state, pt, palette)  # noqa: E731

    ox, oy, oz = origin
    dx, dy, dz = direction
    sigma_dt = params.absorption * params.step
    limit = params.early_exit_alpha
    acc_r = acc_g = acc_b = 0.0
    alpha = 0.0
    taken = 0
    for k in range(k0, k1 + 1):
        t = half + k * params.step
        rho, color = sample_fn((ox + t * dx, oy + t * dy, oz + t * dz))
        taken += 1
        if rho > 0.0:
            a = 1.0 - math.exp(-sigma_dt * rho)
            w = (1.0 - alpha) * a
            acc_r += w * color[0]
            acc_g += w * color[1]
            acc_b += w * color[2]
            alpha += w
        if alpha_trace is not None:
            alpha_trace.append(alpha)
        if alpha >= limit:
            break
    if stats is not None:
        stats.samples += taken
    bg = params.background
    rest = 1.0 - alpha
    return (acc_r + rest * bg[0], acc_g + rest * bg[1], acc_b + rest * bg[2])


def _quantize(c: float) -> int:
    if c <= 0.0:
        return 0
    if c >= 1.0:
        return 255
    return int(c * 255.0 + 0.5)


def render_frame(state: SimulationState, camera: Camera,
                 params: RenderParams | None = None,
                 workers: int | None = None, pool=None,
                 stats: RenderStats | None = None) -> Image:
    """Render the snapshot to an 8-bit RGB image.

    Builds a fresh spatial index over the snapshot's current positions (the
    simulation may have moved particles since the state's index was built).
    Rows are claimed from a shared counter by the calling thread plus pool
    workers; any worker count yields identical bytes.
    """
    from .runtime import default_host_workers, shared_pool

    params = params or RenderParams()
    w, h = camera.resolution
    img = Image(w, h, bytearray(3 * w * h))
    state.index = build_index(state.particles, state.params.index_grid(),
                              state.index)
    if stats is not None:
        stats.rays += w * h

    right, true_up = camera.basis()
    tan_half = math.tan(camera.fov / 2.0)
    aspect = w / h
    d = camera.direction
    origin = camera.origin

    bounds = _particle_bounds(state, state.params.h)
    row_counter = [0]
    counter_lock = threading.Lock()
    pixels = img.pixels

    def render_rows():
        srow = RenderStats()
        while True:
            with counter_lock:
                py = row_counter[0]
                if py >= h:
                    break
                row_counter[0] += 1
            base = 3 * w * py
            v = (1.0 - (py + 0.5) / h * 2.0) * tan_half
            for px in range(w):
                u = ((px + 0.5) / w * 2.0 - 1.0) * tan_half * aspect
                direction = _normalize((d[0] + u * right[0] + v * true_up[0],
                                        d[1] + u * right[1] + v * true_up[1],
                                        d[2] + u * right[2] + v * true_up[2]))
                r, g, b = composite_ray(state, (origin, direction), params,
                                        stats=srow, bounds=bounds)
                off = base + 3 * px
                pixels[off] = _quantize(r)
                pixels[off + 1] = _quantize(g)
                pixels[off + 2] = _quantize(b)
        return srow

    k = default_host_workers() if workers is None else workers
    executor = pool or shared_pool()
    futures = [executor.submit(render_rows) for _ in range(1, k)]
    first = render_rows()
    rows_stats = [first] + [f.result() for f in futures]
    if stats is not None:
        stats.samples += sum(s.samples for s in rows_stats)
    return img


def write_ppm(image: Image, path) -> None:
    """Binary PPM, P6, maxval 255."""
    with open(path, "wb") as f:
        f.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        f.write(image.pixels)


def frame_filename(index: int) -> str:
    return f"frame_{index:05d}.ppm"
