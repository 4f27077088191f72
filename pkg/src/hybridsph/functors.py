"""Serializable per-item actions for hybrid_for_each.

A functor carries everything a device needs to apply it: its own fields plus
any shared state, all flattened through the codec registered under its
``wire_name``. A device copy is rebuilt from those bytes and discarded after
the call; changes to functor fields on a device are never reflected on the
host. ``apply`` may mutate its argument in place and must return the item
(the sequence slot is assigned from the return value, which also supports
immutable item types).

``item_codec`` names the codec for the items the functor processes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import sph
from .wire import (ByteReader, ByteWriter, I32_CODEC, I64_CODEC,
                   register_functor)


@dataclass
class AffineAction:
    """The minimal example action: x -> x * scale + 2 on 32-bit ints."""

    scale: int

    wire_name = "affine-i32"
    item_codec = I32_CODEC

    def apply(self, x: int) -> int:
        return x * self.scale + 2


class _AffineCodec:
    def serialize(self, f: AffineAction, w: ByteWriter) -> int:
        return w.write_i32(f.scale)

    def deserialize(self, r: ByteReader) -> AffineAction:
        return AffineAction(r.read_i32())

    def size(self, f: AffineAction) -> int:
        return 4


@dataclass
class SleepAction:
    """Benchmark action: sleep a fixed interval per item, return item + 1.

    The sleep stands in for compute cost without holding the interpreter
    lock, so worker and device parallelism behaves like genuinely concurrent
    hardware even on a small machine.
    """

    delay_s: float

    wire_name = "sleep-i64"
    item_codec = I64_CODEC

    def apply(self, x: int) -> int:
        if self.delay_s > 0:
            time.sleep(self.delay_s)
        return x + 1


class _SleepCodec:
    def serialize(self, f: SleepAction, w: ByteWriter) -> int:
        return w.write_f64(f.delay_s)

    def deserialize(self, r: ByteReader) -> SleepAction:
        return SleepAction(r.read_f64())

    def size(self, f: SleepAction) -> int:
        return 8


@dataclass
class JitterSleepAction:
    """Value-dependent delay then an affine transform; exercises schedulers
    with unpredictable per-item cost."""

    base_s: float
    modulus: int

    wire_name = "jitter-sleep-i64"
    item_codec = I64_CODEC

    def apply(self, x: int) -> int:
        d = self.base_s * (x % self.modulus)
        if d > 0:
            time.sleep(d)
        return x * 3 + 2


class _JitterSleepCodec:
    def serialize(self, f: JitterSleepAction, w: ByteWriter) -> int:
        return w.write_f64(f.base_s) + w.write_u32(f.modulus)

    def deserialize(self, r: ByteReader) -> JitterSleepAction:
        return JitterSleepAction(r.read_f64(), r.read_u32())

    def size(self, f: JitterSleepAction) -> int:
        return 12


class DensityGravityAction:
    """Density + pressure + gravity sampling over a shared state snapshot."""

    __slots__ = ("state",)

    wire_name = "sph-density-gravity"
    item_codec = sph.PARTICLE_CODEC

    def __init__(self, state: sph.SimulationState):
        self.state = state

    def apply(self, p: sph.Particle) -> sph.Particle:
        return sph.phase2_density_gravity(self.state, p)


class PressureForceAction:
    """Pressure-force accumulation over a shared state snapshot."""

    __slots__ = ("state",)

    wire_name = "sph-pressure"
    item_codec = sph.PARTICLE_CODEC

    def __init__(self, state: sph.SimulationState):
        self.state = state

    def apply(self, p: sph.Particle) -> sph.Particle:
        return sph.phase3_pressure(self.state, p)


class _StateActionCodec:
    """Shared codec for the two SPH phase actions: the payload is the whole
    simulation state; the spatial index is rebuilt on the receiving side."""

    __slots__ = ("_cls",)

    def __init__(self, cls):
        self._cls = cls

    def serialize(self, f, w: ByteWriter) -> int:
        return sph.SIM_STATE_CODEC.serialize(f.state, w)

    def deserialize(self, r: ByteReader):
        return self._cls(sph.SIM_STATE_CODEC.deserialize(r))

    def size(self, f) -> int:
        return sph.SIM_STATE_CODEC.size(f.state)


@dataclass
class IntegrateAction:
    """Phase-4 position/velocity update; host-local only, never offloaded."""

    dt: float

    wire_name = "sph-integrate"
    item_codec = sph.PARTICLE_CODEC

    def apply(self, p: sph.Particle) -> sph.Particle:
        return sph.phase4_integrate(p, self.dt)


register_functor(AffineAction.wire_name, _AffineCodec())
register_functor(SleepAction.wire_name, _SleepCodec())
register_functor(JitterSleepAction.wire_name, _JitterSleepCodec())
register_functor(DensityGravityAction.wire_name,
                 _StateActionCodec(DensityGravityAction))
register_functor(PressureForceAction.wire_name,
                 _StateActionCodec(PressureForceAction))
