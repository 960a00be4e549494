"""Hardware topology configuration and the 28nm physical PPA model.

Processor peak rates, die areas, and per-operation energies come from
post-layout characterization of the 16x16 array / 16-lane vector baseline at
800 MHz, extrapolated to the 32 and 64 variants.  Shared-memory area uses a
per-MiB constant calibrated so the 4-cluster reference configuration
(4x 64x64 arrays + 8x 64-lane vectors + 40 MiB per cluster) lands on its
known 633.8 mm2 total.  Memory access energies are generic 28nm SRAM / HBM2
constants; both are configurable.

Capacities use MiB (2**20 bytes); bandwidths use GB/s (1e9 bytes/s).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

MB = 1 << 20
SUPPORTED_DIMS = (16, 32, 64)


class ConfigError(Exception):
    pass


class UndefinedOpForProcessor(Exception):
    pass


@dataclass(frozen=True)
class SystolicArraySpec:
    dim: int
    clock_hz: float = 800e6
    input_buffer_bytes: int = 0  # dim x 2 KB unless overridden
    weight_buffer_bytes: int = 0
    output_buffer_bytes: int = 0  # dim x 4 KB unless overridden

    def __post_init__(self):
        if self.dim not in SUPPORTED_DIMS:
            raise ConfigError(f"unsupported systolic array dim {self.dim}")
        if not self.input_buffer_bytes:
            object.__setattr__(self, "input_buffer_bytes", self.dim * 2048)
        if not self.weight_buffer_bytes:
            object.__setattr__(self, "weight_buffer_bytes", self.dim * 2048)
        if not self.output_buffer_bytes:
            object.__setattr__(self, "output_buffer_bytes", self.dim * 4096)

    @property
    def peak_gops(self) -> float:
        return self.dim * self.dim * 2 * self.clock_hz / 1e9


@dataclass(frozen=True)
class VectorProcessorSpec:
    lanes: int
    clock_hz: float = 800e6
    io_buffer_bytes: int = 0

    def __post_init__(self):
        if self.lanes not in SUPPORTED_DIMS:
            raise ConfigError(f"unsupported vector lane count {self.lanes}")
        if not self.io_buffer_bytes:
            object.__setattr__(self, "io_buffer_bytes", self.lanes * 2048)

    @property
    def peak_gops(self) -> float:
        return self.lanes * 2 * self.clock_hz / 1e9


@dataclass(frozen=True)
class CycleConstants:
    """Per-element vector costs and the multi-cycle softmax stage costs."""

    activation: int = 1
    pooling: int = 1
    add: int = 1
    layernorm: int = 4
    softmax_exp: int = 4
    softmax_acc: int = 1
    softmax_div: int = 8


@dataclass(frozen=True)
class ClusterConfig:
    arrays: tuple[SystolicArraySpec, ...]
    vectors: tuple[VectorProcessorSpec, ...]
    shared_mem_bytes: int
    num_task_queues: int = 8

    def __post_init__(self):
        if not self.arrays or not self.vectors:
            raise ConfigError("a cluster needs >=1 systolic array and >=1 vector processor")
        if self.shared_mem_bytes <= 0:
            raise ConfigError("shared_mem_bytes must be positive")
        if self.num_task_queues < 1:
            raise ConfigError("num_task_queues must be >= 1")


@dataclass(frozen=True)
class HardwareConfig:
    clusters: tuple[ClusterConfig, ...]
    hbm_bandwidth_bytes_per_s: float = 256e9  # per cluster-attached channel
    hbm_latency_cycles: int = 100
    clock_hz: float = 800e6
    cycle_constants: CycleConstants = field(default_factory=CycleConstants)

    def __post_init__(self):
        if not self.clusters:
            raise ConfigError("need >=1 cluster")
        if self.hbm_bandwidth_bytes_per_s <= 0:
            raise ConfigError("hbm bandwidth must be positive")
        if self.clock_hz <= 0:
            raise ConfigError("clock must be positive")


# energy table keys for vector processors
VECTOR_ENERGY_KINDS = ("mac", "pooling", "lut", "reduction", "softmax", "etc")


@dataclass(frozen=True)
class PhysicalModel:
    """Area [mm2] and energy [pJ/op] lookup tables."""

    systolic_mac_pj: dict = field(default_factory=lambda: {16: 2.07, 32: 1.33, 64: 0.38})
    vector_pj: dict = field(default_factory=lambda: {
        "mac": {16: 6.11, 32: 6.16, 64: 6.19},
        "pooling": {16: 17.9, 32: 18.0, 64: 18.1},
        "lut": {16: 21.7, 32: 21.9, 64: 22.0},
        "reduction": {16: 27.3, 32: 27.6, 64: 27.7},
        "softmax": {16: 155.8, 32: 157.3, 64: 158.0},
        "etc": {16: 33.7, 32: 34.0, 64: 34.1},
    })
    systolic_area_mm2: dict = field(default_factory=lambda: {16: 1.69, 32: 4.35, 64: 13.00})
    vector_area_mm2: dict = field(default_factory=lambda: {16: 1.25, 32: 2.53, 64: 5.08})
    shared_mem_mm2_per_mb: float = 1.645  # calibrated against the reference die
    sram_pj_per_byte: float = 0.2
    dram_pj_per_byte: float = 31.2


DEFAULT_PHYSICAL = PhysicalModel()


def peak_performance(config: HardwareConfig) -> float:
    """Aggregate peak rate in GOPS (2 ops per MAC)."""
    return sum(spec.peak_gops
               for cl in config.clusters
               for spec in cl.arrays + cl.vectors)


def total_area(config: HardwareConfig, physical: PhysicalModel = DEFAULT_PHYSICAL) -> float:
    """Die area in mm2: processors plus shared memories."""
    area = 0.0
    for cl in config.clusters:
        area += sum(physical.systolic_area_mm2[a.dim] for a in cl.arrays)
        area += sum(physical.vector_area_mm2[v.lanes] for v in cl.vectors)
        area += physical.shared_mem_mm2_per_mb * (cl.shared_mem_bytes / MB)
    return area


def energy_of(op_kind: str, count: int,
              spec: SystolicArraySpec | VectorProcessorSpec,
              physical: PhysicalModel = DEFAULT_PHYSICAL) -> float:
    """Joules for ``count`` operations of ``op_kind`` on the given processor."""
    if count < 0:
        raise ValueError("op count must be non-negative")
    if isinstance(spec, SystolicArraySpec):
        if op_kind != "mac":
            raise UndefinedOpForProcessor(
                f"systolic arrays only run MACs, not {op_kind!r}")
        return count * physical.systolic_mac_pj[spec.dim] * 1e-12
    if op_kind not in physical.vector_pj:
        raise UndefinedOpForProcessor(f"no vector energy entry for {op_kind!r}")
    return count * physical.vector_pj[op_kind][spec.lanes] * 1e-12


# map op-level vector work onto the energy table rows; normalization and
# element-wise ops land on the catch-all row
VECTOR_ENERGY_FOR_OP = {
    "pool": "pooling",
    "activation": "lut",
    "softmax": "softmax",
    "layernorm": "etc",
    "add": "etc",
}


# ---------------------------------------------------------------------------
# config file handling

def load_hw_config(source) -> HardwareConfig:
    """Parse a hardware config from a JSON file path, text, or dict.

    Keys: clock_mhz, hbm_gbps, hbm_latency_cycles, clusters[] with
    arrays[].dim, vectors[].lanes, shared_mem_mb and optional
    num_task_queues, plus optional cycle_constants overrides.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if hasattr(source, "read"):
            text = source.read()
        elif isinstance(source, str) and not source.lstrip().startswith("{"):
            try:
                with open(source) as f:
                    text = f.read()
            except OSError as e:
                raise ConfigError(f"cannot read hardware config: {e}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"hardware config is not valid JSON: {e}") from None
    try:
        clock_hz = float(doc.get("clock_mhz", 800)) * 1e6
        cc = CycleConstants(**doc.get("cycle_constants", {}))
        clusters = []
        for cl in doc["clusters"]:
            arrays = tuple(SystolicArraySpec(int(a["dim"]), clock_hz)
                           for a in cl["arrays"])
            vectors = tuple(VectorProcessorSpec(int(v["lanes"]), clock_hz)
                            for v in cl["vectors"])
            clusters.append(ClusterConfig(
                arrays, vectors,
                shared_mem_bytes=int(float(cl["shared_mem_mb"]) * MB),
                num_task_queues=int(cl.get("num_task_queues", 8))))
        return HardwareConfig(
            clusters=tuple(clusters),
            hbm_bandwidth_bytes_per_s=float(doc.get("hbm_gbps", 256)) * 1e9,
            hbm_latency_cycles=int(doc.get("hbm_latency_cycles", 100)),
            clock_hz=clock_hz,
            cycle_constants=cc)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad hardware config: {e!r}") from None


def hw_config_to_dict(config: HardwareConfig) -> dict:
    return {
        "clock_mhz": config.clock_hz / 1e6,
        "hbm_gbps": config.hbm_bandwidth_bytes_per_s / 1e9,
        "hbm_latency_cycles": config.hbm_latency_cycles,
        "clusters": [
            {"arrays": [{"dim": a.dim} for a in cl.arrays],
             "vectors": [{"lanes": v.lanes} for v in cl.vectors],
             "shared_mem_mb": cl.shared_mem_bytes / MB,
             "num_task_queues": cl.num_task_queues}
            for cl in config.clusters
        ],
    }


def make_cluster(num_arrays: int, array_dim: int, num_vectors: int,
                 vector_lanes: int, shared_mem_mb: float, *,
                 clock_hz: float = 800e6, num_task_queues: int = 8) -> ClusterConfig:
    return ClusterConfig(
        arrays=tuple(SystolicArraySpec(array_dim, clock_hz) for _ in range(num_arrays)),
        vectors=tuple(VectorProcessorSpec(vector_lanes, clock_hz) for _ in range(num_vectors)),
        shared_mem_bytes=int(shared_mem_mb * MB),
        num_task_queues=num_task_queues)


def make_hw(num_clusters: int, cluster: ClusterConfig, *,
            hbm_gbps: float = 256, hbm_latency_cycles: int = 100,
            clock_hz: float = 800e6) -> HardwareConfig:
    return HardwareConfig(clusters=tuple(cluster for _ in range(num_clusters)),
                          hbm_bandwidth_bytes_per_s=hbm_gbps * 1e9,
                          hbm_latency_cycles=hbm_latency_cycles,
                          clock_hz=clock_hz)
