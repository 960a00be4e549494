import pytest

from svsim.hardware import (ClusterConfig, ConfigError, HardwareConfig,
                            PhysicalModel, SystolicArraySpec,
                            UndefinedOpForProcessor, VectorProcessorSpec,
                            energy_of, hw_config_to_dict, load_hw_config,
                            make_cluster, make_hw, peak_performance, total_area)

PHYS = PhysicalModel()


# peak-rate characterization table at 800 MHz
PEAK_TABLE = {
    ("vector", 16): 25.6, ("vector", 32): 51.2, ("vector", 64): 102.4,
    ("array", 16): 409.6, ("array", 32): 1638.4, ("array", 64): 6553.6,
}


@pytest.mark.parametrize("kind,size", sorted(PEAK_TABLE))
def test_peak_rate_cells_exact(kind, size):
    spec = SystolicArraySpec(size) if kind == "array" else VectorProcessorSpec(size)
    assert spec.peak_gops == pytest.approx(PEAK_TABLE[(kind, size)], abs=0)


def test_peak_performance_single_processors():
    hw = make_hw(1, make_cluster(1, 16, 1, 64, 45))
    assert peak_performance(hw) == pytest.approx(409.6 + 102.4)


def test_peak_performance_reference_scale_config():
    hw = make_hw(4, make_cluster(4, 64, 8, 64, 40))
    assert peak_performance(hw) == pytest.approx(108134.4)


def test_area_lookups():
    hw = make_hw(1, make_cluster(1, 32, 1, 16, 1))
    assert total_area(hw) - PHYS.shared_mem_mm2_per_mb == pytest.approx(4.35 + 1.25)


def test_area_reference_config_calibration():
    # 4 clusters x (4x 64x64 arrays + 8x 64-lane vectors + 40 MiB) -> 633.8 mm2
    hw = make_hw(4, make_cluster(4, 64, 8, 64, 40))
    assert total_area(hw) == pytest.approx(633.8, rel=0.05)


def test_area_monotone_in_size_and_count():
    base = total_area(make_hw(1, make_cluster(1, 16, 1, 16, 45)))
    assert total_area(make_hw(1, make_cluster(2, 16, 1, 16, 45))) > base
    assert total_area(make_hw(1, make_cluster(1, 32, 1, 16, 45))) > base
    assert total_area(make_hw(1, make_cluster(1, 16, 2, 16, 45))) > base
    assert total_area(make_hw(1, make_cluster(1, 16, 1, 32, 45))) > base
    assert total_area(make_hw(1, make_cluster(1, 16, 1, 16, 65))) > base
    assert total_area(make_hw(2, make_cluster(1, 16, 1, 16, 45))) > base


def test_energy_macs_on_16x16_array():
    assert energy_of("mac", 10**6, SystolicArraySpec(16)) == pytest.approx(2.07e-6)


def test_energy_softmax_on_16_lane_vector():
    assert energy_of("softmax", 10**3, VectorProcessorSpec(16)) == pytest.approx(155.8e-9)


def test_energy_pooling_undefined_on_array():
    with pytest.raises(UndefinedOpForProcessor):
        energy_of("pooling", 10, SystolicArraySpec(16))


def test_energy_linear_and_zero():
    one = energy_of("mac", 1, VectorProcessorSpec(64))
    assert energy_of("mac", 0, VectorProcessorSpec(64)) == 0.0
    assert energy_of("mac", 1000, VectorProcessorSpec(64)) == pytest.approx(1000 * one)


def test_energy_table_covers_all_vector_rows():
    for row in ("mac", "pooling", "lut", "reduction", "softmax", "etc"):
        for lanes in (16, 32, 64):
            assert energy_of(row, 1, VectorProcessorSpec(lanes)) > 0


# --- config validation -------------------------------------------------------

def test_unsupported_dim_rejected():
    with pytest.raises(ConfigError):
        SystolicArraySpec(24)
    with pytest.raises(ConfigError):
        VectorProcessorSpec(128)


def test_cluster_needs_both_processor_kinds():
    with pytest.raises(ConfigError):
        ClusterConfig(arrays=(), vectors=(VectorProcessorSpec(16),),
                      shared_mem_bytes=1 << 20)
    with pytest.raises(ConfigError):
        ClusterConfig(arrays=(SystolicArraySpec(16),), vectors=(),
                      shared_mem_bytes=1 << 20)


def test_hw_needs_cluster_and_positive_bandwidth():
    with pytest.raises(ConfigError):
        HardwareConfig(clusters=())
    with pytest.raises(ConfigError):
        make_hw(1, make_cluster(1, 16, 1, 16, 45), hbm_gbps=0)


def test_config_file_round_trip(tmp_path):
    hw = make_hw(2, make_cluster(2, 32, 4, 64, 65), hbm_gbps=128)
    path = tmp_path / "hw.json"
    import json
    path.write_text(json.dumps(hw_config_to_dict(hw)))
    loaded = load_hw_config(str(path))
    assert loaded == hw


def test_config_rejects_garbage():
    with pytest.raises(ConfigError):
        load_hw_config('{"clusters": [{"arrays": []}]}')
    with pytest.raises(ConfigError):
        load_hw_config("not json {")
