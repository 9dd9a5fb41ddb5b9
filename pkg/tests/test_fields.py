import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nv0orbit.fields import (
    DEFAULT_ELECTRODES,
    ElectrodeGeometry,
    FieldVectorLab,
    FieldVectorNV,
    effective_drive,
    electrode_field,
    geometry_to_toml,
    lab_to_nv,
    load_geometry,
    load_geometry_text,
    power_to_amplitude,
    save_geometry,
)
from nv0orbit.hamiltonian import NVParams, drive_field, eigen_closed_form

# NV-frame fields per volt as printed alongside the FEM lab-frame values (V/m)
PRINTED_NV = {"dc": (-8571.3, 12497.6, 25932.3), "ac": (-9998.0, 13763.6, 16009.6)}


@pytest.mark.parametrize("name", ["dc", "ac"])
def test_printed_nv_frame_vectors(name):
    geom = ElectrodeGeometry()
    e = lab_to_nv(electrode_field(geom, name, 1.0), geom)
    for got, want in zip(e.as_array(), PRINTED_NV[name]):
        assert got == pytest.approx(want, rel=1e-3)


def test_common_mode_field_per_volt():
    # E_z of the dc electrode is 259.32 V/cm per volt
    geom = ElectrodeGeometry()
    assert lab_to_nv(electrode_field(geom, "dc", 1.0), geom).E_z / 100 == pytest.approx(259.32, abs=0.01)


vec = st.floats(-1e6, 1e6, allow_nan=False)


@given(vec, vec, vec)
def test_frame_rotation_preserves_norm(x, y, z):
    geom = ElectrodeGeometry()
    lab = FieldVectorLab(x, y, z)
    nv = lab_to_nv(lab, geom)
    assert np.linalg.norm(nv.as_array()) == pytest.approx(np.linalg.norm(lab.as_array()), rel=1e-12, abs=1e-9)


def test_axis_sign_flips_vector():
    lab = FieldVectorLab(1.0, 2.0, 3.0)
    a = lab_to_nv(lab, ElectrodeGeometry())
    b = lab_to_nv(lab, ElectrodeGeometry(nv_axis_sign=-1))
    assert np.allclose(a.as_array(), -b.as_array())


def test_electrode_field_is_linear_and_names_known_electrodes():
    geom = ElectrodeGeometry()
    assert electrode_field(geom, "dc", 2.5).as_array() == pytest.approx(2.5 * np.array(DEFAULT_ELECTRODES["dc"]))
    with pytest.raises(KeyError, match="ac, dc"):
        electrode_field(geom, "rf", 1.0)


def test_geometry_validation():
    with pytest.raises(ValueError, match="sin_theta"):
        ElectrodeGeometry(sin_theta=0.5, cos_theta=0.5)
    with pytest.raises(ValueError):
        ElectrodeGeometry(electrodes={"a": (1.0, math.nan, 0.0)})
    with pytest.raises(ValueError):
        FieldVectorLab(math.inf, 0, 0)


def test_power_to_amplitude_one_microwatt():
    # 7.1 mV rms x sqrt(2) x 2 = 20 mV
    assert power_to_amplitude(ElectrodeGeometry(), 1e-6) == pytest.approx(0.020, abs=5e-5)
    assert power_to_amplitude(ElectrodeGeometry(), 0.0) == 0.0
    with pytest.raises(ValueError):
        power_to_amplitude(ElectrodeGeometry(), -1e-6)


def test_effective_drive_per_microwatt():
    # hand evaluation: ac NV-frame field (-9997.99, 13763.6) V/m per V times 20 mV,
    # polarisation lambda/R = 4.80/6.28678 = 0.763507
    pol = 4.80 / math.hypot(4.80, 4.06)
    want = math.hypot(pol * -9997.99 * 0.02, 13763.6 * 0.02)
    assert drive_field(NVParams(), ElectrodeGeometry(), 1e-6) == pytest.approx(want, rel=1e-5)
    assert want == pytest.approx(314.77, abs=0.01)


def test_effective_drive_limits():
    _, _, mix = eigen_closed_form(NVParams(eps_perp=0.0))
    assert effective_drive(FieldVectorNV(3.0, 4.0, 0.0), mix) == pytest.approx(5.0)


def test_toml_round_trip_default(tmp_path):
    geom = ElectrodeGeometry()
    path = tmp_path / "geom.toml"
    save_geometry(geom, path)
    again = load_geometry(path)
    assert again == geom
    assert geometry_to_toml(again) == path.read_text()


names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_-0123456789 .\"", min_size=1, max_size=8)
comp = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.dictionaries(names, st.tuples(comp, comp, comp), min_size=1, max_size=4),
       st.floats(0.0, 1.0), st.floats(1e-3, 1e4), st.sampled_from([1, -1]))
def test_toml_round_trip_bit_exact(electrodes, s, r, sign):
    geom = ElectrodeGeometry(electrodes, s, math.sqrt(1 - s * s), r, sign)
    text = geometry_to_toml(geom)
    again = load_geometry_text(text)
    assert again == geom
    assert geometry_to_toml(again) == text
    for k in geom.electrodes:
        assert all(a.hex() == b.hex() for a, b in zip(geom.electrodes[k], again.electrodes[k]))


def test_unknown_geometry_key_reports_path():
    with pytest.raises(KeyError, match="geometry.tilt"):
        load_geometry_text("tilt = 1.0\n")
