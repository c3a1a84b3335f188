"""Case parsing, admittance assembly, and the bus partition."""

import numpy as np
import pytest

from conftest import TOY2_TEXT
from opfproxy.cases import list_cases, load_case
from opfproxy.grid import (CaseParseError, CaseValidationError, network_to_json,
                           parse_case)


def test_toy_dimensions(toy2):
    assert toy2.n_bus == 2
    assert toy2.n_branch == 1
    part = toy2.partition
    assert part.gen.size == 0
    assert part.load.tolist() == [1]
    assert part.n_setpoint == 1
    assert part.n_state == 2


def test_toy_admittance(toy2):
    y = toy2.admittance.ybus.toarray()
    assert np.max(np.abs(y.real)) == 0.0
    assert np.allclose(y.imag, [[-10.0, 10.0], [10.0, -10.0]], atol=1e-12)


def test_shunt_adds_to_diagonal(toy2):
    text = TOY2_TEXT.replace("2 1 10 0 0 0", "2 1 10 0 0 5")
    net = parse_case(text, "toy2s")
    y = net.admittance.ybus.toarray()
    ## Bs = 5 MVAr at V=1 -> 0.05 pu on the diagonal
    assert y.imag[1, 1] == pytest.approx(-10.0 + 0.05, abs=1e-12)
    assert y.imag[0, 0] == pytest.approx(-10.0, abs=1e-12)


def test_duplicate_reference_rejected():
    text = TOY2_TEXT.replace("2 1 10", "2 3 10")
    with pytest.raises(CaseValidationError, match="reference"):
        parse_case(text)


def test_islanded_bus_rejected():
    ## drop the only line; bus 2 becomes unreachable
    text = TOY2_TEXT.replace("1 2 0 0.1 0 0 0 0 0 0 1 -360 360;", "")
    with pytest.raises(CaseValidationError, match="islanded"):
        parse_case(text)


def test_zero_impedance_branch_rejected():
    text = TOY2_TEXT.replace("1 2 0 0.1", "1 2 0 0")
    with pytest.raises((CaseParseError, CaseValidationError)):
        parse_case(text)


def test_malformed_table_reports_row():
    text = TOY2_TEXT.replace("1 2 0 0.1", "1 2 zz 0.1")
    with pytest.raises(CaseParseError, match="row"):
        parse_case(text)


def test_ieee118_shape(case118):
    assert case118.n_bus == 118
    kinds = [b.kind for b in case118.buses]
    assert kinds.count("ref") == 1


def test_branch_only_row_sums_near_zero(case118):
    """Independent stamp check: without shunts each admittance row sums
    to the branch charging contribution, which is zero for this case."""
    shunt = np.array([b.shunt_g + 1j * b.shunt_b for b in case118.buses])
    rows = np.asarray(case118.admittance.ybus.sum(axis=1)).ravel() - shunt
    assert np.max(np.abs(rows)) < 1e-9


def test_flat_branch_stamps_reduce_to_series(case9):
    adm = case9.admittance
    for k, br in enumerate(case9.branches):
        if br.tap != 1.0 or br.charging != 0.0:
            continue
        ys = 1.0 / (br.r + 1j * br.x)
        assert adm.yff[k] == pytest.approx(ys, rel=1e-14)
        assert adm.yft[k] == pytest.approx(-ys, rel=1e-14)


def test_pattern_symmetric(case118):
    y = case118.admittance.ybus
    diff = (y != 0).astype(int) - (y.T != 0).astype(int)
    assert abs(diff).sum() == 0


def test_generator_on_reference_only():
    net = parse_case(TOY2_TEXT)
    part = net.partition
    assert part.gen.size == 0
    assert part.load.size == net.n_bus - 1


def test_dimension_identity_all_cases():
    for name in list_cases():
        net = load_case(name)
        part = net.partition
        ng, nd, m = part.gen.size, part.load.size, net.n_branch
        assert part.n_setpoint == 2 * ng + 1
        assert part.n_state == 2 * nd + ng
        total = (2 * ng + 1) + (2 * nd + ng) + (2 + ng + m)
        assert total == part.n_setpoint + part.n_state + 2 + ng + m


def test_partition_deterministic(case118):
    part = case118.partition
    assert np.all(np.diff(part.gen) > 0)
    assert np.all(np.diff(part.load) > 0)
    assert np.all(np.diff(part.nonref) > 0)
    joined = np.sort(np.concatenate([[part.ref], part.gen, part.load]))
    assert joined.tolist() == list(range(case118.n_bus))


def test_json_round_trip(case9):
    doc = network_to_json(case9)
    again = parse_case(doc)
    assert again.name == case9.name
    assert again.base_mva == case9.base_mva
    assert again.buses == case9.buses
    assert again.branches == case9.branches
    assert again.generators == case9.generators


def test_json_round_trip_toy(toy2):
    again = parse_case(network_to_json(toy2))
    assert again.buses == toy2.buses
    assert again.branches == toy2.branches


def test_unit_aggregation():
    ## second unit on the reference bus: bounds sum, costs refit
    text = TOY2_TEXT.replace(
        "mpc.gen = [\n 1 0 0 100 -100 1 100 1 300 -300;\n];",
        "mpc.gen = [\n 1 0 0 100 -100 1 100 1 300 -300;\n"
        " 1 0 0 50 -50 1 100 1 100 -100;\n];",
    ).replace(
        "mpc.gencost = [\n 2 0 0 3 0.02 30 0;\n];",
        "mpc.gencost = [\n 2 0 0 3 0.02 30 0;\n 2 0 0 3 0.04 10 0;\n];",
    )
    net = parse_case(text)
    assert len(net.generators) == 1
    g = net.generators[0]
    assert g.p_max == pytest.approx(4.0)   # (300 + 100) MW on base 100
    assert g.q_max == pytest.approx(1.5)


def test_single_bus_case_parses():
    text = """
function mpc = one
mpc.baseMVA = 100;
mpc.bus = [ 1 3 50 10 0 0 1 1 0 138 1 1.06 0.94; ];
mpc.gen = [ 1 0 0 80 -80 1 100 1 120 0; ];
mpc.branch = [ ];
mpc.gencost = [ 2 0 0 3 0.1 40 0; ];
"""
    net = parse_case(text)
    assert net.n_bus == 1
    assert net.n_branch == 0
    assert net.partition.n_state == 0
