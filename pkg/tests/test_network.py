import numpy as np
import pytest

from gridtwin.errors import BranchEditError, CaseSemanticError, CaseSyntaxError
from gridtwin.matpower import convert_matpower, matpower_to_network
from gridtwin.network import (Branch, Bus, BusKind, DuplicateBranch, Network, RemoveDuplicate,
                              SetBranchParameter, apply_branch_edit, branches_between,
                              build_ybus, edit_from_dict, format_case, parse_case)

from oracles import FIXTURES, ybus_loops

TWO_BUS = """
BASE_MVA
100
BUS
1 3 0 0 0 0 1.0 0
2 1 0 0 0 0 1.0 0
BRANCH
1 2 0 0.1 0 1 1
GEN
1 0 0 1.0
"""


def test_ieee9_bus_kinds(net9):
    kinds = {b.id: b.kind for b in net9.buses}
    assert kinds[1] is BusKind.SLACK
    assert kinds[2] is kinds[3] is BusKind.PV
    assert all(kinds[k] is BusKind.PQ for k in range(4, 10))
    assert net9.base_mva == 100.0


def test_118_keeps_both_49_66_records(net118):
    recs = branches_between(net118, 49, 66)
    assert len(recs) == 2
    a, b = (net118.branches[k] for k in recs)
    assert a == b


def test_empty_case_is_semantic_error():
    with pytest.raises(CaseSemanticError):
        parse_case("BASE_MVA\n100\nBUS\nBRANCH\nGEN\n")


def test_syntax_error_reports_line():
    text = TWO_BUS.replace("1 2 0 0.1 0 1 1", "1 2 0 zero 0 1 1")
    with pytest.raises(CaseSyntaxError) as err:
        parse_case(text)
    assert err.value.line == 8


@pytest.mark.parametrize("edit, message", [
    ("2 1 0 0 0 0 1.0 0", "no slack"),
    ("3 1 0 0 0 0 1.0 0\n1 3 0 0 0 0 1.0 0", "two slacks"),
])
def test_slack_count_enforced(edit, message):
    text = TWO_BUS.replace("1 3 0 0 0 0 1.0 0\n", "").replace("2 1 0 0 0 0 1.0 0", edit)
    with pytest.raises(CaseSemanticError):
        parse_case(text)


def test_dangling_endpoint_and_base():
    with pytest.raises(CaseSemanticError):
        parse_case(TWO_BUS.replace("1 2 0 0.1", "1 7 0 0.1"))
    with pytest.raises(CaseSemanticError):
        parse_case(TWO_BUS.replace("100", "-5"))


def test_disconnected_network_rejected():
    text = TWO_BUS.replace("1 2 0 0.1 0 1 1", "1 2 0 0.1 0 1 0")
    with pytest.raises(CaseSemanticError):
        parse_case(text)


def test_two_bus_ybus():
    net = parse_case(TWO_BUS)
    y = build_ybus(net)
    np.testing.assert_allclose(y.b.toarray(), [[-10, 10], [10, -10]])
    assert not y.g.toarray().any()


def test_parallel_branches_add():
    net = apply_branch_edit(parse_case(TWO_BUS), DuplicateBranch(1, 2))
    np.testing.assert_allclose(build_ybus(net).b.toarray(), [[-20, 20], [20, -20]])


@pytest.mark.parametrize("name", ["ieee9", "ieee118"])
def test_ybus_matches_loop_builder(name, net9, net118):
    net = net9 if name == "ieee9" else net118
    np.testing.assert_allclose(build_ybus(net).to_dense(), ybus_loops(net), rtol=0, atol=1e-12)


def test_ybus_sparsity_follows_adjacency(net118):
    y = build_ybus(net118).to_dense()
    pattern = y != 0
    assert (pattern == pattern.T).all()
    adj = np.eye(net118.n_buses, dtype=bool)
    for br in net118.branches:
        i, j = net118.bus_position(br.from_bus), net118.bus_position(br.to_bus)
        adj[i, j] = adj[j, i] = True
    assert (pattern == adj).all()


def test_remove_duplicate(net118):
    fixed = apply_branch_edit(net118, RemoveDuplicate(66, 49))
    assert len(branches_between(fixed, 49, 66)) == 1
    assert len(branches_between(net118, 49, 66)) == 2
    assert len(fixed.branches) == len(net118.branches) - 1


def test_remove_duplicate_needs_duplicate(net9):
    with pytest.raises(BranchEditError):
        apply_branch_edit(net9, RemoveDuplicate(4, 5))
    with pytest.raises(BranchEditError):
        apply_branch_edit(net9, RemoveDuplicate(1, 9))


def test_zero_impedance_edit_rejected():
    net = parse_case(TWO_BUS)
    with pytest.raises(CaseSemanticError):
        apply_branch_edit(net, SetBranchParameter(1, 2, "x", 0.0))


def test_edit_from_dict_round_trip():
    assert edit_from_dict({"op": "remove-duplicate", "from_bus": 49, "to_bus": 66}) == \
        RemoveDuplicate(49, 66)
    with pytest.raises(BranchEditError):
        edit_from_dict({"op": "explode"})


@pytest.mark.parametrize("name", ["ieee9", "ieee118"])
def test_format_parse_round_trip(name, net9, net118):
    net = net9 if name == "ieee9" else net118
    assert parse_case(format_case(net)) == net


def test_fixtures_equal_converted_matpower():
    for mfile, case in (("case9.m", "ieee9.case"), ("case118.m", "ieee118.case")):
        text = (FIXTURES.parent / "data" / "matpower" / mfile).read_text()
        assert parse_case(convert_matpower(text)) == parse_case((FIXTURES / case).read_text())


def test_matpower_rejects_phase_shifter():
    text = (FIXTURES.parent / "data" / "matpower" / "case9.m").read_text()
    text = text.replace("250\t0\t0\t1\t-360", "250\t0\t5\t1\t-360", 1)
    with pytest.raises(CaseSemanticError):
        matpower_to_network(text)


def test_network_is_immutable(net9):
    with pytest.raises(Exception):
        net9.base_mva = 1.0
    bus = Bus(1, BusKind.SLACK, 0, 0, 0, 0, 1.0, 0)
    with pytest.raises(CaseSemanticError):
        Network((bus,), (Branch(1, 1, 0, 0.1, 0),), (), 100.0)
