import json
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from qesguard.detector import init_detector, layer_counts, preset
from qesguard.early_exit import DetectionOutcome
from qesguard.energy import (
    PJ, AccessCounts, HardwareProfile, baseline_report, count_layer, counts_energy_pj, detection_breakdown,
    detection_energy, load_profile, network_counts, report, default_profile, transmission_energy,
)

PROF = default_profile()
ONES = AccessCounts(1, 1, 1, 1, 1)


def _out(verdict, counts):
    return DetectionOutcome(verdict, len(counts), [0.0] * len(counts), list(counts))


def test_profile_constants_exact():
    assert PROF.mac(16) == Fraction("0.92") and PROF.mac(4) == Fraction("0.0575")
    assert PROF.e_dram_pj == 184 and PROF.e_cache_pj == 10 and PROF.e_spad_pj == Fraction("1.7")
    assert PROF.e_transmit_mj == Fraction("6.8")
    assert default_profile("tinyimagenet").e_transmit_mj == Fraction("13.6")
    with pytest.raises(ValueError):
        PROF.mac(10)


def test_profile_validation():
    d = {"e_mac_pj": {"4": 1}, "e_acc_pj": {"4": 1}, "e_dram_pj": 1, "e_cache_pj": 1, "e_spad_pj": 1,
         "e_transmit_mj": 1}
    with pytest.raises(ValueError, match="missing"):
        HardwareProfile.from_dict(d)


def test_profile_file_roundtrip(tmp_path):
    p = tmp_path / "prof.json"
    p.write_text(json.dumps(PROF.to_dict()))
    assert load_profile(p) == PROF


def test_d1_layer1_counts():
    c = count_layer(3, 8, 3, 2, 1, 32, 32, first_layer=True)
    assert c.n_mac == 8 * 16 * 16 * 3 * 3 * 3 == 55_296
    assert c.n_acc == 2_048
    assert c.r_dram == 3 * 32 * 32
    assert c.r_cache == 3 * 32 * 32 * 3 + 8 * 27 + 2048
    assert c.r_spad == 3 * 55_296


def test_stride_one_variant():
    assert count_layer(3, 8, 3, 1, 1, 32, 32, True).n_mac == 221_184


def test_later_layers_skip_dram():
    counts = network_counts(preset("D1").layers, (3, 32, 32))
    assert counts[0].r_dram > 0 and counts[1].r_dram == 0 and counts[2].r_dram == 0
    assert [c.n_acc for c in counts] == [8 * 256, 16 * 64, 32 * 16]


def test_empty_outcomes_zero():
    assert detection_energy([], PROF, 16) == 0


def test_unit_counts_196_89_pj():
    e = detection_energy([_out("natural", [ONES])], PROF, 16)
    assert e == Fraction("196.89") * PJ


def test_lower_precision_cheaper():
    outs = [_out("natural", [AccessCounts(0, 0, 0, 100, 10)])]
    assert detection_energy(outs, PROF, 4) < detection_energy(outs, PROF, 16)


def test_unknown_bits_error():
    with pytest.raises(ValueError):
        detection_energy([_out("natural", [ONES])], PROF, 7)


def test_transmission_examples():
    assert transmission_energy(0, 10_000, 1, 0, PROF)[1] == 0
    assert transmission_energy(0, 10_000, 1, 1, PROF)[1] == 68
    assert transmission_energy(10_000, 0, 1, 1, default_profile("tinyimagenet"))[0] == 136
    with pytest.raises(ValueError):
        transmission_energy(1, 1, Fraction(3, 2), 0, PROF)


def test_report_decomposition_and_perfect_detector():
    counts = layer_counts(init_detector(preset("D1")))
    nat = [_out("natural", counts) for _ in range(3)]
    adv = [_out("adversarial", counts[:1]) for _ in range(2)]
    r = report(nat, adv, PROF, 16)
    assert r.p == 1 and r.q == 0 and r.e_ta == 0
    assert r.total == r.e_tn + r.e_ta + r.e_d
    assert r.e_d == sum(r.breakdown.values())


def test_baseline_mode():
    r = baseline_report(500, 10_000, PROF)
    assert (r.p, r.q, r.e_d) == (1, 1, 0)
    assert r.e_ta == 68


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.fractions(0, 1), st.fractions(0, 1))
def test_transmission_scaling(n_nat, n_adv, p, q):
    e_tn, e_ta = transmission_energy(n_nat, n_adv, p, q, PROF)
    e_tn2, _ = transmission_energy(2 * n_nat, n_adv, p, q, PROF)
    assert e_tn2 == 2 * e_tn
    assert e_tn == p * n_nat * Fraction("6.8") / 1000


def test_full_depth_matches_closed_form():
    d = init_detector(preset("D1"))
    counts = layer_counts(d)
    total = sum(counts, AccessCounts())
    closed = (184 * total.r_dram + 10 * total.r_cache + Fraction("1.7") * total.r_spad
              + Fraction("0.92") * total.n_mac + Fraction("0.27") * total.n_acc) * PJ
    assert detection_energy([_out("natural", counts)], PROF, 16) == closed
    assert counts_energy_pj(total, PROF, 16) * PJ == closed


def test_monotone_in_exit_layer_and_bits():
    counts = layer_counts(init_detector(preset("D1")))
    by_exit = [detection_energy([_out("natural", counts[:k])], PROF, 16) for k in (1, 2, 3)]
    assert by_exit[0] < by_exit[1] < by_exit[2]
    by_bits = [detection_energy([_out("natural", counts)], PROF, b) for b in (4, 6, 8, 12, 16)]
    assert by_bits == sorted(by_bits)


def test_weight_dram_flags():
    counts = layer_counts(init_detector(preset("D1")))
    outs = [_out("natural", counts)]
    outs[0].layer_weight_words = [216, 1152, 4608]
    base = detection_energy(outs, PROF, 16)
    once = detection_energy(outs, default_profile(include_weight_dram=True), 16, weight_words=5976)
    assert once - base == 184 * 5976 * PJ
    per_sample = detection_breakdown(outs, default_profile(amortize_weights=False), 16)
    assert per_sample["weight_dram"] == 184 * 5976 * PJ


def test_counts_non_negative():
    with pytest.raises(ValueError):
        AccessCounts(-1, 0, 0, 0, 0)
