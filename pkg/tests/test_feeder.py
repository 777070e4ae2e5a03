import csv
import itertools
import random
import shutil
from dataclasses import replace

import numpy as np
import pytest

from feederkit.errors import FeederFormatError, TopologyError
from feederkit.feeder import (
    FEET_PER_MILE,
    LineSegment,
    SpotLoad,
    SwitchLink,
    branch_impedance,
    default_dataset_path,
    merge_switches,
    model_to_dict,
    parse_feeder,
    validate_topology,
    write_feeder,
)

# reference rows of the standard dataset, checked cell for cell
LINE_ROWS = """149,1,400,1
1,2,175,10
1,3,250,11
3,4,200,11
3,5,325,11
5,6,250,11
1,7,300,1
7,8,200,1
8,9,225,9
14,10,250,9
14,11,250,9
8,12,225,10
8,13,300,1
9,14,425,9
34,15,100,11
15,16,375,11
15,17,350,11
13,18,825,2
18,19,250,9
19,20,325,9
18,21,300,2"""

LOAD_ROWS = """1,1,0,40,20,0,0,0,0
2,1,0,0,0,20,10,0,0
4,1,0,0,0,0,0,40,20
5,1,1,0,0,0,0,20,10
6,1,2,0,0,0,0,40,20
7,1,0,20,10,0,0,0,0
9,1,0,40,20,0,0,0,0
10,1,1,20,10,0,0,0,0
11,1,2,40,20,0,0,0,0
12,1,0,0,0,20,10,0,0
16,1,0,0,0,0,0,40,20
17,1,0,0,0,0,0,20,10
19,1,0,40,20,0,0,0,0
20,1,1,40,20,0,0,0,0
22,1,2,0,0,40,20,0,0
24,1,0,0,0,0,0,40,20
28,1,1,40,20,0,0,0,0
29,1,2,40,20,0,0,0,0
30,1,0,0,0,0,0,40,20
31,1,0,0,0,0,0,20,10"""

CONFIG_ROWS = """1,1,0.4576,0.1560,0.1535,0.4666,0.1580,0.4615,1.0780,0.5017,0.3849,1.0482,0.4236,1.0651,5.6765,-1.8319,-0.6982,5.9809,-1.1645,5.3971
2,1,0.4666,0.1580,0.1560,0.4615,0.1535,0.4576,1.0482,0.4236,0.5017,1.0651,0.3849,1.0780,5.9809,-1.1645,-1.8319,5.3971,-0.6982,5.6765
3,1,0.4615,0.1535,0.1580,0.4576,0.1560,0.4666,1.0651,0.3849,0.4236,1.0780,0.5017,1.0482,5.3971,-0.6982,-1.1645,5.6765,-1.8319,5.9809
4,1,0.4615,0.1580,0.1535,0.4666,0.1560,0.4576,1.0651,0.4236,0.3849,1.0482,0.5017,1.0780,5.3971,-1.1645,-0.6982,5.9809,-1.8319,5.6765
5,1,0.4666,0.1560,0.1580,0.4576,0.1535,0.4615,1.0482,0.5017,0.4236,1.0780,0.3849,1.0651,5.9809,-1.8319,-1.1645,5.6765,-0.6982,5.3971
6,1,0.4576,0.1535,0.1560,0.4615,0.1580,0.4666,1.0780,0.3849,0.5017,1.0651,0.4236,1.0482,5.6765,-0.6982,-1.8319,5.3971,-1.1645,5.9809
7,1,0.4576,0.0000,0.1535,0.0000,0.0000,0.4615,1.0780,0.0000,0.3849,0.0000,0.0000,1.0651,5.1154,0.0000,-1.0549,0.0000,0.0000,5.1704
8,1,0.4576,0.1535,0.0000,0.4615,0.0000,0.0000,1.0780,0.3849,0.0000,1.0651,0.0000,0.0000,5.1154,-1.0549,0.0000,5.1704,0.0000,0.0000
9,1,1.3292,0.0000,0.0000,0.0000,0.0000,0.0000,1.3475,0.0000,0.0000,0.0000,0.0000,0.0000,4.5193,0.0000,0.0000,0.0000,0.0000,0.0000
10,1,0.0000,0.0000,0.0000,1.3292,0.0000,0.0000,0.0000,0.0000,0.0000,1.3475,0.0000,0.0000,0.0000,0.0000,0.0000,4.5193,0.0000,0.0000
11,1,0.0000,0.0000,0.0000,0.0000,0.0000,1.3292,0.0000,0.0000,0.0000,0.0000,0.0000,1.3475,0.0000,0.0000,0.0000,0.0000,0.0000,4.5193
12,1,1.5209,0.5198,0.4924,1.5329,0.5198,1.5209,0.7521,0.2775,0.2157,0.7162,0.2775,0.7521,67.2242,0.0000,0.0000,67.2242,0.0000,67.2242
13,0,0.1000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000"""

COORD_ROWS = """1,99.0114,323.3191
2,93.1995,283.8511
3,99.0114,382.8936
4,99.0114,401.5106
5,125.7460,382.8936
6,156.5490,384.3830
7,123.4213,318.1064
8,155.3866,312.8936
9,145.5064,274.9149
10,110.0540,271.9362
11,63.5589,254.0638
12,140.2757,337.4681
13,187.3520,306.9362
14,101.3361,248.8511
15,206.5312,368.7447
16,218.7361,397.0426
17,233.8470,359.8085
18,148.9936,184.0638
19,111.2163,193.0000"""

SWITCH_ROWS = """18,135,1
150,149,1
13,152,1
60,160,1
97,197,1"""


def _rows(name):
    with open(default_dataset_path() / name, newline="") as fh:
        return [r for r in csv.reader(fh)][1:]


@pytest.mark.parametrize(
    "fname, reference",
    [
        ("lines.csv", LINE_ROWS),
        ("loads.csv", LOAD_ROWS),
        ("configs.csv", CONFIG_ROWS),
        ("coords.csv", COORD_ROWS),
        ("switches.csv", SWITCH_ROWS),
    ],
)
def test_reference_rows_match_dataset(fname, reference):
    expected = [line.split(",") for line in reference.splitlines()]
    rows = _rows(fname)
    # loads are keyed by bus: the excerpt skips unloaded buses
    if fname == "loads.csv":
        by_bus = {r[0]: r for r in rows}
        assert [by_bus[e[0]] for e in expected] == expected
    else:
        assert rows[: len(expected)] == expected


def test_general_data(raw_feeder):
    g = raw_feeder.general
    assert g.slack_bus == 149
    assert g.v_nom_kv == 4.16
    assert g.slack_mag_pu == (1.01, 1.01, 1.01)
    assert g.slack_ang_deg == (0.0, -120.0, 120.0)


def test_first_line_row(raw_feeder):
    s = raw_feeder.segments[0]
    assert (s.from_bus, s.to_bus, s.length_ft, s.config_id) == (149, 1, 400, 1)


def test_current_load_on_phase_c(raw_feeder):
    ld = raw_feeder.loads_by_bus()[5][0]
    assert ld.zip_kind == "I" and ld.wye
    assert ld.p_kw == (0, 0, 20) and ld.q_kvar == (0, 0, 10)
    assert ld.phases_used == {2}


def test_dataset_size(raw_feeder, feeder):
    assert len(raw_feeder.segments) == 119
    assert len(feeder.buses) == 120
    assert len(feeder.segments) == len(feeder.buses) - 1


def test_round_trip_is_bit_exact(tmp_path, raw_feeder):
    write_feeder(raw_feeder, tmp_path)
    src = default_dataset_path()
    for name in ("lines.csv", "configs.csv", "loads.csv", "switches.csv", "coords.csv", "general.csv"):
        assert _rows_of(tmp_path / name) == _rows_of(src / name), name
    again = parse_feeder(tmp_path)
    assert model_to_dict(again) == model_to_dict(raw_feeder)


def _rows_of(path):
    with open(path, newline="", encoding="utf-8-sig") as fh:
        return [r for r in csv.reader(fh) if any(c.strip() for c in r)]


def test_round_trip_of_edited_model(tmp_path, raw_feeder):
    edited = replace(raw_feeder, segments=raw_feeder.segments[:-1] + (LineSegment(61, 610, 12.5, 13),))
    write_feeder(edited, tmp_path)
    assert parse_feeder(tmp_path).segments[-1].length_ft == 12.5


# -- parse errors


@pytest.fixture
def dataset_copy(tmp_path):
    dst = tmp_path / "data"
    shutil.copytree(default_dataset_path(), dst)
    return dst


def _edit(path, fn):
    lines = path.read_text().splitlines()
    path.write_text("\n".join(fn(lines)) + "\n")


def test_missing_file(dataset_copy):
    (dataset_copy / "loads.csv").unlink()
    with pytest.raises(FeederFormatError) as exc:
        parse_feeder(dataset_copy)
    assert exc.value.kind == "missing-file"


def test_coords_optional(dataset_copy):
    (dataset_copy / "coords.csv").unlink()
    assert parse_feeder(dataset_copy).coords is None


def test_bad_header(dataset_copy):
    _edit(dataset_copy / "lines.csv", lambda ls: ["Node A,Node B,Length,Config."] + ls[1:])
    with pytest.raises(FeederFormatError) as exc:
        parse_feeder(dataset_copy)
    assert exc.value.kind == "bad-header"


def test_unparseable_cell_names_row_and_column(dataset_copy):
    _edit(dataset_copy / "lines.csv", lambda ls: ls[:3] + ["1,3,abc,11"] + ls[4:])
    with pytest.raises(FeederFormatError) as exc:
        parse_feeder(dataset_copy)
    assert exc.value.kind == "unparseable-cell"
    assert "row 4" in str(exc.value) and "Length (ft.)" in str(exc.value)


def test_dangling_config(dataset_copy):
    _edit(dataset_copy / "lines.csv", lambda ls: ls + ["1,999,100,42"])
    with pytest.raises(FeederFormatError) as exc:
        parse_feeder(dataset_copy)
    assert exc.value.kind == "dangling-config-reference"


def test_duplicate_segment(dataset_copy):
    _edit(dataset_copy / "lines.csv", lambda ls: ls + ["2,1,50,10"])
    with pytest.raises(FeederFormatError) as exc:
        parse_feeder(dataset_copy)
    assert exc.value.kind == "duplicate-segment"


def test_crlf_and_bom_accepted(dataset_copy):
    p = dataset_copy / "lines.csv"
    p.write_bytes(b"\xef\xbb\xbf" + p.read_bytes().replace(b"\n", b"\r\n"))
    assert len(parse_feeder(dataset_copy).segments) == 119


def test_invalid_general_values(dataset_copy):
    _edit(dataset_copy / "general.csv", lambda ls: [l.replace("Ang_slack_ph_B,-120", "Ang_slack_ph_B,-100") for l in ls])
    with pytest.raises(FeederFormatError):
        parse_feeder(dataset_copy)


# -- impedances


def test_config1_400ft(raw_feeder):
    z, b = branch_impedance(raw_feeder.segments[0], raw_feeder.configs[1])
    assert z[0, 0] == pytest.approx(0.4576 * 400 / 5280 + 1j * 1.0780 * 400 / 5280, rel=1e-12)
    assert abs(z[0, 0] - (0.034667 + 0.081667j)) < 1e-6


def test_per_mile_identity(raw_feeder):
    for cfg in raw_feeder.configs.values():
        if not cfg.is_line:
            continue
        z, b = branch_impedance(LineSegment(1, 2, FEET_PER_MILE, cfg.config_id), cfg)
        assert np.array_equal(z, cfg.r_ohm_per_mile + 1j * cfg.x_ohm_per_mile)
        assert np.array_equal(b, cfg.b_usiemens_per_mile)


def test_single_phase_config_zero_rows(raw_feeder):
    z, b = branch_impedance(LineSegment(1, 3, 250, 11), raw_feeder.configs[11])
    assert np.all(z[:2, :] == 0) and np.all(z[:, :2] == 0)
    assert np.all(b[:2, :] == 0) and np.all(b[:, :2] == 0)
    assert raw_feeder.configs[11].phasing == (2,)


def test_transformer_config_rejected(raw_feeder):
    with pytest.raises(FeederFormatError) as exc:
        branch_impedance(LineSegment(61, 610, 1, 13), raw_feeder.configs[13])
    assert exc.value.kind == "transformer-config-passed"


def test_series_additivity(raw_feeder):
    rng = random.Random(7)
    for cfg in raw_feeder.configs.values():
        if not cfg.is_line:
            continue
        for _ in range(20):
            l1, l2 = rng.uniform(1, 3000), rng.uniform(1, 3000)
            z1, b1 = branch_impedance(LineSegment(1, 2, l1, cfg.config_id), cfg)
            z2, b2 = branch_impedance(LineSegment(1, 2, l2, cfg.config_id), cfg)
            z12, b12 = branch_impedance(LineSegment(1, 2, l1 + l2, cfg.config_id), cfg)
            scale = np.maximum(np.abs(z12), 1e-300)
            assert np.all(np.abs(z1 + z2 - z12) <= 1e-12 * scale)
            assert np.all(np.abs(b1 + b2 - b12) <= 1e-12 * np.maximum(np.abs(b12), 1e-300))


def test_configs_symmetric_and_phasing_consistent(raw_feeder):
    for cfg in raw_feeder.configs.values():
        for m in (cfg.r_ohm_per_mile, cfg.x_ohm_per_mile, cfg.b_usiemens_per_mile):
            assert np.array_equal(m, m.T)
            absent = [i for i in range(3) if i not in cfg.phasing]
            assert np.all(m[absent, :] == 0) and np.all(m[:, absent] == 0)


# -- switches and topology


def test_merge_aliases(feeder):
    assert feeder.resolve(150) == 149
    assert feeder.resolve(135) == 18
    assert dict(feeder.aliases) == {135: 18, 150: 149, 152: 13, 160: 60, 197: 97}


def test_merge_order_independent(raw_feeder):
    reference = model_to_dict(merge_switches(raw_feeder))
    for perm in itertools.islice(itertools.permutations(raw_feeder.switches), 0, 120, 7):
        flipped = tuple(SwitchLink(s.bus_b, s.bus_a, s.closed) for s in perm)
        for sw in (perm, flipped):
            assert model_to_dict(merge_switches(replace(raw_feeder, switches=sw))) == reference


def test_no_closed_switches_unchanged(raw_feeder):
    open_only = replace(raw_feeder, switches=tuple(replace(s, closed=False) for s in raw_feeder.switches))
    assert merge_switches(open_only) is open_only


def test_self_loop_switch_rejected(raw_feeder):
    extra = raw_feeder.switches + (SwitchLink(135, 18, True),)
    with pytest.raises(TopologyError) as exc:
        merge_switches(replace(raw_feeder, switches=extra))
    assert exc.value.kind == "merge-creates-cycle"


def test_switch_closing_a_loop_reports_it(raw_feeder):
    extra = raw_feeder.switches + (SwitchLink(1, 7, True),)
    with pytest.raises(TopologyError) as exc:
        merge_switches(replace(raw_feeder, switches=extra))
    assert exc.value.kind == "merge-creates-cycle"


def test_dataset_validates_clean(raw_feeder):
    assert validate_topology(raw_feeder) == []


def test_segment_to_undefined_bus_is_a_connectivity_finding(raw_feeder):
    broken = replace(raw_feeder, segments=raw_feeder.segments + (LineSegment(900, 901, 100, 1),))
    findings = validate_topology(broken)
    assert [f.kind for f in findings] == ["connectivity"]


def test_phase_c_load_behind_phase_a_line(raw_feeder):
    # bus 11 hangs off 14 through config 9 (phase A only)
    load = SpotLoad(11, True, "PQ", (0, 0, 10), (0, 0, 5))
    findings = validate_topology(replace(raw_feeder, loads=raw_feeder.loads + (load,)))
    assert [f.kind for f in findings] == ["phase-consistency"]


def test_cycle_is_a_radiality_finding(raw_feeder):
    looped = replace(raw_feeder, segments=raw_feeder.segments + (LineSegment(2, 4, 100, 1),))
    assert [f.kind for f in validate_topology(looped)] == ["radiality"]
