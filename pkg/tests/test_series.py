from pathlib import Path

import pytest

from diffusion_workbench.series import (
    AdoptionSeries,
    InputFormatError,
    SeriesError,
    Target,
    ingest_series,
    ingest_series_partial,
    read_targets,
    write_series,
)


def write(tmp_path, text, name="s.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_minimal_file(tmp_path):
    series = ingest_series(write(tmp_path, "country,year,cumulative_mw\nAUS,1992,7.3\nAUS,1993,8.9\n"))
    assert len(series) == 1
    s = series[0]
    assert (s.country, s.base_year, len(s)) == ("AUS", 1992, 2)
    assert list(s.t) == [0.0, 1.0]


def test_rows_grouped_sorted(tmp_path):
    text = "country,year,cumulative_mw\nITA,1993,2\nAUS,1993,5\nITA,1992,1\nAUS,1992,4\n"
    series = ingest_series(write(tmp_path, text))
    assert [s.country for s in series] == ["AUS", "ITA"]
    assert list(series[1].years) == [1992, 1993]


def test_decrease_names_year(tmp_path):
    with pytest.raises(SeriesError, match="1994"):
        ingest_series(write(tmp_path, "country,year,cumulative_mw\nX,1993,5\nX,1994,4\n"))


def test_duplicate_and_gap(tmp_path):
    with pytest.raises(SeriesError, match="duplicate year 1993"):
        ingest_series(write(tmp_path, "country,year,cumulative_mw\nX,1993,5\nX,1993,6\n"))
    with pytest.raises(SeriesError, match="non-consecutive year 1995"):
        ingest_series(write(tmp_path, "country,year,cumulative_mw\nX,1993,5\nX,1995,6\n"))


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("", "empty file"),
        ("country,year,cumulative_mw\n", "no data rows"),
        ("nation,year,mw\nX,1,2\n", "expected header"),
        ("country,year,cumulative_mw\nX,1992,abc\n", ":2: cannot parse cumulative_mw"),
        ("country,year,cumulative_mw\nX,1992,1\nX,1993\n", ":3: expected 3 fields"),
        ("country,year,cumulative_mw\nX,19x2,1\n", ":2: cannot parse year"),
    ],
)
def test_format_errors_carry_line(tmp_path, text, pattern):
    with pytest.raises(InputFormatError, match=pattern):
        ingest_series(write(tmp_path, text))


def test_partial_ingest_isolates_bad_country(tmp_path):
    text = "country,year,cumulative_mw\nA,2000,1\nA,2001,2\nB,2000,3\nB,2001,2\n"
    good, bad = ingest_series_partial(write(tmp_path, text))
    assert [s.country for s in good] == ["A"]
    assert list(bad) == ["B"]


def test_trim_leading_zeros():
    s = AdoptionSeries.from_values("X", 2000, [0, 0, 1, 2, 4])
    tr = s.trimmed()
    assert tr.base_year == 2001
    assert list(tr.t) == [1.0, 2.0, 3.0]
    with pytest.raises(SeriesError):
        AdoptionSeries.from_values("X", 2000, [0, 0]).trimmed()


def test_write_roundtrip(tmp_path):
    s = AdoptionSeries.from_values("X", 2000, [0.1, 0.25, 1 / 3])
    p = tmp_path / "out.csv"
    write_series(p, [s])
    assert ingest_series(p)[0] == s


def test_targets(tmp_path):
    table = read_targets(write(tmp_path, "country,min_target_mw,long_target_mw\nAUS,100,200\nITA,50,\n", "t.csv"))
    assert table["AUS"].for_scenario("long") == 200
    assert table["ITA"].for_scenario("long") is None
    with pytest.raises(SeriesError, match="duplicate"):
        read_targets(write(tmp_path, "country,min_target_mw\nA,1\nA,2\n", "d.csv"))
    with pytest.raises(SeriesError, match="line 2"):
        read_targets(write(tmp_path, "country,min_target_mw,long_target_mw\nA,10,5\n", "e.csv"))
    with pytest.raises(SeriesError):
        Target("A", 0.0)


def test_shipped_templates_parse():
    root = Path(__file__).resolve().parent.parent / "templates"
    targets = read_targets(root / "targets_template.csv")
    assert targets["AAA"].long_target_mw == 12000 and targets["BBB"].long_target_mw is None
    series = ingest_series(root / "series_template.csv")
    assert [s.country for s in series] == sorted(targets)
