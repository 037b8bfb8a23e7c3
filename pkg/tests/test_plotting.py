import pytest

from dept import plotting
from dept.errors import InvalidInputError


def _write(path, text):
    path.write_text(text)
    return path


def test_histogram_to_png(tmp_path):
    src = _write(tmp_path / "h.csv", "bin_lo,bin_hi,count\n0.0,1.0,3\n1.0,2.0,5\n2.0,inf,1\n")
    assert plotting.plot_csv(src, tmp_path / "h.png") == "hist"
    assert (tmp_path / "h.png").read_bytes()[:4] == b"\x89PNG"


def test_scatter_to_png(tmp_path):
    src = _write(tmp_path / "s.csv", "rank,ci_base,ci_new\n0,2.0,1.0\n1,1.5,1.4\n")
    assert plotting.plot_csv(src, tmp_path / "s.png") == "scatter"


def test_lambda_sweep_covers_unit_interval(tmp_path):
    rows = ["axis,value,method,base_acc,new_acc,harmonic,n_seeds"]
    rows += [f"lambda,{0.1 * i:.1f},dept,90,70,78.75,5" for i in range(11)]
    rows.append("lambda,0.0,itm_only,88,65,74.8,5")
    src = _write(tmp_path / "l.csv", "\n".join(rows) + "\n")
    kind, parsed = plotting.read_table(src)
    values = sorted(r["value"] for r in parsed if r["method"] == "dept")
    assert kind == "sweep" and len(values) == 11 and values[0] == 0.0 and values[-1] == 1.0
    assert plotting.plot_csv(src, tmp_path / "l.png") == "lambda_sweep"


@pytest.mark.parametrize("axis", ["epochs", "shots"])
def test_other_sweeps(tmp_path, axis):
    rows = ["axis,value,method,base_acc,new_acc,harmonic,n_seeds"]
    for m in ("dept", "itm_only"):
        rows += [f"{axis},{v},{m},90,70,78.75,5" for v in (4, 8, 16)]
    src = _write(tmp_path / "x.csv", "\n".join(rows) + "\n")
    assert plotting.plot_csv(src, tmp_path / "x.png") == f"{axis}_sweep"


def test_empty_and_header_only_rejected(tmp_path):
    for text in ("", "rank,ci_base,ci_new\n"):
        src = _write(tmp_path / "e.csv", text)
        with pytest.raises(InvalidInputError):
            plotting.plot_csv(src, tmp_path / "e.png")
    assert not (tmp_path / "e.png").exists()


def test_parse_error_names_row(tmp_path):
    src = _write(tmp_path / "b.csv", "rank,ci_base,ci_new\n0,1,1\n1,1\n")
    with pytest.raises(plotting.CsvParseError) as info:
        plotting.read_table(src)
    assert info.value.row == 3 and "row 3" in str(info.value)
    src = _write(tmp_path / "u.csv", "a,b\n1,2\n")
    with pytest.raises(plotting.CsvParseError):
        plotting.read_table(src)
