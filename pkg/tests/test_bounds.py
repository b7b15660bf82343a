import math

import pytest

from unlearn_bench import bounds
from unlearn_bench.accountant import BoundInputs


def test_epsilon_table():
    rows = bounds.tabulate_epsilon_star(BoundInputs(0.4, 0.2, 0.01, 1.0, 2.0, 0.0), [0, 4, 1e6])
    assert rows[0] == (0.0, pytest.approx(1.75 * 0.4 + 1.5 * 0.2 + 0.01))
    assert rows[1][1] == pytest.approx(0.377879, abs=1e-6)
    assert rows[2][1] == pytest.approx(0.01, abs=1e-15)
    assert [r[1] for r in rows] == sorted((r[1] for r in rows), reverse=True)


def test_steps_table_flags():
    rows = bounds.tabulate_min_steps([0.05, 0.5], 2.0, 1.0, 1.0, 1.0, 0.1, [0.0, 3.0])
    flags = [(r.delta, r.privacy_loss, r.flag) for r in rows]
    assert flags[:2] == [(0.05, 0.0, "infeasible"), (0.05, 3.0, "infeasible")]
    assert all(math.isnan(r.k) for r in rows[:2])
    ok = rows[3]
    assert ok.flag == "ok" and ok.k == pytest.approx(2 * math.log(4 / 0.4))
    low = rows[2]  # numerator 1 < 0.4 is false, ln(1/0.4) > 0
    assert low.flag == "ok" and low.k == pytest.approx(2 * math.log(1 / 0.4))
    tiny = bounds.tabulate_min_steps([0.5], 1.0, 0.0, 0.0, 0.0, 0.1, [1.0])[0]
    assert tiny.flag == "degenerate" and tiny.k == 0.0 and tiny.raw_k == -math.inf


def test_cli_epsilon(capsys):
    code = bounds.main(["epsilon", "--alpha", "2", "--C", "1", "--eps-prime-4a", "0.4", "--eps4am1", "0.2",
                        "--eps2am1", "0.01", "--k", "4"])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "k,eps_star" and abs(float(lines[1].split(",")[1]) - 0.377879) < 1e-6


def test_cli_steps_and_errors(tmp_path, capsys):
    out = tmp_path / "s.csv"
    code = bounds.main(["steps", "--alpha", "2", "--A", "2", "--B", "1", "--Cc", "1", "--eps4am1", "1",
                        "--eps2am1", "0.1", "--delta", "0.5", "--P", "3", "--out", str(out)])
    assert code == 0 and out.read_text().splitlines()[1].endswith(",ok")
    assert bounds.main(["epsilon", "--alpha", "1", "--C", "1", "--eps-prime-4a", "0", "--eps4am1", "0",
                        "--eps2am1", "0", "--k", "1"]) == 1
    with pytest.raises(SystemExit):
        bounds.main(["epsilon", "--alpha", "2", "--C", "1", "--eps-prime-4a", "0", "--eps4am1", "0",
                     "--eps2am1", "0", "--k", "x"])
