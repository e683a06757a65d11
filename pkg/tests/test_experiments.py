from __future__ import annotations

import math

import numpy as np
import pytest

from fedfluence import cli
from fedfluence.config import PRESETS, load_config, parse_config, preset, preset_text
from fedfluence.errors import CapacityError, ConfigError
from fedfluence.experiments import (run_cleansing, run_diagnostics, run_experiment, run_fil_correlation,
                                    run_fip_error, run_valuation, tracked_clients)
from fedfluence.fedavg import select_participants

SMALL = """
[model]
kind = logreg
input_dim = 3
classes = 3

[data]
seed = 1
input_dim = 3
classes = 3
min_size = 6

[federation]
lr = 0.1
num_clients = {K}
clients_per_round = 2
local_iters = 2
rounds = {T}
grad_samples = 4

[experiment]
kind = {kind}
"""


def small(kind="fip-error", K=8, T=6, **experiment):
    cfg = parse_config(SMALL.format(kind="fip-error", K=K, T=T))
    return cfg.override(experiment={"kind": kind, **experiment}).validate()


# -- config ----------------------------------------------------------------

@pytest.mark.parametrize("name", PRESETS)
def test_presets_parse_and_round_trip(name):
    cfg = preset(name)
    again = parse_config(cfg.to_ini(), name)
    assert again.to_dict() == cfg.to_dict() and again.digest() == cfg.digest()


def test_preset_constants():
    convex, nonconvex, blowup = (preset(n) for n in PRESETS)
    f = convex.federation
    assert (convex.model.kind, f.num_clients, f.clients_per_round, f.local_iters, f.rounds, f.grad_samples) == \
        ("logreg", 20, 5, 5, 100, 20)
    f = nonconvex.federation
    assert (nonconvex.model.hidden, f.num_clients, f.clients_per_round, f.local_iters, f.rounds, f.grad_samples) == \
        ((32,), 20, 5, 2, 150, 20)
    assert blowup.federation.lr == pytest.approx(10 * nonconvex.federation.lr)
    assert blowup.federation.overflow_guard > nonconvex.federation.overflow_guard


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(SMALL.format(kind="fip-error", K=8, T=6) + "colour = blue\n")
    with pytest.raises(ConfigError, match="unknown config sections"):
        parse_config(SMALL.format(kind="fip-error", K=8, T=6) + "[extras]\na = 1\n")


def test_bad_values_are_config_errors():
    text = SMALL.format(kind="fip-error", K=8, T=6)
    for old, new in (("lr = 0.1", "lr = 0"), ("lr = 0.1", "lr = fast"), ("kind = fip-error", "kind = magic")):
        with pytest.raises(ConfigError):
            parse_config(text.replace(old, new))


def test_experiment_invariants():
    base = small()
    bad = [
        dict(kind="cleansing", intervention_round=6),
        dict(kind="cleansing", intervention_round=3, removal_fraction=1.0),
        dict(kind="cleansing", intervention_round=3, removal_fraction=0.99),
        dict(eval_rounds=(0,)),
        dict(eval_rounds=(7,)),
        dict(estimators=("basic/newton",)),
    ]
    for changes in bad:
        with pytest.raises(ConfigError):
            base.override(experiment=changes).validate()


def test_digest_ignores_output_path():
    cfg = small()
    assert cfg.digest() == cfg.override(experiment={"output": "x.csv"}).digest()
    assert cfg.digest() != cfg.override(federation={"lr": 0.2}).digest()


def test_load_config_by_preset_name_and_missing(tmp_path):
    assert load_config("convex-small").digest() == preset("convex-small").digest()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


# -- fip-error -------------------------------------------------------------

def test_fip_error_zero_for_never_selected_clients():
    cfg = small(K=30, T=4, estimators=("basic/fisher", "lwet/fisher"))
    table = run_fip_error(cfg)
    seen = {k for t in range(1, 5) for k in select_participants(cfg.federation, t)}
    never = [c for c in range(30) if c not in seen]
    assert never
    for t, c, m, v in table.rows:
        if c in never and (m.startswith("delta[") or m.startswith("eps_norm[") or m == "fip_norm"):
            assert v == 0.0


def test_fip_error_exact_basic_is_finite():
    cfg = small(K=6, T=8, estimators=("basic/exact",))
    table = run_fip_error(cfg)
    deltas = [v for _, _, m, v in table.rows if m == "delta[basic/exact]"]
    assert deltas and all(math.isfinite(v) for v in deltas)


def test_fip_error_exact_beyond_cap_is_capacity_error():
    text = SMALL.format(kind="fip-error", K=4, T=1).replace("input_dim = 3", "input_dim = 1700")
    cfg = parse_config(text).override(experiment={"estimators": ("basic/exact",)})
    with pytest.raises(CapacityError):
        run_fip_error(cfg)


def test_blowup_demo_basic_error_exceeds_lwet():
    cfg = preset("blowup-demo").override(experiment={"estimators": ("basic/fisher", "lwet/fisher")})
    table = run_fip_error(cfg)
    basic = {}
    lwet = {}
    for t, c, m, v in table.rows:
        if m == "delta[basic/fisher]":
            basic[(t, c)] = v
        elif m == "delta[lwet/fisher]":
            lwet[(t, c)] = v
    T = cfg.federation.rounds
    assert max(v for (t, _), v in basic.items() if t < T) > 1e3
    first = min(t for t, _, m, _ in table.rows if m == "truncation_layer[lwet/fisher]")
    for t in range(first, T + 1):
        assert np.mean([lwet[k] for k in lwet if k[0] == t]) <= np.mean([basic[k] for k in basic if k[0] == t])


# -- fil-correlation -------------------------------------------------------

def test_self_test_correlation_is_one():
    cfg = small("fil-correlation", K=8, T=6, self_test=True)
    table = run_fil_correlation(cfg)
    for t, r in table.values("pearson").items():
        assert abs(r - 1.0) <= 1e-12
    assert table.values("fil_est") == table.values("fil_exact")


def test_zero_variance_round_is_reported_not_fatal():
    base = small("fil-correlation", K=30, T=1, oracle_cap=2)
    picked = set(select_participants(base.federation, 1))
    data = base.build_data()
    for seed in range(200):
        cfg = base.override(experiment={"experiment_seed": seed})
        if not picked & set(tracked_clients(cfg, data)):
            break
    table = run_fil_correlation(cfg, data=data)
    assert math.isnan(table.get("pearson", 1))
    assert any("round 1" in n for n in table.notes)
    assert "# round 1" in table.to_csv()


# -- cleansing / valuation -------------------------------------------------

def test_removing_zero_clients_equals_baseline():
    cfg = small("cleansing", K=8, T=6, intervention_round=3, removal_fraction=0.05)
    table = run_cleansing(cfg)
    for s in ("lowest", "highest", "random"):
        assert table.get(f"final_loss[{s}]") == table.get("final_loss[none]")
        assert table.get(f"final_accuracy[{s}]") == table.get("final_accuracy[none]")


def test_cleansing_removes_requested_count():
    cfg = small("cleansing", K=10, T=6, intervention_round=3, removal_fraction=0.3)
    table = run_cleansing(cfg)
    lowest = table.values("removed[lowest]")
    highest = {c for _, c, m, _ in table.rows if m == "removed[highest]"}
    low = {c for _, c, m, _ in table.rows if m == "removed[lowest]"}
    assert len(low) == len(highest) == 3 and not low & highest
    assert lowest
    values = {c: v for _, c, m, v in table.rows if m == "value[fil]"}
    assert min(values[c] for c in highest) >= max(values[c] for c in low)


def test_valuation_sweep_trends():
    cfg = preset("convex-small").override(experiment={"kind": "valuation", "strategy": "all"})
    sums = {}
    for seed in range(5):
        table = run_valuation(cfg.override(data={"seed": seed}))
        for _, _, m, v in table.rows:
            sums[m] = sums.get(m, 0.0) + v / 5
    highest = [sums[f"final_loss[highest@{f:g}]"] for f in (0.1, 0.2, 0.3)]
    assert highest[0] <= highest[1] <= highest[2]
    for f in (0.1, 0.2, 0.3):
        assert sums[f"final_loss[lowest@{f:g}]"] <= sums[f"final_loss[highest@{f:g}]"]


def test_random_removal_of_nothing_is_baseline():
    cfg = small("valuation", K=8, T=6, intervention_round=3, fractions=(0.05,), strategy="random")
    table = run_valuation(cfg)
    assert table.get("final_loss[random@0.05]") == table.get("final_loss[none@0]")


# -- diagnostics -----------------------------------------------------------

def test_convex_diagnostics_no_truncation():
    cfg = preset("convex-small").override(experiment={"kind": "diagnostics"})
    table = run_diagnostics(cfg)
    cases = [v for _, _, m, v in table.rows if m.startswith("case[")]
    assert cases and all(v in (1.0, 2.0) for v in cases)
    assert not [m for _, _, m, _ in table.rows if m.startswith("truncation[")]


def test_inflated_step_mlp_truncates():
    cfg = preset("nonconvex-small")
    cfg = cfg.override(federation={"lr": 10 * cfg.federation.lr, "overflow_guard": 1e300},
                       experiment={"kind": "diagnostics", "estimators": ("lwet/fisher",)})
    table = run_diagnostics(cfg)
    truncated = {m for _, _, m, _ in table.rows if m.startswith("truncation[")}
    assert truncated
    for m in truncated:
        layer = m[len("truncation["):-1]
        assert table.get(f"case[{layer}]") == 3.0


def test_zero_step_is_config_error():
    with pytest.raises(ConfigError):
        small("diagnostics").override(federation={"lr": 0.0}).validate()


def test_csv_header_and_repr_values():
    table = run_experiment(small(T=2))
    text = table.to_csv()
    first, header = text.splitlines()[:2]
    assert first.startswith("# fedfluence kind=fip-error config_sha256=")
    assert header == "round,client,metric,value"
    row = text.splitlines()[2].split(",")
    assert float(row[3]) == table.rows[0][3]


# -- command line ----------------------------------------------------------

def write_cfg(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_cli_presets(capsys):
    assert cli.main(["presets"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in PRESETS)
    assert cli.main(["presets", "--show", "blowup-demo"]) == 0
    assert capsys.readouterr().out == preset_text("blowup-demo")


def test_cli_run_writes_csv(tmp_path, capsys):
    path = write_cfg(tmp_path, SMALL.format(kind="fip-error", K=6, T=3))
    out = tmp_path / "res.csv"
    assert cli.main(["run", path, "--out", str(out), "--mode", "basic", "--hessian", "exact"]) == 0
    text = out.read_text()
    assert "delta[basic/exact]" in text and "lwet" not in text


def test_cli_oracle_cap(tmp_path):
    path = write_cfg(tmp_path, SMALL.format(kind="fip-error", K=10, T=2))
    out = tmp_path / "res.csv"
    assert cli.main(["run", path, "--out", str(out), "--oracle-cap", "3"]) == 0
    clients = {line.split(",")[1] for line in out.read_text().splitlines()[2:] if ",fip_norm," in line}
    assert len(clients) == 3


def test_cli_config_errors_exit_2(tmp_path, capsys):
    text = SMALL.format(kind="fip-error", K=6, T=3)
    assert cli.main(["run", write_cfg(tmp_path, text + "bogus = 1\n")]) == 2
    assert cli.main(["run", write_cfg(tmp_path, text.replace("lr = 0.1", "lr = 0"))]) == 2
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_overflow_exit_3(tmp_path):
    text = preset_text("blowup-demo").replace("overflow_guard = 1e300", "overflow_guard = 1e30")
    assert "1e30" in text
    assert cli.main(["run", write_cfg(tmp_path, text), "--mode", "basic", "--out", str(tmp_path / "o.csv")]) == 3


def test_cli_capacity_exit_4(tmp_path):
    text = SMALL.format(kind="fip-error", K=4, T=1).replace("input_dim = 3", "input_dim = 1700")
    assert cli.main(["run", write_cfg(tmp_path, text), "--hessian", "exact", "--out", str(tmp_path / "o.csv")]) == 4


def test_cli_verify_reports_checks(tmp_path, capsys):
    path = write_cfg(tmp_path, SMALL.format(kind="fip-error", K=6, T=3))
    assert cli.main(["verify", path]) == 0
    assert "[PASS] determinism" in capsys.readouterr().out
