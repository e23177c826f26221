import csv
import json

import numpy as np
import pytest

from hyperlora import bench, nn, pde, train


@pytest.fixture(scope="module")
def tiny():
    base = nn.mlp_init(nn.MlpConfig(2, 3, (8, 8), "tanh", 0))
    cfg = bench.BenchConfig("kovasznay", adapt_epochs=4, hyper_epochs=4, point_fraction=0.01,
                            seeds=(0, 1), ranks=(1, 2, 4), split_sizes=(3, 2, 2), val_every=2)
    return base, cfg, bench.make_split("kovasznay", cfg.split_sizes, 0)


def zero_net(out=3):
    cfg = nn.MlpConfig(2, out)
    return nn.Mlp(cfg, nn.mlp_init(cfg).params.with_values(np.zeros(21187)))


# --------------------------------------------------------------------------
# metrics and exports

def test_mse_of_oracle_is_zero():
    s = pde.Kovasznay(40.0)
    assert bench.mse_vs_reference(train.AnalyticOracle(s), s) == 0.0


def test_zero_network_mse_matches_independent_accumulation():
    s = pde.Kovasznay(40.0)
    g = np.linspace(0, 1, 101)
    acc = 0.0
    for x in g:
        u, v, p = pde.analytic_kovasznay(np.full_like(g, x), g, 40.0)
        acc += float(np.sum(u * u) + np.sum(v * v) + np.sum(p * p))
    assert bench.mse_vs_reference(zero_net(), s) == pytest.approx(acc / (101 * 101 * 3), rel=1e-12)


def test_mse_permutation_invariant():
    s = pde.Kovasznay(40.0)
    net = nn.mlp_init(nn.MlpConfig(2, 3, (8,)))
    grid = s.eval_grid()
    perm = np.random.default_rng(0).permutation(len(grid))
    assert bench.mse_vs_reference(net, s, grid[perm]) == pytest.approx(bench.mse_vs_reference(net, s, grid),
                                                                       rel=1e-12)


def test_eval_grid_sizes():
    assert len(pde.Kovasznay(40.0).eval_grid()) == 101 * 101
    assert len(pde.Burgers2D(1e-3).eval_grid()) == 101 * 101
    assert len(pde.Burgers1D(pde.sample_grf_u0(0)).eval_grid()) == 256 * 100


def test_error_map_csv(tmp_path):
    s = pde.Kovasznay(40.0)
    net = nn.mlp_init(nn.MlpConfig(2, 3, (8,)))
    path = bench.export_error_map(net, s, path=tmp_path / "map.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["x", "y", "component", "predicted", "reference", "abs_error"]
    assert len(rows) == 101 * 101 * 3
    for r in rows[::997]:
        assert float(r["abs_error"]) == abs(float(r["predicted"]) - float(r["reference"]))
    oracle = bench.export_error_map(train.AnalyticOracle(s), s, path=tmp_path / "oracle.csv")
    with open(oracle) as fh:
        assert max(float(r["abs_error"]) for r in csv.DictReader(fh)) <= 1e-12


def test_error_map_io_failure_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError) as info:
        bench.export_error_map(zero_net(), pde.Kovasznay(40.0), path=blocker / "sub" / "map.csv")
    assert "map.csv" in str(info.value)


# --------------------------------------------------------------------------
# task splits

def test_split_sizes_and_disjointness():
    assert bench.default_split_sizes("burgers1d") == (100, 20, 20)
    assert bench.default_split_sizes("kovasznay") == (20, 20, 20)
    split = bench.make_split("kovasznay")
    h = split.hashes()
    assert [len(h[k]) for k in ("train", "valid", "test")] == [20, 20, 20]
    assert not (set(h["train"]) & set(h["test"]))
    overlap = bench.TaskSplit(split.train, split.valid, split.train[:1])
    with pytest.raises(ValueError):
        overlap.check_disjoint()


def test_split_reproducible():
    a, b = bench.make_split("burgers2d", (5, 2, 2), 3), bench.make_split("burgers2d", (5, 2, 2), 3)
    assert a.hashes() == b.hashes()


# --------------------------------------------------------------------------
# sweeps

def test_rank_sweep_schema_and_aggregates(tiny, tmp_path):
    base, cfg, split = tiny
    recs = bench.run_rank_sweep(cfg, base, split, seeds=[0])
    agg = [r for r in recs if r.row == "aggregate"]
    assert len({(r.method, r.rank) for r in agg}) == len(cfg.ranks) + 2
    lora = sorted((int(r.rank), r.n_params_trained) for r in agg if r.method == "lora_pinn")
    counts = [n for _, n in lora]
    assert counts == sorted(counts) and len(set(counts)) == len(counts)
    for a in agg:
        rows = [r for r in recs if r.row == "task" and (r.method, r.rank, r.seed) == (a.method, a.rank, a.seed)]
        assert len(rows) == len(split.test)
        assert a.test_mse == float(np.mean([r.test_mse for r in rows]))
    test_hashes = set(split.hashes()["test"])
    assert {r.task for r in recs if r.row == "task"} <= test_hashes
    assert all(r.test_hash == split.list_hash("test") for r in recs)
    back = bench.read_records(bench.write_records(tmp_path / "r.csv", recs))
    assert [r.test_mse for r in back] == [r.test_mse for r in recs]


def test_rank_sweep_record_reproducible(tiny):
    base, cfg, split = tiny
    a = bench.run_rank_sweep(cfg, base, split, ranks=[2], seeds=[1], baselines=False)
    b = bench.run_rank_sweep(cfg, base, split, ranks=[2], seeds=[1], baselines=False)
    assert [r.test_mse for r in a] == [r.test_mse for r in b]


def test_hyper_matrix_rows(tiny):
    base, cfg, split = tiny
    recs = bench.run_hyper_matrix(cfg, base, split, ranks=[2, None], seeds=[0])
    assert {(r.method, r.rank) for r in recs} == {(f"hyper_{g}", k) for g in train.REGIMES for k in ("2", "full")}
    assert all(np.isfinite(r.test_mse) and r.inference_time > 0 for r in recs)


def test_measure_inference_reports_dispersion(tiny):
    base, cfg, split = tiny
    h = train.train_hyper("b4", split.train, [], base, 2, train.Schedule(2, patience=None), 0,
                          cfg.budget(split.train[0]), hidden=(8,)).extra["hypernetwork"]
    out = bench.measure_inference(cfg, base, split.test[0], h, rank=2, reps=5)
    assert [r["method"] for r in out] == ["pinn", "lora_pinn", "hyper_b4"]
    for r in out:
        assert r["reps"] == 5 and r["median_s"] > 0 and r["mad_s"] >= 0


def test_manifest_has_code_hash(tmp_path):
    p = bench.write_manifest(tmp_path / "m.json", {"a": 1}, {"seed": 2})
    doc = json.loads(p.read_text())
    assert doc["config"] == {"a": 1} and doc["seed"] == 2
    assert len(doc["code_hash"]) == 40 and doc["code_hash"] == bench.code_hash()
