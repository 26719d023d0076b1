import numpy as np
import pytest

from aeodelab.config import KINDS, example_configs, load_config
from aeodelab.experiments import (
    format_summary,
    max_rel_gap,
    plateau_window,
    run_experiment,
    write_artifacts,
)
from aeodelab.spectra import write_dataset


def _small(kind):
    cfg = load_config(example_configs()[kind])
    d, t = cfg.data, cfg.train
    if kind != "longtime_reduced":
        d.dim = 100
    t.s_max = 3.0
    t.log_factor = 2.0
    if t.n_eval:
        t.n_eval = 500
    cfg.ode.s_max = 3.0
    cfg.ode.init_dim = 100
    cfg.reduced.s_max = 1e3
    cfg.pca.steps = 2000
    cfg.pca.seeds = 2
    return cfg


@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_runs_small(kind, tmp_path):
    cfg = _small(kind)
    res = run_experiment(cfg, threads=2)
    assert len(res.trace) >= 2
    assert res.summary["kind"] == kind
    assert any(k.startswith("pass_") for k in res.summary)
    out = write_artifacts(res, tmp_path)
    assert (out / "run.csv").read_text().startswith(f"# schema=1 kind={kind} seed=0\n")
    assert (out / "summary.txt").read_text() == format_summary(res.summary)
    assert (out / "plot.svg").exists()
    # threads do not change results
    again = run_experiment(_small(kind), threads=1)
    assert again.trace.to_csv() == res.trace.to_csv()


def test_ode_vs_sim_columns():
    res = run_experiment(_small("ode_vs_sim"))
    assert res.trace.columns == ["s", "pmse_sim", "pmse_sim_stderr", "pmse_ode", "rel_gap"]
    first = res.trace.rows[0]
    assert first["pmse_sim"] == pytest.approx(first["pmse_ode"], rel=1e-10)


def test_dataset_input(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((400, 30)) * np.linspace(3, 0.5, 30)
    path = tmp_path / "x.csv"
    write_dataset(path, X)
    cfg = _small("tied_vs_untied")
    cfg.data.dataset = str(path)
    cfg.network.K = 2
    cfg.network.std = 0.3
    cfg.train.s_max = 50.0
    res = run_experiment(cfg)
    assert res.trace.rows[-1]["pmse_untied"] < res.trace.rows[0]["pmse_untied"]
    cfg = _small("gaussian_equivalence")
    cfg.data.dataset = str(path)
    cfg.network.K = 2
    res = run_experiment(cfg)
    assert res.summary["inputs"] == "dataset"


def test_plateau_window():
    s = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 8.0, 16.0])
    p = np.array([5.0, 2.0, 1.01, 0.99, 1.0, 0.5, 0.5])
    assert plateau_window(s, p, 1.0) == (2.0, 4.0)
    assert plateau_window(s, p, 1.0, min_span=3.0) is None
    assert plateau_window(s, p, 0.5) == (8.0, 16.0)
    assert plateau_window(s, p, 7.0) is None


def test_max_rel_gap():
    s = np.array([0.5, 1.0, 2.0])
    assert max_rel_gap(s, [2.0, 1.1, 1.0], [1.0, 1.0, 1.0], s_min=1.0) == pytest.approx(0.1)
    assert np.isnan(max_rel_gap(s, s, s, s_min=5.0))


@pytest.mark.slow
def test_finite_size_gap_shrinks_with_dimension():
    gaps = []
    for D in (250, 2000):
        cfg = load_config(example_configs()["ode_vs_sim"])
        cfg.data.dim = D
        cfg.train.s_max = 60.0
        res = run_experiment(cfg)
        gaps.append(res.summary["max_rel_gap"])
    assert gaps[1] < gaps[0]
