"""Experiment kinds: each builds data and networks from a config and returns a trace and summary."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autoencoder import (
    AutoencoderState,
    DatasetSource,
    GaussianSource,
    SpikedSource,
    TrainConfig,
    geometric_steps,
    measure_order_parameters,
    subspace_metrics,
    train,
)
from .config import ExperimentConfig, validate
from .ode import ODEConfig, init_from_finite_D, integrate, pmse_from_order_params
from .online_pca import LearningRate, PcaLearnerState, offline_pca, train_rule
from .reduced import (
    AlignedState,
    fixed_point_alpha_v,
    integrate_reduced,
    pmse_reduced,
    powerlaw_fit,
)
from .spectra import (
    SpectralModel,
    SpikedCovarianceModel,
    empirical_spectrum,
    ingest_dataset,
    pca_reconstruction_error,
    spectral_model_of,
)
from .traces import Trace, svg_plot


@dataclass
class DataBundle:
    source: object
    spectrum: SpectralModel
    moments: object  # exact second moments for order parameters (has cov_apply)
    model: SpikedCovarianceModel | None = None

    @property
    def dim(self) -> int:
        return self.source.dim

    def pca_levels(self, K: int) -> list[float]:
        top = min(K, self.spectrum.num_outliers)
        return [pca_reconstruction_error(self.spectrum, r) for r in range(top + 1)]


@dataclass
class Result:
    trace: Trace
    summary: dict[str, object]
    plot_series: list[str] = field(default_factory=list)
    hlines: list[tuple[str, float]] = field(default_factory=list)
    title: str = ""
    ylabel: str = "pmse"
    logy: bool = True


def seeds_for(seed: int) -> dict[str, int]:
    """Seeds of the spike basis, the initial weights and the training samples."""
    return {"data": seed, "init": seed + 1, "train": seed + 2}


def build_data(cfg: ExperimentConfig, latent_law: str | None = None) -> DataBundle:
    d = cfg.data
    if d.dataset:
        X = ingest_dataset(d.dataset, d.dataset_format or None)
        src = DatasetSource(X)
        spectrum = empirical_spectrum(X, d.num_outliers or cfg.network.K)
        return DataBundle(src, spectrum, GaussianSource(src.covariance()))
    model = SpikedCovarianceModel.build(
        d.dim,
        d.rho_tilde,
        d.sigma,
        basis=d.basis,
        latent_law=latent_law or d.latent_law,
        seed=seeds_for(cfg.seed)["data"],
    )
    src = SpikedSource(model)
    return DataBundle(src, spectral_model_of(model), src, model)


def _network(cfg: ExperimentConfig, D: int, **over) -> AutoencoderState:
    n = cfg.network
    opts = dict(
        seed=seeds_for(cfg.seed)["init"],
        std=n.std,
        decoder_std=n.decoder_std,
        tied=n.tied,
        bias=n.bias,
        scaled_fields=n.scaled_fields,
    )
    activation = over.pop("activation", n.activation)
    opts.update(over)
    return AutoencoderState.random(n.K, D, activation, **opts)


def _train_cfg(cfg: ExperimentConfig, D: int, **over) -> TrainConfig:
    t = cfg.train
    opts = dict(
        eta=t.eta,
        kappa=t.kappa,
        rescale_lr=t.rescale_lr,
        lr_schedule=t.lr_schedule,
        lr_decay_steps=t.lr_decay_steps,
        steps=int(round(t.s_max * D)),
        seed=seeds_for(cfg.seed)["train"],
        truncated=t.truncated,
        train_bias=cfg.network.bias,
        log_factor=t.log_factor,
        n_eval=t.n_eval,
    )
    opts.update(over)
    return TrainConfig(**opts)


def _log_steps(cfg: ExperimentConfig, D: int) -> np.ndarray:
    return geometric_steps(int(round(cfg.train.s_max * D)), cfg.train.log_factor)


def _parallel(jobs, threads: int) -> list:
    if threads <= 1 or len(jobs) == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def _merge(traces: dict[str, Trace], columns: list[str]) -> Trace:
    """Side-by-side columns of traces logged on the same grid, suffixed by run name."""
    names = list(traces)
    base = traces[names[0]]
    out = Trace()
    for i, row in enumerate(base.rows):
        merged = {"s": row["s"]}
        for name in names:
            other = traces[name].rows[i]
            if other["s"] != row["s"]:
                raise ValueError("traces logged on different grids")
            for c in columns:
                if c in other:
                    merged[f"{c}_{name}"] = other[c]
        out.append(merged)
    return out


def plateau_window(s, pmse, level: float, tol: float = 0.02, min_span: float = 1.25):
    """Longest run of consecutive logged points within ``tol`` of ``level``.

    Returns (s_start, s_end) when the run spans a factor of at least
    ``min_span`` in s, else None.
    """
    s, pmse = np.asarray(s, dtype=float), np.asarray(pmse, dtype=float)
    near = np.abs(pmse - level) <= tol * level
    best = None
    i = 0
    while i < near.size:
        if not near[i]:
            i += 1
            continue
        j = i
        while j + 1 < near.size and near[j + 1]:
            j += 1
        if s[i] > 0 and s[j] / s[i] >= min_span:
            if best is None or s[j] / s[i] > best[1] / best[0]:
                best = (float(s[i]), float(s[j]))
        i = j + 1
    return best


def _pca_hlines(levels: list[float], ranks) -> list[tuple[str, float]]:
    return [(f"pca rank {r}", levels[r]) for r in ranks if r < len(levels)]


def max_rel_gap(s, a, b, s_min: float = 0.0) -> float:
    s, a, b = (np.asarray(v, dtype=float) for v in (s, a, b))
    keep = s >= s_min
    if not keep.any():
        return math.nan
    return float(np.max(np.abs(a[keep] - b[keep]) / np.abs(b[keep])))


# ---------------------------------------------------------------------------
# kinds


def run_ode_vs_sim(cfg: ExperimentConfig, threads: int) -> Result:
    data = build_data(cfg)
    D, act = data.dim, cfg.network.activation
    state = _network(cfg, D)
    ops0 = measure_order_parameters(state, data.spectrum, data.moments)
    steps = _log_steps(cfg, D)
    tcfg = _train_cfg(cfg, D)
    ocfg = ODEConfig(eta=cfg.train.eta, kappa=cfg.train.kappa, activation=act, ds=cfg.ode.ds)
    sim, states = _parallel(
        [lambda: train(state, data.source, tcfg, log_steps=steps), lambda: integrate(ops0, ocfg, steps / D)],
        threads,
    )
    trace = Trace()
    for row, st in zip(sim.rows, states):
        ode = pmse_from_order_params(st, act)
        trace.append(
            {
                "s": row["s"],
                "pmse_sim": row["pmse"],
                "pmse_sim_stderr": row["pmse_stderr"],
                "pmse_ode": ode,
                "rel_gap": abs(row["pmse"] - ode) / ode,
            }
        )
    gap = max_rel_gap(trace.column("s"), trace.column("pmse_sim"), trace.column("pmse_ode"), cfg.compare.s_min)
    levels = data.pca_levels(cfg.network.K)
    summary = {
        "final_pmse_sim": trace.rows[-1]["pmse_sim"],
        "final_pmse_ode": trace.rows[-1]["pmse_ode"],
        "max_rel_gap": gap,
        "gap_window_s_min": cfg.compare.s_min,
        "tolerance": cfg.compare.tolerance,
        "pass_agreement": gap <= cfg.compare.tolerance,
    }
    summary.update({f"pca_error_{r}": v for r, v in enumerate(levels)})
    return Result(
        trace, summary, ["pmse_sim", "pmse_ode"], _pca_hlines(levels, range(1, len(levels))), "simulation vs ODE"
    )


def run_sequential_plateaus(cfg: ExperimentConfig, threads: int) -> Result:
    data = build_data(cfg)
    K, act = cfg.network.K, cfg.network.activation
    n = cfg.network
    ops0 = init_from_finite_D(
        cfg.ode.init_dim, K, data.spectrum, seeds_for(cfg.seed)["init"], std=n.std, decoder_std=n.decoder_std
    )
    s_max = cfg.ode.s_max or cfg.train.s_max
    times = np.concatenate([[0.0], np.logspace(-2, math.log10(s_max), int(40 * (math.log10(s_max) + 2)) + 1)])
    ocfg = ODEConfig(eta=cfg.train.eta, kappa=cfg.train.kappa, activation=act, ds=cfg.ode.ds)
    states = integrate(ops0, ocfg, times)
    trace = Trace()
    for st in states:
        row = {"s": st.s, "pmse": pmse_from_order_params(st, act)}
        row.update(st.flat_columns())
        trace.append(row)
    levels = data.pca_levels(K)
    s, pm = trace.column("s"), trace.column("pmse")
    summary: dict[str, object] = {}
    top = len(levels) - 1
    for r in range(1, top):
        win = plateau_window(s, pm, levels[r], tol=0.02)
        summary[f"plateau_{r}_level"] = levels[r]
        summary[f"plateau_{r}_window"] = "none" if win is None else f"{win[0]:.6g}..{win[1]:.6g}"
        summary[f"pass_plateau_{r}"] = win is not None
    final = float(pm[-1])
    summary["final_pmse"] = final
    summary[f"final_over_pca_{top}"] = final / levels[top]
    summary["pass_final"] = abs(final - levels[top]) <= 0.02 * levels[top]
    return Result(trace, summary, ["pmse"], _pca_hlines(levels, range(1, top + 1)), "ODE plateaus")


def _pair_runs(cfg, threads, data, variants: dict[str, dict], measure=None, columns=("pmse", "pmse_stderr")):
    """Train one network per variant on the same data; returns (merged trace, final states)."""
    D = data.dim
    steps = _log_steps(cfg, D)
    jobs, states = [], {}
    for name, v in variants.items():
        st = _network(cfg, D, **v.get("network", {}))
        states[name] = st
        tc = _train_cfg(cfg, D, **v.get("train", {}))
        src = v.get("source", data.source)
        jobs.append(lambda st=st, tc=tc, src=src: train(st, src, tc, log_steps=steps, measure=measure))
    traces = dict(zip(variants, _parallel(jobs, threads)))
    cols = list(columns)
    for tr in traces.values():
        cols += [c for c in tr.columns if c not in cols and c != "s"]
    return _merge(traces, cols), states


def run_tied_vs_untied(cfg: ExperimentConfig, threads: int) -> Result:
    data = build_data(cfg)
    K = cfg.network.K
    trace, _ = _pair_runs(cfg, threads, data, {"tied": {"network": {"tied": True}}, "untied": {"network": {"tied": False}}})
    levels = data.pca_levels(K)
    tied, untied = trace.rows[-1]["pmse_tied"], trace.rows[-1]["pmse_untied"]
    top = len(levels) - 1
    summary = {
        "final_pmse_tied": tied,
        "final_pmse_untied": untied,
        "tied_over_pca_1": tied / levels[1],
        f"untied_over_pca_{top}": untied / levels[top],
        "pass_tied_above_rank1": tied >= 0.9 * levels[1],
        "pass_untied_reaches_rankK": untied <= 1.05 * levels[top],
    }
    return Result(trace, summary, ["pmse_tied", "pmse_untied"], _pca_hlines(levels, (1, top)), "tied vs untied")


def run_relu_bias(cfg: ExperimentConfig, threads: int) -> Result:
    data = build_data(cfg)
    K = cfg.network.K

    def biases(st):
        return {} if st.b is None else {f"bias_{k}": float(v) for k, v in enumerate(st.b)}

    trace, states = _pair_runs(
        cfg,
        threads,
        data,
        {
            "bias": {"network": {"bias": True}, "train": {"train_bias": True}},
            "nobias": {"network": {"bias": False}, "train": {"train_bias": False}},
        },
        measure=biases,
    )
    levels = data.pca_levels(K)
    top = len(levels) - 1
    half = math.ceil(K / 2)
    with_b, without = trace.rows[-1]["pmse_bias"], trace.rows[-1]["pmse_nobias"]
    b = states["bias"].b
    frac = float(np.mean(b > 0))
    summary = {
        "final_pmse_bias": with_b,
        "final_pmse_nobias": without,
        f"bias_over_pca_{top}": with_b / levels[top],
        f"nobias_over_pca_{half}": without / levels[half],
        "final_biases": " ".join(f"{v:.6g}" for v in b),
        "positive_bias_fraction": frac,
        "pass_bias_reaches_rankK": with_b <= 1.15 * levels[top],
        "pass_nobias_stalls_half": abs(without - levels[half]) <= 0.15 * levels[half],
        "pass_biases_positive": frac >= 0.8,
    }
    return Result(trace, summary, ["pmse_bias", "pmse_nobias"], _pca_hlines(levels, (half, top)), "ReLU with and without bias")


def run_longtime_reduced(cfg: ExperimentConfig, threads: int) -> Result:
    r, d = cfg.reduced, cfg.data
    rho = np.asarray(d.rho_tilde, dtype=float)
    tail = float(d.sigma)
    s0 = AlignedState(r.alpha_w, r.alpha_v, rho, cfg.network.activation)
    top = math.log10(r.s_max)
    times = np.logspace(-2, top, int(round(r.points_per_decade * (top + 2))) + 1)
    traj = integrate_reduced(s0, times, eta=cfg.train.eta, tail=tail, sqrt_decoder=r.sqrt_decoder)
    trace = Trace()
    for row in traj.rows():
        trace.append(row)
    window = (r.s_max / 10**r.fit_decades, r.s_max)
    slope_w, slope_v = powerlaw_fit(traj.s, traj.alpha_w, traj.alpha_v, window, cfg.train.eta)
    aw_end = traj.alpha_w[-1]
    fp = AlignedState(aw_end, fixed_point_alpha_v(s0.activation, aw_end, rho), rho, s0.activation)
    fp_gap = abs(pmse_reduced(fp, tail) - tail)
    summary = {
        "flow": "sqrt_decoder" if r.sqrt_decoder else "aligned",
        "fit_window": f"{window[0]:.6g}..{window[1]:.6g}",
        "exponent_alpha_w": slope_w,
        "exponent_alpha_v": slope_v,
        "delta_w": -slope_w,
        "delta_v": slope_v,
        "final_pmse": float(traj.pmse[-1]),
        "tail": tail,
        "fixed_point_gap": fp_gap,
        "pass_delta": abs(-slope_w - 1 / 6) <= 0.03 and abs(slope_v - 1 / 6) <= 0.03,
        "pass_fixed_point": fp_gap <= 1e-8,
    }
    cols = [c for c in trace.columns if c.startswith("alpha_")]
    return Result(trace, summary, cols, [], "aligned-manifold scale constants", ylabel="|alpha|", logy=True)


def run_truncated_vs_vanilla(cfg: ExperimentConfig, threads: int) -> Result:
    data = build_data(cfg)
    K = cfg.network.K

    def metrics(st):
        ov, err = subspace_metrics(st, data.spectrum)
        row = {f"overlap_{k}": float(v) for k, v in enumerate(ov)}
        row["subspace_err"] = err
        return row

    trace, _ = _pair_runs(
        cfg,
        threads,
        data,
        {"truncated": {"train": {"truncated": True}}, "vanilla": {"train": {"truncated": False}}},
        measure=metrics,
    )
    last = trace.rows[-1]
    levels = data.pca_levels(K)
    top = len(levels) - 1
    ov_t = [last[f"overlap_{k}_truncated"] for k in range(K)]
    ov_v = [last[f"overlap_{k}_vanilla"] for k in range(K)]
    pt, pv = last["pmse_truncated"], last["pmse_vanilla"]
    summary = {
        "final_pmse_truncated": pt,
        "final_pmse_vanilla": pv,
        f"truncated_over_pca_{top}": pt / levels[top],
        "overlaps_truncated": " ".join(f"{v:.6g}" for v in ov_t),
        "overlaps_vanilla": " ".join(f"{v:.6g}" for v in ov_v),
        "subspace_err_truncated": last["subspace_err_truncated"],
        "subspace_err_vanilla": last["subspace_err_vanilla"],
        "pass_truncated_overlaps": min(ov_t) >= 0.98,
        "pass_pmse_matches_vanilla": abs(pt - pv) <= 0.05 * pv,
        "pass_vanilla_subspace": last["subspace_err_vanilla"] <= 0.1,
        "pass_vanilla_rotated": min(ov_v) <= 0.9,
    }
    return Result(
        trace, summary, ["pmse_truncated", "pmse_vanilla"], _pca_hlines(levels, range(1, top + 1)), "truncated vs vanilla SGD"
    )


def run_gaussian_equivalence(cfg: ExperimentConfig, threads: int) -> Result:
    if cfg.data.dataset:
        data = build_data(cfg)
        other, other_src = "dataset", data.source
        gauss_src = data.moments
    else:
        law = cfg.data.latent_law if cfg.data.latent_law != "gaussian" else "laplace"
        data = build_data(cfg, latent_law=law)
        other, other_src = law, data.source
        gauss_src = SpikedSource(data.model.with_latent_law("gaussian"))
    trace, _ = _pair_runs(cfg, threads, data, {"gaussian": {"source": gauss_src}, other: {"source": other_src}})
    for row in trace.rows:
        row["rel_gap"] = abs(row[f"pmse_{other}"] - row["pmse_gaussian"]) / row["pmse_gaussian"]
    gap = max_rel_gap(trace.column("s"), trace.column(f"pmse_{other}"), trace.column("pmse_gaussian"), cfg.compare.s_min)
    levels = data.pca_levels(cfg.network.K)
    summary = {
        "inputs": other,
        "final_pmse_gaussian": trace.rows[-1]["pmse_gaussian"],
        f"final_pmse_{other}": trace.rows[-1][f"pmse_{other}"],
        "max_rel_gap": gap,
        "gap_window_s_min": cfg.compare.s_min,
        "tolerance": cfg.compare.tolerance,
        "pass_equivalence": gap <= cfg.compare.tolerance,
    }
    return Result(
        trace, summary, ["pmse_gaussian", f"pmse_{other}"], _pca_hlines(levels, range(1, len(levels))), "Gaussian equivalence"
    )


def run_online_pca_bench(cfg: ExperimentConfig, threads: int) -> Result:
    data = build_data(cfg)
    p, K = cfg.pca, cfg.network.K
    D = data.dim
    lr = LearningRate(p.eta0, p.schedule, p.t0)
    seeds = seeds_for(cfg.seed)
    log_steps = geometric_steps(p.steps, cfg.train.log_factor)
    jobs, states = [], []
    for j in range(p.seeds):
        st = PcaLearnerState.random(K, D, p.rule, lr, kappa=p.kappa, seed=seeds["init"] + 1000 * j, std=p.std)
        states.append(st)
        jobs.append(
            lambda st=st, j=j: train_rule(
                st, data.source, p.steps, spectrum=data.spectrum, seed=seeds["train"] + 1000 * j, log_steps=log_steps
            )
        )
    traces = _parallel(jobs, threads)
    trace = Trace()
    for i, row in enumerate(traces[0].rows):
        out = {"s": row["s"]}
        for k in range(K):
            vals = [tr.rows[i][f"overlap_{k}"] for tr in traces]
            out[f"overlap_{k}_min"] = min(vals)
            out[f"overlap_{k}_mean"] = float(np.mean(vals))
        if "recon_error" in row:
            out["recon_error_mean"] = float(np.mean([tr.rows[i]["recon_error"] for tr in traces]))
        trace.append(out)
    finals = [[tr.rows[-1][f"overlap_{k}"] for k in range(K)] for tr in traces]
    worst = min(min(f) for f in finals)
    k_ref = min(K, data.spectrum.num_outliers)
    summary: dict[str, object] = {"rule": p.rule, "steps": p.steps}
    for j, f in enumerate(finals):
        summary[f"seed_{j}_overlaps"] = " ".join(f"{v:.6g}" for v in f)
    summary["worst_overlap"] = worst
    summary["offline_pca_error"] = offline_pca(data.spectrum, k_ref)[1]
    if "recon_error_mean" in trace.rows[-1]:
        summary["final_recon_error_mean"] = trace.rows[-1]["recon_error_mean"]
    summary["target_overlap"] = p.target_overlap
    summary["pass_recovery"] = worst >= p.target_overlap
    cols = [f"overlap_{k}_min" for k in range(K)]
    return Result(trace, summary, cols, [], f"{p.rule} rule overlaps", ylabel="overlap", logy=False)


def run_scaling_robustness(cfg: ExperimentConfig, threads: int) -> Result:
    data = build_data(cfg)
    K = cfg.network.K

    def norms(st):
        return {
            "w_norm": float(np.linalg.norm(st.W, axis=1).mean()),
            "v_norm": float(np.linalg.norm(st.V, axis=1).mean()),
        }

    trace, _ = _pair_runs(
        cfg, threads, data, {"tied": {"network": {"tied": True}}, "untied": {"network": {"tied": False}}}, measure=norms
    )
    levels = data.pca_levels(K)
    top = len(levels) - 1
    first, last = trace.rows[0], trace.rows[-1]
    tied, untied = last["pmse_tied"], last["pmse_untied"]
    w_peak = float(np.max(trace.column("w_norm_untied")))
    summary = {
        "rescale_lr": cfg.train.rescale_lr,
        "scaled_fields": cfg.network.scaled_fields,
        "final_pmse_tied": tied,
        "final_pmse_untied": untied,
        "tied_over_pca_1": tied / levels[1],
        f"untied_over_pca_{top}": untied / levels[top],
        "w_norm_final_over_peak_untied": last["w_norm_untied"] / w_peak,
        "v_norm_final_over_initial_untied": last["v_norm_untied"] / first["v_norm_untied"],
        "pass_tied_above_rank1": tied >= 0.9 * levels[1],
        "pass_untied_beats_tied": untied < tied,
        "pass_encoder_shrinks": last["w_norm_untied"] < 0.5 * w_peak,
        "pass_decoder_grows": last["v_norm_untied"] > first["v_norm_untied"],
    }
    return Result(trace, summary, ["pmse_tied", "pmse_untied"], _pca_hlines(levels, (1, top)), "raw SGD without rescaling")


RUNNERS = {
    "ode_vs_sim": run_ode_vs_sim,
    "sequential_plateaus": run_sequential_plateaus,
    "tied_vs_untied": run_tied_vs_untied,
    "relu_bias": run_relu_bias,
    "longtime_reduced": run_longtime_reduced,
    "truncated_vs_vanilla": run_truncated_vs_vanilla,
    "gaussian_equivalence": run_gaussian_equivalence,
    "online_pca_bench": run_online_pca_bench,
    "scaling_robustness": run_scaling_robustness,
}


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> Result:
    validate(cfg)
    t0 = time.perf_counter()
    result = RUNNERS[cfg.kind](cfg, max(1, threads))
    result.trace.meta = {"kind": cfg.kind, "seed": str(cfg.seed)}
    result.summary = {"kind": cfg.kind, "seed": cfg.seed, **result.summary}
    result.summary["runtime_seconds"] = round(time.perf_counter() - t0, 3)
    return result


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def format_summary(summary: dict[str, object]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in summary.items())


def write_artifacts(result: Result, out_dir) -> Path:
    """Write run.csv, summary.txt and plot.svg into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trace.to_csv(out / "run.csv")
    (out / "summary.txt").write_text(format_summary(result.summary))
    series = [(c, result.trace.column("s"), result.trace.column(c)) for c in result.plot_series]
    if result.ylabel.startswith("|"):
        series = [(c, x, np.abs(y)) for c, x, y in series]
    svg = svg_plot(series, title=result.title, ylabel=result.ylabel, logy=result.logy, hlines=result.hlines)
    (out / "plot.svg").write_text(svg)
    return out
