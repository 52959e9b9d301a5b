"""Command-line pipeline: data generation, training, inference, reporting.

Every stage reads one config file and one run directory.  Stages record the
config hash in their outputs and refuse to consume upstream artifacts whose
hash differs, so a run directory always holds a consistent chain.  Outputs
are byte-reproducible given the same config; per-stage wall times go to
separate ``*_timing.json`` files, which are the only non-reproducible
artifacts.

Exit codes: 0 success, 1 validation/dependency error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    load_config,
    override_all_seeds,
)
from .darcy import (
    DarcySolveError,
    add_noise,
    lattice_operator,
    load_observations_csv,
    observe,
    save_observations_csv,
    solve_darcy,
)
from .flow import FlowConfig, load_flow, save_flow
from .grf import (
    CovarianceSpec,
    Grid,
    assemble_covariance_matrix,
    dataset_to_array,
    generate_prior_dataset,
    load_dataset,
    sample_field,
    save_dataset,
    save_manifest,
    truncated_kle,
)
from .inference import (
    FlowTrainConfig,
    make_surrogate_loglike,
    pcn_mcmc,
    posterior_moments,
    posterior_moments_from_states,
    relative_error,
    train_posterior_flow,
    tune_pcn_step,
)
from .report import (
    load_field_csv,
    read_json,
    save_field_csv,
    save_field_pgm,
    write_json,
)
from .surrogate import (
    SurrogateTrainConfig,
    load_surrogate,
    physics_loss,
    save_surrogate,
    surrogate_relative_error,
    train_surrogate,
)
from .vae import (
    TrainingDiverged,
    VaeTrainConfig,
    elbo_batch,
    load_vae,
    sample_prior,
    save_vae,
    train_vae,
)


class DependencyError(RuntimeError):
    pass


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path.name}; run '{producer}' first")
    return path


def _check_hash(recorded: str, expected: str, artifact: str) -> None:
    if recorded != expected:
        raise DependencyError(
            f"config hash mismatch for {artifact}: the run directory was built "
            f"with a different configuration")


def _write_timing(out_dir: Path, stage: str, seconds: float) -> None:
    write_json(out_dir / f"{stage}_timing.json", {"stage": stage,
                                                  "wall_time_seconds": seconds})


def cmd_generate_data(config: ExperimentConfig, out_dir: Path) -> None:
    start = time.perf_counter()
    grid = Grid(config.grid.height, config.grid.width)
    chash = config_hash(config)

    samples = generate_prior_dataset(
        grid, config.kle.variance, config.kle.mean, config.kle.length_scales,
        config.kle.per_scale, config.seeds.data, config.kle.energy_fraction)
    save_dataset(out_dir / "dataset.bin", samples, grid)
    save_manifest(out_dir / "dataset_manifest.csv", samples)

    # held-out truth from the configured in-distribution length scale
    spec = CovarianceSpec.isotropic(config.kle.variance, config.observation.truth_scale,
                                    config.kle.mean)
    basis = truncated_kle(assemble_covariance_matrix(grid, spec),
                          config.kle.energy_fraction, grid)
    truth = sample_field(basis, spec, np.random.default_rng(config.seeds.truth),
                         seed=config.seeds.truth)
    save_field_csv(out_dir / "truth_field.csv", truth.values)
    save_field_pgm(out_dir / "truth_field.pgm", truth.values)

    pressure = solve_darcy(truth.values, grid, source=config.surrogate.source)
    save_field_csv(out_dir / "truth_pressure.csv", pressure.values)
    save_field_pgm(out_dir / "truth_pressure.pgm", pressure.values)

    operator = lattice_operator(config.observation.sensor_rows,
                                config.observation.sensor_cols,
                                config.observation.sensor_origin,
                                config.observation.sensor_spacing)
    clean = observe(pressure, operator)
    obs = add_noise(clean, config.observation.noise_level,
                    np.random.default_rng(config.seeds.noise), operator)
    save_observations_csv(out_dir / "observations.csv", obs)
    write_json(out_dir / "generate_data_meta.json", {
        "config_hash": chash,
        "n_samples": len(samples),
        "grid": [grid.height, grid.width],
        "truth_scale": config.observation.truth_scale,
        "noise_level": config.observation.noise_level,
    })
    _write_timing(out_dir, "generate_data", time.perf_counter() - start)
    print(f"generate-data: {len(samples)} samples on {grid.height}x{grid.width}, "
          f"{operator.n_sensors} sensors")


def _load_stage_inputs(config: ExperimentConfig, out_dir: Path):
    chash = config_hash(config)
    meta = read_json(_require(out_dir / "generate_data_meta.json", "generate-data"))
    _check_hash(meta["config_hash"], chash, "dataset")
    samples, grid = load_dataset(out_dir / "dataset.bin")
    return chash, grid, dataset_to_array(samples)


def cmd_train_vae(config: ExperimentConfig, out_dir: Path) -> None:
    start = time.perf_counter()
    chash, grid, data = _load_stage_inputs(config, out_dir)
    train_config = VaeTrainConfig(
        latent_dim=config.vae.latent_dim,
        epochs=config.vae.epochs,
        batch_size=config.vae.batch_size,
        learning_rate=config.vae.learning_rate,
        seed=config.seeds.vae,
        encoder_hidden=config.vae.encoder_hidden,
        decoder_hidden=config.vae.decoder_hidden,
        curve_path=str(out_dir / "vae_loss_curve.csv"),
    )
    vae = train_vae(data, train_config)
    final_loss, _ = elbo_batch(data[: min(len(data), 256)], vae,
                               np.random.default_rng(config.seeds.vae))
    save_vae(str(out_dir / "vae"), vae, seed=config.seeds.vae,
             epochs=config.vae.epochs, final_loss=final_loss,
             extra={"config_hash": chash})
    _write_timing(out_dir, "train_vae", time.perf_counter() - start)
    print(f"train-vae: d={vae.latent_dim}, final loss {final_loss:.4f}")


def cmd_train_surrogate(config: ExperimentConfig, out_dir: Path) -> None:
    start = time.perf_counter()
    chash, grid, data = _load_stage_inputs(config, out_dir)
    train_config = SurrogateTrainConfig(
        epochs=config.surrogate.epochs,
        batch_size=config.surrogate.batch_size,
        learning_rate=config.surrogate.learning_rate,
        seed=config.seeds.surrogate,
        beta=config.surrogate.beta,
        source=config.surrogate.source,
        hidden=config.surrogate.hidden,
        curve_path=str(out_dir / "surrogate_loss_curve.csv"),
    )
    sp = train_surrogate(data, train_config)
    final_loss, _ = physics_loss(data[: min(len(data), 128)], sp,
                                 source=config.surrogate.source,
                                 beta=config.surrogate.beta)
    rel = surrogate_relative_error(sp, data[: min(len(data), 16)],
                                   source=config.surrogate.source)
    save_surrogate(str(out_dir / "surrogate"), sp, seed=config.seeds.surrogate,
                   beta=config.surrogate.beta, final_loss=final_loss,
                   extra={"config_hash": chash, "relative_error_sample": rel})
    _write_timing(out_dir, "train_surrogate", time.perf_counter() - start)
    print(f"train-surrogate: final loss {final_loss:.5f}, "
          f"sample relative error {rel:.4f}")


def _load_trained_components(config: ExperimentConfig, out_dir: Path):
    chash = config_hash(config)
    gen_meta = read_json(_require(out_dir / "generate_data_meta.json", "generate-data"))
    _check_hash(gen_meta["config_hash"], chash, "dataset")
    vae_json = _require(out_dir / "vae.json", "train-vae")
    sur_json = _require(out_dir / "surrogate.json", "train-surrogate")
    vae, vae_meta = load_vae(str(out_dir / "vae"))
    sp, sur_meta = load_surrogate(str(out_dir / "surrogate"))
    _check_hash(vae_meta["config_hash"], chash, vae_json.name)
    _check_hash(sur_meta["config_hash"], chash, sur_json.name)
    _require(out_dir / "observations.csv", "generate-data")
    obs = load_observations_csv(out_dir / "observations.csv",
                                level=config.observation.noise_level)
    truth = load_field_csv(out_dir / "truth_field.csv")
    return chash, vae, sp, obs, truth


def _write_posterior_outputs(stage_dir: Path, summary, chash: str, method: str,
                             latent_dim: int, extra: dict) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    save_field_csv(stage_dir / "mean_field.csv", summary.mean_field)
    save_field_pgm(stage_dir / "mean_field.pgm", summary.mean_field)
    save_field_csv(stage_dir / "variance_field.csv", summary.variance_field)
    save_field_pgm(stage_dir / "variance_field.pgm", summary.variance_field)
    payload = {
        "config_hash": chash,
        "method": method,
        "d": latent_dim,
        "relative_error": summary.relative_error,
        "n_samples": summary.n_samples,
    }
    payload.update(extra)
    write_json(stage_dir / "summary.json", payload)


def cmd_infer_krnet(config: ExperimentConfig, out_dir: Path) -> None:
    start = time.perf_counter()
    chash, vae, sp, obs, truth = _load_trained_components(config, out_dir)
    stage_dir = out_dir / "krnet"
    stage_dir.mkdir(parents=True, exist_ok=True)

    flow_config = FlowConfig(
        dim=vae.latent_dim,
        n_groups=config.flow.n_groups,
        layers_per_stage=config.flow.layers_per_stage,
        hidden_width=config.flow.hidden_width,
        hidden_depth=config.flow.hidden_depth,
        scale_bound=config.flow.scale_bound,
    )
    train_config = FlowTrainConfig(
        sample_size=config.inference.sample_size,
        epochs=config.inference.epochs,
        batch_size=config.inference.batch_size,
        learning_rate=config.inference.learning_rate,
        seed=config.seeds.flow,
        decoder_sampling=config.inference.decoder_sampling,
        curve_path=str(stage_dir / "loss_curve.csv"),
    )
    flow = train_posterior_flow(flow_config, vae, sp, obs, train_config)
    save_flow(str(stage_dir / "flow"), flow, seed=config.seeds.flow,
              extra={"config_hash": chash})

    summary = posterior_moments(flow, vae, config.inference.posterior_samples,
                                np.random.default_rng(config.seeds.posterior),
                                exact_field=truth)
    # error of the decoder prior's mean field, for reference
    prior_fields = sample_prior(vae, config.inference.posterior_samples,
                                np.random.default_rng(config.seeds.posterior))
    prior_err = relative_error(prior_fields.mean(axis=0), truth)
    _write_posterior_outputs(stage_dir, summary, chash, "krnet", vae.latent_dim,
                             {"acceptance_rate": None,
                              "prior_mean_relative_error": prior_err})
    _write_timing(stage_dir, "infer_krnet", time.perf_counter() - start)
    print(f"infer-krnet: relative error {summary.relative_error:.4f} "
          f"(prior-mean reference {prior_err:.4f})")


def cmd_infer_mcmc(config: ExperimentConfig, out_dir: Path) -> None:
    start = time.perf_counter()
    chash, vae, sp, obs, truth = _load_trained_components(config, out_dir)
    stage_dir = out_dir / "mcmc"
    stage_dir.mkdir(parents=True, exist_ok=True)

    log_like = make_surrogate_loglike(vae, sp, obs)
    step = config.mcmc.step_size
    if step <= 0.0:
        step = tune_pcn_step(log_like, vae.latent_dim, config.seeds.mcmc,
                             target=(config.mcmc.target_acceptance_low,
                                     config.mcmc.target_acceptance_high))
    chain = pcn_mcmc(log_like, vae.latent_dim, config.mcmc.steps, step,
                     config.seeds.mcmc, config.mcmc.retained)
    summary = posterior_moments_from_states(chain.states, vae, exact_field=truth)
    _write_posterior_outputs(stage_dir, summary, chash, "mcmc", vae.latent_dim,
                             {"acceptance_rate": chain.acceptance_rate,
                              "step_size": step,
                              "total_steps": chain.total_steps})
    _write_timing(stage_dir, "infer_mcmc", time.perf_counter() - start)
    print(f"infer-mcmc: relative error {summary.relative_error:.4f}, "
          f"acceptance {chain.acceptance_rate:.2%}, step {step:.4f}")


def cmd_report(run_dirs: list[Path], out_path: Path | None) -> None:
    rows = []
    for run_dir in run_dirs:
        summary = read_json(_require(run_dir / "summary.json", "an inference stage"))
        timing_files = sorted(run_dir.glob("*_timing.json"))
        wall = sum(read_json(p)["wall_time_seconds"] for p in timing_files)
        acc = summary.get("acceptance_rate")
        rows.append((summary["method"], summary["d"], summary["relative_error"],
                     wall, "" if acc is None else acc))
    rows.sort(key=lambda r: (r[0], r[1]))
    lines = [["method", "d", "relative_error", "wall_time", "acceptance_rate"]]
    lines += [[r[0], str(r[1]), repr(r[2]), repr(r[3]),
               "" if r[4] == "" else repr(r[4])] for r in rows]
    text = "\n".join(",".join(line) for line in lines) + "\n"
    if out_path is None:
        sys.stdout.write(text)
    else:
        out_path.write_text(text)
        print(f"report: {len(rows)} rows -> {out_path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krflow",
        description="Latent-flow Bayesian inversion pipeline for Darcy flow")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_stage(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="config file path")
        p.add_argument("--out", required=True, type=Path, help="run directory")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace every stage seed with this value")
        return p

    add_stage("generate-data", "build the prior dataset, truth field and observations")
    add_stage("train-vae", "train the field prior (encoder/decoder)")
    add_stage("train-surrogate", "train the physics-constrained pressure surrogate")
    add_stage("infer-krnet", "fit the latent coupling flow to the posterior")
    add_stage("infer-mcmc", "run the pCN baseline in the latent space")

    rep = sub.add_parser("report", help="tabulate finished runs")
    rep.add_argument("run_dirs", nargs="+", type=Path,
                     help="stage output directories containing summary.json")
    rep.add_argument("--out", type=Path, default=None, help="write CSV here")
    return parser


_STAGES = {
    "generate-data": cmd_generate_data,
    "train-vae": cmd_train_vae,
    "train-surrogate": cmd_train_surrogate,
    "infer-krnet": cmd_infer_krnet,
    "infer-mcmc": cmd_infer_mcmc,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.run_dirs, args.out)
            return 0
        config = load_config(args.config)
        if args.seed_override is not None:
            override_all_seeds(config, args.seed_override)
        out_dir = args.out
        out_dir.mkdir(parents=True, exist_ok=True)
        _STAGES[args.command](config, out_dir)
        return 0
    except (ConfigError, DependencyError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, DarcySolveError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
