import numpy as np
import pytest

from krflow.darcy import add_noise, lattice_operator, observe, solve_darcy
from krflow.flow import FlowConfig
from krflow.grf import (
    CovarianceSpec,
    Grid,
    assemble_covariance_matrix,
    dataset_to_array,
    generate_prior_dataset,
    sample_field,
    truncated_kle,
)
from krflow.inference import (
    FlowTrainConfig,
    make_surrogate_loglike,
    pcn_mcmc,
    posterior_moments,
    posterior_moments_from_states,
    relative_error,
    train_posterior_flow,
    tune_pcn_step,
)
from krflow.surrogate import (
    SurrogateTrainConfig,
    surrogate_relative_error,
    train_surrogate,
)
from krflow.vae import VaeTrainConfig, sample_prior, train_vae


class DeskPipeline:
    """One complete desk-scale run shared by the acceptance criteria.

    16x16 grid, three correlation lengths, 600 prior samples, latent
    dimension 8.  Training budgets are sized so the whole object builds in
    a few minutes of CPU time.
    """

    GRID = Grid(16, 16)
    SCALES = (0.3, 0.35, 0.4)
    TRUTH_SCALE = 0.35
    PER_SCALE = 200
    LATENT_DIM = 8
    NOISE_LEVEL = 0.05

    def __init__(self):
        grid = self.GRID
        self.dataset = dataset_to_array(generate_prior_dataset(
            grid, 0.5, 1.0, self.SCALES, self.PER_SCALE, base_seed=101))

        spec = CovarianceSpec.isotropic(0.5, self.TRUTH_SCALE, 1.0)
        basis = truncated_kle(assemble_covariance_matrix(grid, spec), 0.95, grid)
        self.truth = sample_field(basis, spec, np.random.default_rng(202), seed=202).values
        pressure = solve_darcy(self.truth, grid, source=3.0)
        self.operator = lattice_operator(8, 8, 0.0625, 0.125)
        clean = observe(pressure, self.operator)
        self.obs = add_noise(clean, self.NOISE_LEVEL, np.random.default_rng(303),
                             self.operator)

        self.vae = train_vae(self.dataset, VaeTrainConfig(
            latent_dim=self.LATENT_DIM, epochs=400, batch_size=64,
            learning_rate=2e-3, seed=404))

        self.surrogate = train_surrogate(self.dataset, SurrogateTrainConfig(
            epochs=600, batch_size=32, learning_rate=1e-3, seed=505,
            beta=100.0, source=3.0, hidden=(512, 512)))
        self.surrogate_error = surrogate_relative_error(
            self.surrogate, self.dataset[:24], source=3.0)

        self.flow_config = FlowConfig(dim=self.LATENT_DIM, n_groups=4,
                                      layers_per_stage=8, hidden_width=48)
        self.flow = train_posterior_flow(
            self.flow_config, self.vae, self.surrogate, self.obs,
            FlowTrainConfig(sample_size=2000, epochs=10, batch_size=100,
                            learning_rate=0.01, seed=606))
        self.posterior = posterior_moments(self.flow, self.vae, 2000,
                                           np.random.default_rng(808),
                                           exact_field=self.truth)

        prior_fields = sample_prior(self.vae, 2000, np.random.default_rng(808))
        self.prior_mean_error = relative_error(prior_fields.mean(axis=0), self.truth)

        log_like = make_surrogate_loglike(self.vae, self.surrogate, self.obs)
        self.pcn_step = tune_pcn_step(log_like, self.LATENT_DIM, seed=707)
        self.chain = pcn_mcmc(log_like, self.LATENT_DIM, steps=10000,
                              step_size=self.pcn_step, seed=707, burn_keep=2000)
        self.mcmc_posterior = posterior_moments_from_states(
            self.chain.states, self.vae, exact_field=self.truth)


@pytest.fixture(scope="session")
def desk_pipeline():
    return DeskPipeline()
