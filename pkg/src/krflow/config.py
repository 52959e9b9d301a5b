"""Experiment configuration: a strict, sectioned key-value file.

Every section and key is declared in the schema below; unknown or missing
entries are errors, so typos cannot silently fall back to defaults.  Values
render with ``repr`` and the canonical dump is stable, which makes the
config hash well defined and lets files round-trip losslessly.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass
class GridSection:
    height: int
    width: int


@dataclass
class KleSection:
    variance: float
    mean: float
    length_scales: tuple[float, ...]
    per_scale: int
    energy_fraction: float


@dataclass
class VaeSection:
    latent_dim: int
    encoder_hidden: tuple[int, ...]
    decoder_hidden: tuple[int, ...]
    epochs: int
    batch_size: int
    learning_rate: float


@dataclass
class SurrogateSection:
    hidden: tuple[int, ...]
    epochs: int
    batch_size: int
    learning_rate: float
    beta: float
    source: float


@dataclass
class FlowSection:
    n_groups: int
    layers_per_stage: int
    hidden_width: int
    hidden_depth: int
    scale_bound: float


@dataclass
class InferenceSection:
    sample_size: int
    epochs: int
    batch_size: int
    learning_rate: float
    posterior_samples: int
    decoder_sampling: str


@dataclass
class ObservationSection:
    sensor_rows: int
    sensor_cols: int
    sensor_origin: float
    sensor_spacing: float
    noise_level: float
    truth_scale: float


@dataclass
class McmcSection:
    steps: int
    retained: int
    step_size: float          # 0 means tune automatically
    target_acceptance_low: float
    target_acceptance_high: float


@dataclass
class SeedsSection:
    data: int
    truth: int
    noise: int
    vae: int
    surrogate: int
    flow: int
    mcmc: int
    posterior: int


@dataclass
class ExperimentConfig:
    grid: GridSection
    kle: KleSection
    vae: VaeSection
    surrogate: SurrogateSection
    flow: FlowSection
    inference: InferenceSection
    observation: ObservationSection
    mcmc: McmcSection
    seeds: SeedsSection


_SECTIONS = {
    "grid": GridSection,
    "kle": KleSection,
    "vae": VaeSection,
    "surrogate": SurrogateSection,
    "flow": FlowSection,
    "inference": InferenceSection,
    "observation": ObservationSection,
    "mcmc": McmcSection,
    "seeds": SeedsSection,
}

_PARSERS = {
    int: int,
    float: float,
    str: str,
    tuple[float, ...]: _float_tuple,
    tuple[int, ...]: _int_tuple,
}


def _render_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    unknown_sections = set(parser.sections()) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")

    built = {}
    for name, cls in _SECTIONS.items():
        if name not in parser:
            raise ConfigError(f"missing config section [{name}]")
        section = parser[name]
        declared = {f.name: f.type for f in fields(cls)}
        unknown = set(section) - set(declared)
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        values = {}
        for key, ftype in declared.items():
            if key not in section:
                raise ConfigError(f"missing key '{key}' in [{name}]")
            ftype = _resolve_type(ftype)
            try:
                values[key] = _PARSERS[ftype](section[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}.{key}: {exc}") from exc
        built[name] = cls(**values)
    return ExperimentConfig(**built)


def _resolve_type(ftype):
    if isinstance(ftype, str):
        # dataclass fields carry string annotations under future-import style
        mapping = {"int": int, "float": float, "str": str,
                   "tuple[float, ...]": tuple[float, ...],
                   "tuple[int, ...]": tuple[int, ...]}
        return mapping[ftype]
    return ftype


def render_config(config: ExperimentConfig) -> str:
    out = io.StringIO()
    for name, cls in _SECTIONS.items():
        section = getattr(config, name)
        out.write(f"[{name}]\n")
        for f in fields(cls):
            out.write(f"{f.name} = {_render_value(getattr(section, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(path, config: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        fh.write(render_config(config))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(config).encode("utf-8")).hexdigest()


def override_all_seeds(config: ExperimentConfig, seed: int) -> None:
    for f in fields(SeedsSection):
        setattr(config.seeds, f.name, seed)


def desk_config() -> ExperimentConfig:
    """A 16x16 configuration that runs the whole pipeline in minutes on a CPU."""
    return ExperimentConfig(
        grid=GridSection(height=16, width=16),
        kle=KleSection(variance=0.5, mean=1.0, length_scales=(0.2, 0.25, 0.3),
                       per_scale=200, energy_fraction=0.95),
        vae=VaeSection(latent_dim=8, encoder_hidden=(256, 128),
                       decoder_hidden=(128, 256), epochs=400, batch_size=64,
                       learning_rate=0.002),
        surrogate=SurrogateSection(hidden=(512, 512), epochs=300, batch_size=64,
                                   learning_rate=0.001, beta=100.0, source=3.0),
        flow=FlowSection(n_groups=4, layers_per_stage=8, hidden_width=48,
                         hidden_depth=2, scale_bound=2.0),
        inference=InferenceSection(sample_size=2000, epochs=10, batch_size=100,
                                   learning_rate=0.01, posterior_samples=2000,
                                   decoder_sampling="mean"),
        observation=ObservationSection(sensor_rows=8, sensor_cols=8,
                                       sensor_origin=0.0625, sensor_spacing=0.125,
                                       noise_level=0.05, truth_scale=0.25),
        mcmc=McmcSection(steps=10000, retained=2000, step_size=0.0,
                         target_acceptance_low=0.2, target_acceptance_high=0.35),
        seeds=SeedsSection(data=101, truth=202, noise=303, vae=404,
                           surrogate=505, flow=606, mcmc=707, posterior=808),
    )
