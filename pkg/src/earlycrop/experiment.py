"""Turn an ExperimentConfig into a dataset and a freshly initialized model."""

from __future__ import annotations

from .config import ExperimentConfig
from .data import ConfigError, Dataset, load_csv, load_idx, make_synthetic
from .models import Model, cnn, mlp


def build_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset == "idx":
        return load_idx(config.data_path, config.labels_path, seed=config.seed, flatten=config.model == "mlp")
    if config.dataset == "csv":
        return load_csv(config.data_path, config.csv_task, seed=config.seed)
    return make_synthetic(config.dataset, config.n_samples, config.noise, config.seed)


def build_model(config: ExperimentConfig, dataset: Dataset) -> Model:
    head = dataset.task
    if config.model == "mlp":
        return mlp([dataset.n_features, *config.hidden, dataset.n_outputs], config.activation, head, config.seed)
    shape = dataset.x_train.shape[1:]
    if len(shape) == 2:
        shape = (*shape, 1)
    if len(shape) != 3:
        raise ConfigError(f"cnn needs image inputs (H, W[, C]); got sample shape {dataset.x_train.shape[1:]}")
    return cnn(tuple(shape), config.channels, dataset.n_outputs, config.hidden, activation=config.activation, head=head, seed=config.seed)


def setup(config: ExperimentConfig) -> tuple[Dataset, Model]:
    config.validate()
    dataset = build_dataset(config)
    return dataset, build_model(config, dataset)
