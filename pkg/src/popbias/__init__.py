"""Simulation of popularity-biased user choice and rankers that learn under it."""

from .choice import BiasTriple, ChoiceDistribution, disposition, sample_choice, softmax_choice
from .environment import (
    EnvironmentInstance,
    GeneratorConfig,
    PopularityDynamics,
    SelectionHistory,
    env_step,
    expected_instantaneous_value,
    make_synthetic_instance,
    popularity_bias_value,
)
from .errors import ConfigError, EnumerationBudgetError, EstimatorError

__version__ = "0.1.0"
