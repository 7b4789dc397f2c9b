"""Moment-matching training for autoregressive sequence models, on exactly enumerable tabular models."""

__version__ = "0.1.0"

from .data import ParallelCorpus, SyntheticTaskSpec, batches, generate_synthetic, load_parallel_corpus
from .errors import ConfigError, EnumerationTooLarge, InvalidSequenceError, InvalidTokenError, MMError, ParseError
from .estimators import (EstimatorConfig, ce_gradient, estimate_instance_gradient, instance_gradient_exact,
                         mm_gradient_economical, mm_gradient_exact, mm_gradient_jackknife, mm_gradient_simplistic,
                         mm_loss_exact, model_average_exact, rl_pg_gradient)
from .features import FeatureSet, LexDictionary, empirical_average, length_ratio, lexical_dict_features, load_lex_dictionary
from .seqmodel import TabularModel, Vocabulary, enumerate_support, grad_log_prob, log_prob, sample
from .training import TrainConfig, dev_mm_loss, interpolate, train
from .verification import BiasReport, estimator_bias_report, finite_difference_gradient, lemma1_check
