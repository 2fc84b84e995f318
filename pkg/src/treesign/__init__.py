"""Boosted tree ensembles with fragile, black-box verifiable signatures."""
from .attacks import AttackReport, attack_append, attack_noise, attack_remove, measure_fragility
from .booster import Ensemble, RegressionTree, continue_training, evaluate, predict_class, predict_proba, predict_scores, train
from .data import BinnedDataset, BinningMap, RawDataset, apply_bins, build_bins, parse_libsvm, read_libsvm
from .model_io import fingerprint, load_keys, load_model, save_keys, save_model
from .signing import (
    SignatureKey,
    SignatureKeySet,
    SignatureMessage,
    Verdict,
    embed,
    extract,
    locate_candidates,
    select_keys,
    unembed,
    verify,
)

__version__ = "0.1.0"
