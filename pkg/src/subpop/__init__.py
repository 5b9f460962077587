"""Subpopulation data poisoning: selection, generation, damage, defenses and theory."""

from .attacks import AttackConfig, PoisonSet, grad_opt, influence_attack, label_flip
from .data import Dataset, LabeledPoint, Split, load_csv, split_dataset, synth_gaussian_subpops
from .defenses import (DefenseOutcome, SeverClassifier, TrimClassifier, activation_clustering,
                       evaluate_defense, sever, spectral_signatures, trim)
from .metrics import DamageReport, collateral_damage, target_damage, worst_k_summary
from .models import ModelParams, SoftmaxNetwork, TrainConfig, train
from .selection import ClusterMatch, cluster_match, feature_match, kmeans, pca_fit, pick_cluster
from .theory import (MixtureSpec, chernoff_attack_bound, fit_mixture_learner, impossibility_attack,
                     sample_mixture, verify_theorem)

__version__ = "0.1.0"
