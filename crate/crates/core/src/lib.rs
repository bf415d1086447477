//! Bayesian subset search over linear actions derived from posterior
//! predictive draws, with out-of-sample evaluation of candidate subsets,
//! acceptable families and co-variable importance.

pub mod action;
pub mod backend;
pub mod error;
pub mod evaluate;
pub mod importance;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod search;
pub mod pipeline;
pub mod synthetic;

pub use action::{
    interval_estimate, logistic_pseudo_data, optimal_linear_action, optimal_logistic_action, predictive_action_draws,
    ActionDraws, Interval, LinearAction, LossKind, Subset, WeightSpec, Weights,
};
pub use backend::{
    fit_conjugate_gaussian, point_predictions, sample_posterior, sample_predictive, Dataset, FittedModel,
    FunctionalSpec, LikelihoodSpec, ModelConfig, PointPredictions, PosteriorDraws, PredictionKind, PredictiveDraws,
    ResponseKind,
};
pub use error::{Error, Result};
pub use search::{
    bba_search, candidate_family_classification, candidate_family_regression, exhaustive_search, screen,
    CandidateFamily, FamilyEntry,
};
pub use synthetic::{generate_synthetic, SyntheticKind, SyntheticTruth};
pub use evaluate::{
    acceptable_family, acceptable_family_newx, best_subset, d_tilde_draws, make_folds, out_of_sample_losses,
    sir_resample, AcceptableFamily, EvaluationConfig, FoldSpec, SubsetLosses,
};
pub use importance::{keystones, redundancy_pairs, vi_matrix, ImportanceMatrix};
