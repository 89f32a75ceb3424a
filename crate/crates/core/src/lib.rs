pub mod checkpoint;
pub mod commands;
pub mod container;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod layout;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod projection;
pub mod protocol;
pub mod pseudo_label;
pub mod render;
pub mod sampling;
pub mod seed;
pub mod skeleton;
pub mod synthetic;
pub mod text;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/features.md")]
    struct Features;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/sampling.md")]
    struct Sampling;
    #[doc = include_str!("../../../book/src/pseudo_labels.md")]
    struct PseudoLabels;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
