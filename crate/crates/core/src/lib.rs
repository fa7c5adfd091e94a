//! Co-teaching (CT) for unsupervised domain expansion, at desk scale.
//!
//! Two frozen teachers, a source-supervised network and an MMD-adapted
//! target network, are distilled into a single student that serves both
//! domains. The crate carries everything the experiments need: a small
//! reverse-mode autodiff tape, seeded Beta/Gamma samplers, a synthetic
//! domain-pair generator with a Bayes oracle, MLP classifiers with
//! checkpointing, the training procedures, and the evaluation protocols.

pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use eval::{
    accuracy, ambiguity_rate, consistency_split, evaluate_ude, gamma_ablation, group_accuracy,
    AblationRow, ConsistencySplit, EvalReport, GroupAccuracy,
};
pub use losses::{
    co_teaching_kl, cross_entropy, kdct_batch_loss, mict_batch_loss, mict_batch_loss_per_sample,
    mix_rows, mmd2_rbf, multit_batch_loss, teacher_probs, Batch,
};
pub use model::{
    load_checkpoint, predict, save_checkpoint, BoundMlp, Checkpoint, CheckpointMeta, MlpClassifier,
};
pub use rng::{sample_beta, sample_gamma, sample_uniform, BetaParams, SeededRng};
pub use synth::{
    bayes_oracle_accuracy, generate_domain_pair, generate_domain_pair_traced, load_dataset,
    metadata_path, save_dataset, Domain, DomainPairDataset, DomainShiftConfig, GenerationTrace,
    Sample, Split, SubsetTrace,
};
pub use tensor::{grad_check, sgd_step, SgdParams, Tape, Tensor, Var};
pub use train::{
    ct_distill, kdde_distill, multit_distill, train_source, train_uda_mmd, GammaSetting,
    LrSchedule, TeacherPair, TrainConfig, TrainLog, TrainedModel,
};
