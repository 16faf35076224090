//! Training procedures.

pub mod denoise;
mod pose;
mod reconstruct;
mod sds;

pub use denoise::{DenoiseKind, DenoiseRequest, Denoiser, IdentityDenoiser, OracleDenoiser, ProcessDenoiser};
pub use pose::{pose_energy, refine_pose, PoseEnergy, PoseRefinementConfig, PoseRefinementReport, NORM_SMOOTHING};
pub use reconstruct::{
    estimate_occlusion, reconstruct, run_steps, scene_extent, LearningRates, OcclusionMode, OcclusionConfig, ReconstructionConfig,
    ReconstructionReport, StepHook, StepLosses, Trainer, TrainingData,
};
pub use sds::{encode_normals, novel_views, sds_refine, timestep_upper, SdsConfig, SdsHook, SdsPhase, SdsReport};
