//! Gaussian deblurring harness: degradation, data, metrics, training and evaluation.

mod data;
mod degrade;
mod eval;
mod metrics;
mod train;

pub use data::{
    center_crop, hflip, list_images, load_image, random_crop, save_png, split_validation, synthesize_dataset, Dataset,
};
pub use degrade::{degrade, degrade_with_seed, gaussian_kernel, image_seed, mix_seed, DegradationSpec};
pub use eval::{evaluate, EvalReport, EvalRow};
pub use metrics::{psnr, ssim, PSNR_CAP, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use train::{
    resume, train, Adam, EpochRecord, TrainConfig, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG,
};
