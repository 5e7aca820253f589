//! Amodal counting building blocks: occlusion synthesis, feature pyramids,
//! the feature reconstruction module, distillation and attention losses,
//! language-conditioned GradCAM and a toy teacher-student training rig.

pub mod annotation;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod frm;
pub mod gradcheck;
pub mod gradcam;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod occlusion;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod raster;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
