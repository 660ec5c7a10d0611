//! Kurtosis signal model, voxelwise fitting and ROI summaries.

mod fit;
mod maps;
mod model;

pub use fit::{check_determined, fit_voxel, FitConfig, FitResult, EPSILON};
pub use maps::{
    fit_roi, load_maps, roi_mean_coefficients, save_maps, threshold_classify, MapsManifest, ParameterMaps,
    MAPS_FORMAT, THRESHOLD_WIDTH,
};
pub use model::{forward_jacobian, forward_signal, DkiParams};
