//! Heavy-tailed spectral analysis of neural network weight matrices with
//! fixed-aspect-ratio subsampling, plus layer-wise learning-rate and
//! sparsity allocation driven by the resulting tail exponents.

pub mod allocators;
pub mod analysis;
pub mod bench;
pub mod sampler;
pub mod spectral;
pub mod tensor_io;

pub use faer;

pub use allocators::{
    assign_learning_rates, assign_sparsities, select_layers, AllocError, AllocationResult,
    LrMapping, LrScheduleConfig, LsConfig, Metric, SparsityConfig,
};
pub use analysis::{analyze_model, LayerOverrides, ModelAnalysis};
pub use sampler::{
    analyze_layer, farms_alpha_conv, farms_alpha_linear, plan_subsamples, LayerReport,
    SamplerError, SubsampleConfig, SubsamplePlan,
};
pub use spectral::{esd_of_matrix, hill_alpha, ks_distance_to_mp, Esd, HillConfig, SpectralError};
pub use tensor_io::{load_manifest, load_tensor, ModelManifest, TensorIoError, WeightTensor};
