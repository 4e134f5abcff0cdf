//! Elastic interaction energy: spectral field form, direct curve form and
//! level-set evolution driven by it.

mod curve;
mod evolve;
mod field;
mod spectral;

pub use curve::{
    curve_energy_direct, curve_interaction_energy, curve_self_energy, LineElement, Orientation, PolyCurve,
};
pub use evolve::{
    antialiased_disk, contour_evolve, indicator, level_perimeter, signed_distance_init, stable_time_step,
    write_energy_csv, write_snapshots, EvolutionRecord, Scenario, ScenarioSetup, SCENARIO_SIZE,
};
pub use field::Field2D;
pub use spectral::{
    combined_field, elastic_energy_field, elastic_loss, elastic_loss_grad, fourier_multiplier, heaviside,
    heaviside_derivative, smoothed_heaviside, smoothed_heaviside_derivative, ElasticConfig, ElasticLoss,
    SpectralMultiplier, SpectralOperator, TARGET_SIGN,
};
