//! Two-layer quasi-geostrophic solver.

mod model;
mod params;
mod sim;

pub use model::{
    ssd_gain, AbHistory, DiagnosticFields, Layers, QgModel, SpectralState, Wavenumbers, SSD_CUTOFF,
    SSD_STRENGTH,
};
pub use params::{resolution_ratio, ModelParams};
pub use sim::{ic_band_limit, random_initial_condition, run_simulation, Simulation};
