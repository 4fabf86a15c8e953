//! Training energy and carbon estimate from hardware figures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub devices: u32,
    /// Thermal design power per device, watts.
    pub tdp_watts: f64,
    pub train_hours: f64,
    /// kgCO2eq emitted per kWh.
    pub carbon_efficiency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyEstimate {
    pub kwh: f64,
    pub kg_co2eq: f64,
}

/// `kWh = devices · P_TDP · T_train / 1000`, `kgCO2eq = kWh · C_eff`.
pub fn estimate_energy_emissions(profile: &HardwareProfile) -> Result<EnergyEstimate> {
    let fields = [
        ("devices", profile.devices as f64),
        ("tdp_watts", profile.tdp_watts),
        ("train_hours", profile.train_hours),
        ("carbon_efficiency", profile.carbon_efficiency),
    ];
    for (name, v) in fields {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
        }
    }
    let kwh = profile.devices as f64 * profile.tdp_watts * profile.train_hours / 1000.0;
    Ok(EnergyEstimate {
        kwh,
        kg_co2eq: kwh * profile.carbon_efficiency,
    })
}
