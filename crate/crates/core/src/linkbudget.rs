//! RF chain for a station to ISS link: path loss, atmosphere, noise, SNR,
//! Doppler and Shannon capacity.
//!
//! Powers are in dBm throughout; gains and losses in dB.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orbital::LookAngles;

pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;
pub const BOLTZMANN_J_K: f64 = 1.380_649e-23;
/// Slant-path multiplier saturates here near the horizon.
pub const MAX_AIR_MASS: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkBudgetError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("invalid RF config: {0}")]
    Config(String),
}

fn positive(name: &'static str, value: f64) -> Result<f64, LinkBudgetError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(LinkBudgetError::NonPositive { name, value })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfConfig {
    pub tx_power_dbm: f64,
    pub tx_gain_dbi: f64,
    pub rx_gain_dbi: f64,
    pub cable_loss_db: f64,
    pub misc_loss_db: f64,
    pub noise_temp_k: f64,
    pub bandwidth_hz: f64,
    pub carrier_freq_mhz: f64,
    pub zenith_atm_loss_db: f64,
    pub efficiency: f64,
    pub min_snr_db_viable: f64,
}

impl Default for RfConfig {
    /// A 5 W UHF amateur-band downlink into a small Yagi.
    fn default() -> Self {
        Self {
            tx_power_dbm: 37.0,
            tx_gain_dbi: 2.0,
            rx_gain_dbi: 12.0,
            cable_loss_db: 1.5,
            misc_loss_db: 2.0,
            noise_temp_k: 510.0,
            bandwidth_hz: 25_000.0,
            carrier_freq_mhz: 437.8,
            zenith_atm_loss_db: 0.5,
            efficiency: 0.75,
            min_snr_db_viable: 0.0,
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<(), LinkBudgetError> {
        positive("bandwidth_hz", self.bandwidth_hz)?;
        positive("noise_temp_k", self.noise_temp_k)?;
        positive("carrier_freq_mhz", self.carrier_freq_mhz)?;
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(LinkBudgetError::Config(format!(
                "efficiency must be in (0, 1], got {}",
                self.efficiency
            )));
        }
        if !(self.zenith_atm_loss_db >= 0.0) {
            return Err(LinkBudgetError::Config("zenith_atm_loss_db must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub fspl_db: f64,
    pub atm_loss_db: f64,
    pub noise_floor_dbm: f64,
    pub snr_db: f64,
    pub doppler_hz: f64,
    pub capacity_bps: f64,
    pub effective_rate_bps: f64,
    pub visible: bool,
}

/// Free-space path loss, `20 log10(4 pi d f / c)`.
pub fn fspl(range_km: f64, freq_mhz: f64) -> Result<f64, LinkBudgetError> {
    let d = positive("range_km", range_km)? * 1e3;
    let f = positive("freq_mhz", freq_mhz)? * 1e6;
    Ok(20.0 * (4.0 * std::f64::consts::PI * d * f / SPEED_OF_LIGHT_M_S).log10())
}

/// Zenith loss scaled by the air mass `1 / sin(elevation)`, capped at
/// [`MAX_AIR_MASS`]. Elevations at or below the horizon get the cap.
pub fn atmospheric_loss(elevation_deg: f64, zenith_loss_db: f64) -> f64 {
    if elevation_deg <= 0.0 {
        return zenith_loss_db * MAX_AIR_MASS;
    }
    if elevation_deg >= 90.0 {
        return zenith_loss_db;
    }
    zenith_loss_db * (1.0 / elevation_deg.to_radians().sin()).min(MAX_AIR_MASS)
}

/// Thermal noise power `k T B` in dBm.
pub fn noise_floor(temp_k: f64, bandwidth_hz: f64) -> Result<f64, LinkBudgetError> {
    let t = positive("temp_k", temp_k)?;
    let b = positive("bandwidth_hz", bandwidth_hz)?;
    Ok(10.0 * (BOLTZMANN_J_K * t * b * 1000.0).log10())
}

pub fn snr(cfg: &RfConfig, fspl_db: f64, atm_db: f64) -> Result<f64, LinkBudgetError> {
    let floor = noise_floor(cfg.noise_temp_k, cfg.bandwidth_hz)?;
    Ok(cfg.tx_power_dbm + cfg.tx_gain_dbi + cfg.rx_gain_dbi
        - fspl_db
        - atm_db
        - cfg.cable_loss_db
        - cfg.misc_loss_db
        - floor)
}

/// Doppler shift in Hz. Receding (positive range rate) gives a positive value.
pub fn doppler(carrier_mhz: f64, radial_velocity_km_s: f64) -> f64 {
    carrier_mhz * 1e6 * radial_velocity_km_s * 1e3 / SPEED_OF_LIGHT_M_S
}

/// Shannon-Hartley capacity in bits per second.
pub fn capacity(bandwidth_hz: f64, snr_db: f64) -> f64 {
    if snr_db == f64::NEG_INFINITY {
        return 0.0;
    }
    bandwidth_hz * (10f64.powf(snr_db / 10.0)).ln_1p() / std::f64::consts::LN_2
}

pub fn evaluate_link(
    cfg: &RfConfig,
    angles: &LookAngles,
    visible: bool,
) -> Result<LinkState, LinkBudgetError> {
    cfg.validate()?;
    let fspl_db = fspl(angles.range, cfg.carrier_freq_mhz)?;
    let atm_loss_db = atmospheric_loss(angles.elevation, cfg.zenith_atm_loss_db);
    let noise_floor_dbm = noise_floor(cfg.noise_temp_k, cfg.bandwidth_hz)?;
    let snr_db = snr(cfg, fspl_db, atm_loss_db)?;
    let capacity_bps = capacity(cfg.bandwidth_hz, snr_db);
    let usable = visible && snr_db > cfg.min_snr_db_viable;
    Ok(LinkState {
        fspl_db,
        atm_loss_db,
        noise_floor_dbm,
        snr_db,
        doppler_hz: doppler(cfg.carrier_freq_mhz, angles.range_rate),
        capacity_bps,
        effective_rate_bps: if usable { cfg.efficiency * capacity_bps } else { 0.0 },
        visible,
    })
}
