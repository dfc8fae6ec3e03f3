//! Experiment configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget_mpc::MpcParams;
use crate::corridor_sim::CorridorConfig;
use crate::demand::{det_profile, PeakDistribution};
use crate::error::{Error, Result};
use crate::fundamental_diagram::FundamentalDiagram;
use crate::ou_capacity::OuParams;
use crate::reliability::{MinTtDistribution, MinTtModel, MinTtVariant};
use crate::smpc_gain::{GainSearchConfig, SmpcScenario};

pub const SCHEMA_VERSION: u32 = 1;

/// Corridor geometry as written in a config file. `dt_h` defaults to the
/// CFL-tight step `dx / v_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorSpec {
    pub length_km: f64,
    pub n_cells: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_h: Option<f64>,
    pub q_bn_vph: f64,
    pub drop_fraction: f64,
    pub fd: FundamentalDiagram,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        Self {
            length_km: 9.3,
            n_cells: 31,
            dt_h: None,
            q_bn_vph: 6240.0,
            drop_fraction: 0.1,
            fd: FundamentalDiagram::default(),
        }
    }
}

impl CorridorSpec {
    pub fn build(&self) -> Result<CorridorConfig> {
        match self.dt_h {
            Some(dt) => {
                CorridorConfig::new(self.length_km, self.n_cells, dt, self.q_bn_vph, self.drop_fraction, self.fd)
            }
            None => CorridorConfig::cfl_tight(self.length_km, self.n_cells, self.q_bn_vph, self.drop_fraction, self.fd),
        }
    }
}

/// Day-to-day demand experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSettings {
    /// Pipeline used for `T_min,avg`.
    pub variant: MinTtVariant,
    pub peak: PeakDistribution,
    /// Weights reported in the table besides the critical-weight row.
    pub alphas: Vec<f64>,
    /// Weight used for the closed-loop Monte Carlo.
    pub mc_alpha: f64,
    pub mc_days: usize,
}

impl Default for DemandSettings {
    fn default() -> Self {
        Self {
            variant: MinTtVariant::Corrected,
            peak: PeakDistribution::default(),
            alphas: vec![0.5, 0.4, 0.3, 0.2],
            mc_alpha: 0.5,
            mc_days: 2000,
        }
    }
}

/// Capacity-fluctuation experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySettings {
    pub ou: OuParams,
    /// Capacity at the start of the horizon [veh/h].
    pub c0_vph: f64,
    pub gain: GainSearchConfig,
    /// Weights for which a sweep and a sampled trace are written.
    pub trace_alphas: Vec<f64>,
    /// Corridor for the stochastic validation runs.
    pub corridor: CorridorSpec,
    pub validation_paths: usize,
}

impl Default for CapacitySettings {
    fn default() -> Self {
        Self {
            ou: OuParams::default(),
            c0_vph: 6240.0,
            gain: GainSearchConfig::default(),
            trace_alphas: vec![0.75, 0.5],
            corridor: CorridorSpec { drop_fraction: 0.0, ..CorridorSpec::default() },
            validation_paths: 500,
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corridor: CorridorSpec,
    pub demand: DemandSettings,
    pub mpc: MpcParams,
    pub capacity: CapacitySettings,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 20_240_601,
            out_dir: PathBuf::from("out"),
            corridor: CorridorSpec::default(),
            demand: DemandSettings::default(),
            mpc: MpcParams::default(),
            capacity: CapacitySettings::default(),
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.corridor.build()?;
        self.demand.peak.validate()?;
        for &a in self.demand.alphas.iter().chain([&self.demand.mc_alpha]) {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
            }
        }
        if self.demand.mc_days == 0 {
            return Err(Error::Config("mc_days must be positive".into()));
        }
        self.min_tt_distribution()?;
        self.mpc.validate()?;
        let cap = &self.capacity;
        cap.ou.validate()?;
        cap.gain.validate()?;
        if !(cap.c0_vph > 0.0 && cap.c0_vph <= cap.ou.c_max_vph) {
            return Err(Error::Config(format!("c0_vph {} outside (0, c_max]", cap.c0_vph)));
        }
        for &a in &cap.trace_alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("trace alpha {a} outside [0, 1]")));
            }
        }
        cap.corridor.build()?;
        if cap.validation_paths < 2 {
            return Err(Error::Config("validation_paths must be at least 2".into()));
        }
        Ok(())
    }

    pub fn min_tt_distribution(&self) -> Result<MinTtDistribution> {
        MinTtDistribution::new(MinTtModel::new(self.corridor.q_bn_vph, self.demand.variant), self.demand.peak)
    }

    pub fn smpc(&self) -> SmpcScenario {
        SmpcScenario { demand: det_profile(), ou: self.capacity.ou, c0_vph: self.capacity.c0_vph }
    }
}
