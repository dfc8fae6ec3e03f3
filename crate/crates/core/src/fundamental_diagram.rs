//! Triangular flow–density relationship.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Triangular fundamental diagram parameterised by free-flow speed,
/// critical density and jam density. Capacity and the congested wave speed
/// are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundamentalDiagram {
    /// Free-flow speed [km/h].
    pub v_f_kmh: f64,
    /// Critical density [veh/km].
    pub k_c_per_km: f64,
    /// Jam density [veh/km].
    pub k_j_per_km: f64,
}

impl Default for FundamentalDiagram {
    fn default() -> Self {
        Self { v_f_kmh: 112.0, k_c_per_km: 70.0, k_j_per_km: 420.0 }
    }
}

impl FundamentalDiagram {
    pub fn new(v_f: f64, k_c: f64, k_j: f64) -> Result<Self> {
        let fd = Self { v_f_kmh: v_f, k_c_per_km: k_c, k_j_per_km: k_j };
        fd.validate()?;
        Ok(fd)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_f_kmh > 0.0 && self.v_f_kmh.is_finite()) {
            return Err(domain("v_f", self.v_f_kmh));
        }
        if !(self.k_c_per_km > 0.0 && self.k_c_per_km < self.k_j_per_km && self.k_j_per_km.is_finite()) {
            return Err(Error::Config(format!(
                "densities must satisfy 0 < k_c < k_j (got k_c = {}, k_j = {})",
                self.k_c_per_km, self.k_j_per_km
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn v_f(&self) -> f64 {
        self.v_f_kmh
    }

    #[inline]
    pub fn k_c(&self) -> f64 {
        self.k_c_per_km
    }

    #[inline]
    pub fn k_j(&self) -> f64 {
        self.k_j_per_km
    }

    /// Capacity `v_f * k_c` [veh/h].
    #[inline]
    pub fn q_max(&self) -> f64 {
        self.v_f_kmh * self.k_c_per_km
    }

    /// Magnitude of the congested wave speed [km/h].
    #[inline]
    pub fn w(&self) -> f64 {
        self.q_max() / (self.k_j_per_km - self.k_c_per_km)
    }

    fn check_density(&self, k: f64) -> Result<()> {
        if (0.0..=self.k_j_per_km).contains(&k) {
            Ok(())
        } else {
            Err(domain("density", k))
        }
    }

    /// Flow without the range check; callers guarantee `0 <= k <= k_j`.
    #[inline]
    pub(crate) fn flow_unchecked(&self, k: f64) -> f64 {
        if k <= self.k_c_per_km {
            self.v_f_kmh * k
        } else {
            self.w() * (self.k_j_per_km - k)
        }
    }

    #[inline]
    pub(crate) fn demand_unchecked(&self, k: f64) -> f64 {
        self.v_f_kmh * k.min(self.k_c_per_km)
    }

    #[inline]
    pub(crate) fn supply_unchecked(&self, k: f64) -> f64 {
        if k <= self.k_c_per_km {
            self.q_max()
        } else {
            self.w() * (self.k_j_per_km - k)
        }
    }

    pub fn flow(&self, k: f64) -> Result<f64> {
        self.check_density(k)?;
        Ok(self.flow_unchecked(k))
    }

    /// Sending function `Q(min(k, k_c))`.
    pub fn demand(&self, k: f64) -> Result<f64> {
        self.check_density(k)?;
        Ok(self.demand_unchecked(k))
    }

    /// Receiving function `Q(max(k, k_c))`.
    pub fn supply(&self, k: f64) -> Result<f64> {
        self.check_density(k)?;
        Ok(self.supply_unchecked(k))
    }

    /// Space-mean speed, extended continuously by `v_f` at `k = 0`.
    pub fn speed(&self, k: f64) -> Result<f64> {
        self.check_density(k)?;
        if k == 0.0 {
            Ok(self.v_f_kmh)
        } else {
            Ok(self.flow_unchecked(k) / k)
        }
    }

    /// Largest density carrying flow `q`, i.e. the congested-branch inverse.
    pub fn congested_density_for_flow(&self, q: f64) -> Result<f64> {
        if q < 0.0 || q.is_nan() {
            return Err(domain("flow", q));
        }
        if q > self.q_max() {
            return Err(Error::InfeasibleFlow { flow: q, q_max: self.q_max() });
        }
        Ok(self.k_j_per_km - q / self.w())
    }

    /// Flow on the congested branch at which vehicles travel at speed `v`.
    ///
    /// Solves `v * k = w * (k_j - k)`; equals `q_max` at `v = v_f`.
    pub fn congested_flow_at_speed(&self, v: f64) -> Result<f64> {
        if !(0.0..=self.v_f_kmh).contains(&v) {
            return Err(domain("speed", v));
        }
        let w = self.w();
        Ok(v * w * self.k_j_per_km / (v + w))
    }

    /// Speed at the congested state carrying flow `q`: `q / k⁺(q)`.
    pub fn congested_speed_for_flow(&self, q: f64) -> Result<f64> {
        let k = self.congested_density_for_flow(q)?;
        Ok(q / k)
    }

    /// Legendre–Fenchel transform `sup_k { Q(k) - k p }`.
    pub fn legendre(&self, p: f64) -> Result<f64> {
        if !(-self.w()..=self.v_f_kmh).contains(&p) {
            return Err(domain("wave speed", p));
        }
        Ok(self.k_c_per_km * (self.v_f_kmh - p))
    }
}
