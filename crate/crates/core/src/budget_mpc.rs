//! Per-minute delay-budget controller: admit the largest inflow that keeps
//! cumulative excess delay below a power-law budget trajectory, and turn
//! metering rates into posted speeds.

use serde::{Deserialize, Serialize};

use crate::corridor_sim::{
    average_travel_time, simulate, CorridorConfig, QueueObserver, SimOptions, Trajectory,
};
use crate::demand::PiecewiseLinearProfile;
use crate::error::{domain, Error, Result};
use crate::fundamental_diagram::FundamentalDiagram;
use crate::reliability::FREE_FLOW_MIN;
use crate::smpc_gain::fifo_filter;

/// Controller state at the start of step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpcState {
    /// Queue behind the bottleneck [veh].
    pub queue_veh: f64,
    /// Cumulative excess delay [veh·h].
    pub delay_veh_h: f64,
    /// Cumulative admitted vehicles [veh].
    pub admitted_veh: f64,
    pub step: usize,
}

/// Cumulative delay cap `D_tot (k/N)^γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSchedule {
    /// Total excess delay allowed [veh·h].
    pub d_tot: f64,
    pub gamma: f64,
    pub n_steps: usize,
    pub target_min: f64,
    pub t0_min: f64,
}

impl BudgetSchedule {
    /// Budget for `total_veh` vehicles travelling `target_min` on average
    /// against the free-flow time `t0_min`.
    pub fn new(target_min: f64, t0_min: f64, total_veh: f64, n_steps: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("budget exponent must be positive (got {gamma})")));
        }
        if n_steps == 0 {
            return Err(Error::Config("budget horizon must have at least one step".into()));
        }
        if !(target_min >= t0_min) {
            return Err(Error::InfeasibleTarget { target_min, free_flow_min: t0_min });
        }
        if !(total_veh >= 0.0) {
            return Err(domain("total demand", total_veh));
        }
        let d_tot = (target_min - t0_min) / 60.0 * total_veh;
        Ok(Self { d_tot, gamma, n_steps, target_min, t0_min })
    }

    pub fn budget(&self, k: usize) -> Result<f64> {
        if k > self.n_steps {
            return Err(domain("budget step", k as f64));
        }
        Ok(self.d_tot * (k as f64 / self.n_steps as f64).powf(self.gamma))
    }
}

/// Metering-rate to posted-speed conversion.
///
/// The congested density is read off the line through `(c_m, k_c)` and
/// `(0, k_j)`, i.e. `(k_j − k_c)/c_m (c_m − d) + k_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterToSpeed {
    /// Flow at which the congested density equals `k_c` [veh/h].
    pub meter_capacity_vph: f64,
    pub v_min_kmh: f64,
    pub fd: FundamentalDiagram,
}

impl Default for MeterToSpeed {
    fn default() -> Self {
        Self { meter_capacity_vph: 7840.0, v_min_kmh: 40.0, fd: FundamentalDiagram::default() }
    }
}

impl MeterToSpeed {
    /// Congested density induced by demand `d` [veh/km].
    pub fn density(&self, d_vph: f64) -> f64 {
        let c = self.meter_capacity_vph;
        let d = d_vph.clamp(0.0, c);
        (self.fd.k_j() - self.fd.k_c()) / c * (c - d) + self.fd.k_c()
    }

    /// Speed before clamping; `v_f` when the meter does not bind.
    pub fn raw_speed(&self, u_vph: f64, d_vph: f64) -> f64 {
        if d_vph <= u_vph {
            self.fd.v_f()
        } else {
            u_vph / self.density(d_vph)
        }
    }

    /// Posted speed clamped to `[v_min, v_f]`.
    pub fn speed(&self, u_vph: f64, d_vph: f64) -> f64 {
        self.raw_speed(u_vph, d_vph).clamp(self.v_min_kmh, self.fd.v_f())
    }

    /// Metering flow at which the clamped speed reaches `v_min` [veh/h].
    pub fn floor_flow(&self, d_vph: f64) -> f64 {
        self.v_min_kmh * self.density(d_vph)
    }
}

/// Posted speed for metering rate `u` under demand `d` (both veh/h).
pub fn metering_to_speed(u_vph: f64, d_vph: f64, m: &MeterToSpeed) -> f64 {
    m.speed(u_vph, d_vph)
}

/// Link traversal delay assumed by the one-step predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDelay {
    /// Admitted vehicles cruise at free-flow speed; the speed limit acts only
    /// as an entrance cap.
    #[default]
    FreeFlow,
    /// Travel time `ℓ / v(u, d)` from the metering-to-speed map. Not monotone
    /// in `u` where the meter binds.
    SpeedMap,
}

/// Controller settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcParams {
    pub step_min: f64,
    /// Soft lower bound on the admitted rate [veh/h].
    pub u_min_vph: f64,
    /// Capacity used in the prediction (undropped) [veh/h].
    pub capacity_vph: f64,
    pub gamma: f64,
    pub link_delay: LinkDelay,
    pub meter: MeterToSpeed,
    /// Slack on the budget test [veh·h].
    pub feasibility_tol_veh_h: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        Self {
            step_min: 1.0,
            u_min_vph: 5800.0,
            capacity_vph: 6240.0,
            gamma: 1.0,
            link_delay: LinkDelay::FreeFlow,
            meter: MeterToSpeed::default(),
            feasibility_tol_veh_h: 1e-3,
        }
    }
}

impl MpcParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_min > 0.0) {
            return Err(domain("control step", self.step_min));
        }
        if !(self.u_min_vph >= 0.0 && self.u_min_vph <= self.capacity_vph) {
            return Err(domain("minimum metering rate", self.u_min_vph));
        }
        if !(self.capacity_vph > 0.0) {
            return Err(domain("controller capacity", self.capacity_vph));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("budget exponent must be positive (got {})", self.gamma)));
        }
        if !(self.meter.v_min_kmh > 0.0 && self.meter.v_min_kmh <= self.meter.fd.v_f()) {
            return Err(domain("minimum speed", self.meter.v_min_kmh));
        }
        if !(self.meter.meter_capacity_vph > 0.0) {
            return Err(domain("meter capacity", self.meter.meter_capacity_vph));
        }
        self.meter.fd.validate()
    }

    pub fn step_h(&self) -> f64 {
        self.step_min / 60.0
    }
}

/// Which branch of the admission rule was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    /// Demand below the soft floor; everything is admitted.
    Demand,
    Max,
    Min,
}

/// One-step delay-budget controller for a fixed schedule.
#[derive(Debug, Clone, Copy)]
pub struct BudgetMpc {
    pub params: MpcParams,
    pub schedule: BudgetSchedule,
    pub length_km: f64,
}

impl BudgetMpc {
    pub fn new(params: MpcParams, schedule: BudgetSchedule, length_km: f64) -> Result<Self> {
        params.validate()?;
        if !(length_km > 0.0) {
            return Err(domain("link length", length_km));
        }
        Ok(Self { params, schedule, length_km })
    }

    fn t0_min(&self) -> f64 {
        self.length_km / self.params.meter.fd.v_f() * 60.0
    }

    /// Link travel time [min] of vehicles admitted at `u` veh per step
    /// under `d_k` veh per step.
    pub fn link_time_min(&self, u: f64, d_k: f64) -> f64 {
        match self.params.link_delay {
            LinkDelay::FreeFlow => self.t0_min(),
            LinkDelay::SpeedMap => {
                let h = self.params.step_h();
                let v = self.params.meter.speed(u / h, d_k / h);
                self.length_km / v * 60.0
            }
        }
    }

    /// Predicted cumulative delay after admitting `u` vehicles this step
    /// [veh·h].
    pub fn predicted_delay(&self, u: f64, state: &MpcState, d_k: f64) -> f64 {
        let h = self.params.step_h();
        let tau = self.link_time_min(u, d_k);
        let overflow = (state.queue_veh + u - self.params.capacity_vph * h).max(0.0);
        state.delay_veh_h + state.queue_veh * h + u * (tau - self.t0_min()) / 60.0 + overflow * h
    }

    /// Admission bounds `(u_min, u_max)` in vehicles per step.
    pub fn bounds(&self, d_k: f64) -> (f64, f64) {
        let h = self.params.step_h();
        (self.params.u_min_vph * h, d_k.min(self.params.capacity_vph * h))
    }

    /// Binary feasibility rule; returns admitted vehicles and the branch.
    pub fn step_control(&self, state: &MpcState, d_k: f64) -> (f64, Admission) {
        let (u_min, u_max) = self.bounds(d_k);
        if d_k < u_min {
            return (d_k.max(0.0), Admission::Demand);
        }
        let cap = self
            .schedule
            .budget((state.step + 1).min(self.schedule.n_steps))
            .unwrap_or(self.schedule.d_tot);
        if self.predicted_delay(u_max, state, d_k) <= cap + self.params.feasibility_tol_veh_h {
            (u_max, Admission::Max)
        } else {
            (u_min, Admission::Min)
        }
    }
}

/// One row of the per-step control log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlLogRow {
    pub k: usize,
    pub d_k: f64,
    pub u_star: f64,
    #[serde(rename = "D_k")]
    pub delay_veh_h: f64,
    #[serde(rename = "D_k_max")]
    pub budget_veh_h: f64,
    #[serde(rename = "L_k")]
    pub queue_veh: f64,
    pub v_posted: f64,
}

/// Result of a closed-loop run.
#[derive(Debug, Clone)]
pub struct ControlledRun {
    pub trajectory: Trajectory,
    pub log: Vec<ControlLogRow>,
    pub target_min: f64,
    /// Average travel time including the entrance queue [min].
    pub achieved_min: f64,
}

impl ControlledRun {
    pub fn tracking_error(&self) -> f64 {
        (self.achieved_min - self.target_min) / self.target_min
    }
}

/// Posted speed whose entrance cap does not exceed `q_m`, within `[v_min, v_f]`.
pub fn actuator_speed(q_m: f64, meter: &MeterToSpeed) -> f64 {
    let fd = &meter.fd;
    let v_f = fd.v_f();
    if q_m >= fd.q_max() {
        return v_f;
    }
    let mut v = fd.congested_speed_for_flow(q_m.max(0.0)).unwrap_or(v_f).clamp(meter.v_min_kmh, v_f);
    if v > meter.v_min_kmh {
        // Guard the round trip so the cap never rounds above q_m.
        for _ in 0..8 {
            match fd.congested_flow_at_speed(v) {
                Ok(cap) if cap > q_m => v *= 1.0 - 1e-12,
                _ => break,
            }
        }
    }
    v
}

/// Runs the delay-budget controller against the corridor simulator.
///
/// Every control step the controller measures the bottleneck queue as
/// `N0(t − T0) − N_l(t)`, the cumulative excess delay as the time integral
/// of entrance plus bottleneck queues, and the demand for the step
/// including the entrance backlog.
pub fn run_controlled(
    profile: &PiecewiseLinearProfile,
    target_min: f64,
    cfg: &CorridorConfig,
    params: &MpcParams,
) -> Result<ControlledRun> {
    if target_min < FREE_FLOW_MIN - 1e-9 || !target_min.is_finite() {
        return Err(Error::InfeasibleTarget { target_min, free_flow_min: FREE_FLOW_MIN });
    }
    params.validate()?;
    cfg.validate()?;
    let step_h = params.step_h();
    let horizon = profile.end();
    let n_steps = (horizon / step_h).ceil() as usize;
    let t0_sim_min = cfg.free_flow_time_h() * 60.0;
    let total = profile.cumulative(horizon);
    let schedule = BudgetSchedule::new(target_min.max(t0_sim_min), t0_sim_min, total, n_steps, params.gamma)?;
    let mpc = BudgetMpc::new(*params, schedule, cfg.length_km)?;

    let dt = cfg.dt_h;
    let v_f = cfg.fd.v_f();
    let mut observer = QueueObserver::new(cfg);
    let mut delay = 0.0;
    let mut current_k: Option<usize> = None;
    let mut v_posted = v_f;
    let mut log = Vec::with_capacity(n_steps);

    let opts = SimOptions { horizon_h: Some(horizon), ..Default::default() };
    let trajectory = simulate(cfg, profile, &opts, |ctx| {
        let st = ctx.state;
        let bottleneck_queue = observer.observe(ctx);
        if ctx.step > 0 {
            delay += (st.queue + bottleneck_queue) * dt;
        }
        let k = (ctx.t_h / step_h + 1e-9).floor() as usize;
        if current_k != Some(k) {
            current_k = Some(k);
            if k < n_steps {
                let t = ctx.t_h;
                let exo = profile.cumulative((t + step_h).min(horizon)) - profile.cumulative(t.min(horizon));
                let d_k = exo + st.queue;
                let state = MpcState { queue_veh: bottleneck_queue, delay_veh_h: delay, admitted_veh: st.n0, step: k };
                let (u, _) = mpc.step_control(&state, d_k);
                let q_m = u / step_h;
                // The entrance flow must stay below C within the step too:
                // a backlog would flush at q_max under v_f, and a rising
                // demand can exceed C late in a step whose mean is below it.
                // the last simulator step of a control step overhangs it by up to dt
                let end = t + step_h + dt;
                let peak_rate = profile
                    .breakpoints()
                    .filter(|&b| b > t && b < end)
                    .chain([t, end])
                    .map(|x| profile.rate(x))
                    .fold(0.0, f64::max);
                let cand = if u < d_k {
                    actuator_speed(q_m, &params.meter)
                } else if st.queue > 0.0 || peak_rate > params.capacity_vph {
                    actuator_speed(params.capacity_vph, &params.meter)
                } else {
                    v_f
                };
                v_posted = fifo_filter(v_posted, cand, step_h, cfg.length_km);
                log.push(ControlLogRow {
                    k,
                    d_k,
                    u_star: u,
                    delay_veh_h: delay,
                    budget_veh_h: mpc.schedule.budget(k).unwrap_or(mpc.schedule.d_tot),
                    queue_veh: bottleneck_queue,
                    v_posted,
                });
            } else {
                v_posted = fifo_filter(v_posted, v_f, step_h, cfg.length_km);
            }
        }
        v_posted
    })?;
    let achieved_min = average_travel_time(&trajectory)? * 60.0;
    Ok(ControlledRun { trajectory, log, target_min, achieved_min })
}

/// Runs the corridor without any control.
pub fn run_uncontrolled(profile: &PiecewiseLinearProfile, cfg: &CorridorConfig) -> Result<Trajectory> {
    let v_f = cfg.fd.v_f();
    simulate(cfg, profile, &SimOptions { horizon_h: Some(profile.end()), ..Default::default() }, |_| v_f)
}
