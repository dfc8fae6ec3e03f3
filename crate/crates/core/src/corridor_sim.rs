//! Cell-transmission (Godunov) simulation of a single corridor with an
//! upstream point queue, an entrance speed-limit actuator and a
//! capacity-drop bottleneck at the downstream end.

use std::io::Write;

use crate::demand::PiecewiseLinearProfile;
use crate::error::{domain, Error, Result};
use crate::fundamental_diagram::FundamentalDiagram;

/// Geometry, discretisation and bottleneck of the simulated corridor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorridorConfig {
    pub length_km: f64,
    pub n_cells: usize,
    /// Time step [h].
    pub dt_h: f64,
    /// Undropped bottleneck capacity [veh/h].
    pub q_bn_vph: f64,
    /// Fractional capacity drop once the bottleneck is congested.
    pub drop_fraction: f64,
    pub fd: FundamentalDiagram,
}

impl CorridorConfig {
    pub fn new(
        length_km: f64,
        n_cells: usize,
        dt_h: f64,
        q_bn_vph: f64,
        drop_fraction: f64,
        fd: FundamentalDiagram,
    ) -> Result<Self> {
        let cfg = Self { length_km, n_cells, dt_h, q_bn_vph, drop_fraction, fd };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration with the largest stable step, `dt = dx / v_f`.
    pub fn cfl_tight(
        length_km: f64,
        n_cells: usize,
        q_bn_vph: f64,
        drop_fraction: f64,
        fd: FundamentalDiagram,
    ) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::Config("n_cells must be positive".into()));
        }
        let dt = length_km / n_cells as f64 / fd.v_f();
        Self::new(length_km, n_cells, dt, q_bn_vph, drop_fraction, fd)
    }

    pub fn validate(&self) -> Result<()> {
        self.fd.validate()?;
        if !(self.length_km > 0.0) {
            return Err(domain("corridor length", self.length_km));
        }
        if self.n_cells == 0 {
            return Err(Error::Config("n_cells must be positive".into()));
        }
        if !(self.dt_h > 0.0) {
            return Err(domain("time step", self.dt_h));
        }
        if self.fd.v_f() * self.dt_h > self.dx() * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "CFL violated: v_f * dt = {} km exceeds the cell length {} km",
                self.fd.v_f() * self.dt_h,
                self.dx()
            )));
        }
        if !(self.q_bn_vph > 0.0 && self.q_bn_vph <= self.fd.q_max()) {
            return Err(domain("bottleneck capacity", self.q_bn_vph));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(domain("capacity drop fraction", self.drop_fraction));
        }
        Ok(())
    }

    /// Cell length [km].
    pub fn dx(&self) -> f64 {
        self.length_km / self.n_cells as f64
    }

    /// Free-flow traversal time [h].
    pub fn free_flow_time_h(&self) -> f64 {
        self.length_km / self.fd.v_f()
    }

    /// Dropped capacity `(1 - Δ) q_bn`.
    pub fn dropped_capacity(&self) -> f64 {
        (1.0 - self.drop_fraction) * self.q_bn_vph
    }
}

/// Corridor state at a step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState {
    /// Cell densities [veh/km], upstream first.
    pub k: Vec<f64>,
    /// Upstream point queue [veh].
    pub queue: f64,
    /// Vehicles that entered the link.
    pub n0: f64,
    /// Vehicles that left through the bottleneck.
    pub nl: f64,
    /// Vehicles offered by the demand, including those still queued.
    pub offered: f64,
    /// Whether the bottleneck discharges at the dropped rate.
    pub dropped: bool,
}

impl TrafficState {
    pub fn empty(cfg: &CorridorConfig) -> Self {
        Self::uniform(cfg, 0.0)
    }

    /// All cells at density `k`.
    pub fn uniform(cfg: &CorridorConfig, k: f64) -> Self {
        Self { k: vec![k; cfg.n_cells], queue: 0.0, n0: 0.0, nl: 0.0, offered: 0.0, dropped: false }
    }

    /// Cells seeded at the free-branch density carrying `flow`.
    pub fn seeded(cfg: &CorridorConfig, flow: f64) -> Result<Self> {
        if !(0.0..=cfg.fd.q_max()).contains(&flow) {
            return Err(Error::InfeasibleFlow { flow, q_max: cfg.fd.q_max() });
        }
        Ok(Self::uniform(cfg, flow / cfg.fd.v_f()))
    }

    /// Vehicles currently on the link.
    pub fn on_link(&self, cfg: &CorridorConfig) -> f64 {
        self.k.iter().sum::<f64>() * cfg.dx()
    }

    pub fn mean_density(&self) -> f64 {
        self.k.iter().sum::<f64>() / self.k.len() as f64
    }
}

/// Boundary flows realised during one step [veh/h].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFlows {
    pub inflow: f64,
    pub outflow: f64,
}

/// Discharge rule at the bottleneck with hysteresis.
///
/// Returns the outflow and the new congestion flag. The flag is raised when
/// the sending flow exceeds `capacity` and stays raised while the sending
/// flow exceeds the dropped capacity.
pub fn bottleneck_outflow(k_last: f64, dropped: bool, cfg: &CorridorConfig) -> (f64, bool) {
    bottleneck_outflow_at(k_last, dropped, cfg.q_bn_vph, cfg)
}

/// [`bottleneck_outflow`] with a time-varying capacity.
pub fn bottleneck_outflow_at(
    k_last: f64,
    dropped: bool,
    capacity: f64,
    cfg: &CorridorConfig,
) -> (f64, bool) {
    let sending = cfg.fd.demand_unchecked(k_last.clamp(0.0, cfg.fd.k_j()));
    let reduced = (1.0 - cfg.drop_fraction) * capacity;
    let threshold = if dropped { reduced } else { capacity };
    if sending <= threshold {
        (sending, false)
    } else {
        (reduced, true)
    }
}

/// Advances `state` by one step in place.
pub fn step_in_place(
    state: &mut TrafficState,
    demand_in: f64,
    v_limit: f64,
    capacity: f64,
    cfg: &CorridorConfig,
) -> Result<StepFlows> {
    if !(demand_in >= 0.0) || !demand_in.is_finite() {
        return Err(domain("demand", demand_in));
    }
    if !(v_limit > 0.0 && v_limit <= cfg.fd.v_f()) {
        return Err(domain("speed limit", v_limit));
    }
    let fd = &cfg.fd;
    let n = cfg.n_cells;
    let dt = cfg.dt_h;
    let ratio = dt / cfg.dx();

    let vsl_cap = fd.congested_flow_at_speed(v_limit)?;
    let available = state.queue / dt + demand_in;
    let inflow = available.min(fd.supply_unchecked(state.k[0])).min(vsl_cap);
    let (outflow, dropped) = bottleneck_outflow_at(state.k[n - 1], state.dropped, capacity, cfg);

    // fluxes[i] is the flow entering cell i; fluxes[n] leaves the link.
    let mut prev_flux = inflow;
    for i in 0..n {
        let out = if i + 1 < n {
            fd.demand_unchecked(state.k[i]).min(fd.supply_unchecked(state.k[i + 1]))
        } else {
            outflow
        };
        let k_new = state.k[i] + ratio * (prev_flux - out);
        state.k[i] = k_new.clamp(0.0, fd.k_j());
        prev_flux = out;
    }

    state.queue = (state.queue + (demand_in - inflow) * dt).max(0.0);
    state.n0 += inflow * dt;
    state.nl += outflow * dt;
    state.offered += demand_in * dt;
    state.dropped = dropped;
    Ok(StepFlows { inflow, outflow })
}

/// One simulation step; returns the successor state and boundary flows.
pub fn step(
    state: &TrafficState,
    demand_in: f64,
    v_limit: f64,
    cfg: &CorridorConfig,
) -> Result<(TrafficState, StepFlows)> {
    let mut next = state.clone();
    let flows = step_in_place(&mut next, demand_in, v_limit, cfg.q_bn_vph, cfg)?;
    Ok((next, flows))
}

/// Information handed to a speed-limit controller before each step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub step: usize,
    pub t_h: f64,
    /// Mean demand over the coming step [veh/h].
    pub demand_vph: f64,
    pub state: &'a TrafficState,
    pub cfg: &'a CorridorConfig,
}

/// Estimates the vehicles held behind the bottleneck as `N0(t − T0)` minus
/// the exits of demand vehicles. Call [`QueueObserver::observe`] exactly once
/// per simulation step.
#[derive(Debug, Clone, Default)]
pub struct QueueObserver {
    lag_steps: f64,
    n0: Vec<f64>,
    initial: Option<f64>,
}

impl QueueObserver {
    pub fn new(cfg: &CorridorConfig) -> Self {
        Self { lag_steps: cfg.free_flow_time_h() / cfg.dt_h, n0: Vec::new(), initial: None }
    }

    pub fn observe(&mut self, ctx: &StepContext) -> f64 {
        let st = ctx.state;
        self.n0.push(st.n0);
        // offered = queue + on link + N_l − initial
        let initial = *self
            .initial
            .get_or_insert(st.queue + st.on_link(ctx.cfg) + st.nl - st.offered);
        let exited = (st.nl - initial).max(0.0);
        let x = (self.n0.len() - 1) as f64 - self.lag_steps;
        let lagged = if x <= 0.0 {
            0.0
        } else {
            let i = x.floor() as usize;
            let f = x - i as f64;
            let a = self.n0[i];
            let b = self.n0.get(i + 1).copied().unwrap_or(a);
            a + f * (b - a)
        };
        (lagged - exited).max(0.0)
    }
}

/// Run options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Time after which demand is zero [h]; defaults to the profile's end.
    pub horizon_h: Option<f64>,
    /// Longest time simulated after the horizon while the network drains [h].
    pub max_drain_h: f64,
    /// Keep per-step density snapshots.
    pub keep_densities: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { horizon_h: None, max_drain_h: 10.0, keep_densities: false }
    }
}

/// Time series produced by one run. Sample `j` refers to time `j * dt`;
/// flow and speed series hold one value per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt_h: f64,
    pub horizon_h: f64,
    /// Vehicles on the link at `t = 0`; they are not part of the demand.
    pub initial_on_link: f64,
    pub time_h: Vec<f64>,
    pub queue: Vec<f64>,
    pub n0: Vec<f64>,
    pub nl: Vec<f64>,
    pub offered: Vec<f64>,
    pub mean_density: Vec<f64>,
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
    pub vsl: Vec<f64>,
    pub dropped: Vec<bool>,
    /// Per-sample densities when requested in [`SimOptions`].
    pub densities: Vec<Vec<f64>>,
    /// Largest conservation residual observed [veh].
    pub conservation_error: f64,
    /// Largest excursion of any density outside `[0, k_j]` before clamping.
    pub density_violation: f64,
    /// Whether the network emptied before the run ended.
    pub drained: bool,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.inflow.len()
    }

    /// Exit count of vehicles that entered after `t = 0`.
    pub fn exit_of_demand(&self, j: usize) -> f64 {
        (self.nl[j] - self.initial_on_link).max(0.0)
    }

    fn offered_at(&self, t: f64) -> f64 {
        interpolate(&self.offered, self.dt_h, t)
    }

    /// Cumulative excess delay `∫ (offered - exited) ds - T0 * admitted`
    /// up to sample `j` [veh·h], with `T0` the free-flow time.
    pub fn total_time_until(&self, j: usize) -> f64 {
        (0..j)
            .map(|i| {
                let a = self.offered[i] - self.exit_of_demand(i);
                let b = self.offered[i + 1] - self.exit_of_demand(i + 1);
                0.5 * (a + b) * self.dt_h
            })
            .sum()
    }
}

fn interpolate(series: &[f64], dt: f64, t: f64) -> f64 {
    let x = t / dt;
    let j = x.floor() as usize;
    if j + 1 >= series.len() {
        return series[series.len() - 1];
    }
    let f = x - j as f64;
    series[j] + f * (series[j + 1] - series[j])
}

/// Runs the corridor with capacity `q_bn` and a speed-limit controller.
pub fn simulate<F>(
    cfg: &CorridorConfig,
    profile: &PiecewiseLinearProfile,
    opts: &SimOptions,
    vsl: F,
) -> Result<Trajectory>
where
    F: FnMut(&StepContext) -> f64,
{
    let q_bn = cfg.q_bn_vph;
    simulate_with_capacity(cfg, profile, opts, vsl, |_, _| q_bn)
}

/// Runs the corridor with an externally supplied bottleneck capacity
/// `capacity(step, t_h)`.
pub fn simulate_with_capacity<F, C>(
    cfg: &CorridorConfig,
    profile: &PiecewiseLinearProfile,
    opts: &SimOptions,
    mut vsl: F,
    mut capacity: C,
) -> Result<Trajectory>
where
    F: FnMut(&StepContext) -> f64,
    C: FnMut(usize, f64) -> f64,
{
    cfg.validate()?;
    let dt = cfg.dt_h;
    let horizon = opts.horizon_h.unwrap_or(profile.end());
    let horizon_steps = (horizon / dt).ceil() as usize;
    let max_steps = horizon_steps + (opts.max_drain_h / dt).ceil() as usize;

    let q0 = profile.rate(profile.start()).min(cfg.fd.q_max());
    let mut state = TrafficState::seeded(cfg, q0)?;
    let initial = state.on_link(cfg);
    let cum = |t: f64| profile.cumulative(t.min(horizon));

    let mut traj = Trajectory {
        dt_h: dt,
        horizon_h: horizon,
        initial_on_link: initial,
        time_h: vec![0.0],
        queue: vec![0.0],
        n0: vec![0.0],
        nl: vec![0.0],
        offered: vec![0.0],
        mean_density: vec![state.mean_density()],
        inflow: Vec::new(),
        outflow: Vec::new(),
        vsl: Vec::new(),
        dropped: vec![false],
        densities: if opts.keep_densities { vec![state.k.clone()] } else { Vec::new() },
        conservation_error: 0.0,
        density_violation: 0.0,
        drained: false,
    };
    let scale = initial + profile.total();
    let tol = 1e-9 * scale.max(1.0);

    for j in 0..max_steps {
        let t = j as f64 * dt;
        let demand = if j < horizon_steps {
            ((cum(t + dt) - cum(t)) / dt).max(0.0)
        } else {
            0.0
        };
        let ctx = StepContext { step: j, t_h: t, demand_vph: demand, state: &state, cfg };
        let v = vsl(&ctx).clamp(f64::MIN_POSITIVE, cfg.fd.v_f());
        let cap = capacity(j, t);

        let before: Vec<f64> = state.k.clone();
        let flows = step_in_place(&mut state, demand, v, cap, cfg)?;
        // Recompute the unclamped update to measure any excursion.
        let ratio = dt / cfg.dx();
        let mut prev = flows.inflow;
        for i in 0..cfg.n_cells {
            let out = if i + 1 < cfg.n_cells {
                cfg.fd.demand_unchecked(before[i]).min(cfg.fd.supply_unchecked(before[i + 1]))
            } else {
                flows.outflow
            };
            let raw = before[i] + ratio * (prev - out);
            let excess = (-raw).max(raw - cfg.fd.k_j()).max(0.0);
            traj.density_violation = traj.density_violation.max(excess);
            prev = out;
        }

        let residual = state.offered - (state.queue + state.on_link(cfg) + state.nl - initial);
        traj.conservation_error = traj.conservation_error.max(residual.abs());

        traj.time_h.push((j + 1) as f64 * dt);
        traj.queue.push(state.queue);
        traj.n0.push(state.n0);
        traj.nl.push(state.nl);
        traj.offered.push(state.offered);
        traj.mean_density.push(state.mean_density());
        traj.inflow.push(flows.inflow);
        traj.outflow.push(flows.outflow);
        traj.vsl.push(v);
        traj.dropped.push(state.dropped);
        if opts.keep_densities {
            traj.densities.push(state.k.clone());
        }

        if j + 1 >= horizon_steps
            && state.queue <= tol
            && state.nl - initial >= state.offered - tol
        {
            traj.drained = true;
            break;
        }
    }
    Ok(traj)
}

/// Travel time [h] of the vehicle offered at time `t`, from the horizontal
/// distance between the offered-count and exit-count curves.
pub fn travel_time(traj: &Trajectory, t: f64) -> Result<f64> {
    let end = *traj.time_h.last().unwrap_or(&0.0);
    if !(0.0..=end).contains(&t) {
        return Err(domain("departure time", t));
    }
    let target = traj.offered_at(t);
    let n = traj.nl.len();
    // Counts carry rounding noise; the last vehicle must not "exit" from it.
    let threshold = target + 1e-9 * (traj.offered[n - 1] + traj.initial_on_link).max(1.0);
    // First sample whose exit count strictly exceeds the target.
    let mut lo = 0usize;
    let mut hi = n;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if traj.exit_of_demand(mid) > threshold {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    if lo == n {
        return Err(Error::HorizonTruncated { entry_h: t, end_h: end });
    }
    if lo == 0 {
        return Ok(0.0);
    }
    let (a, b) = (traj.exit_of_demand(lo - 1), traj.exit_of_demand(lo));
    let s = traj.time_h[lo - 1] + (target - a) / (b - a) * traj.dt_h;
    Ok((s - t).max(0.0))
}

/// Mean time spent in the system (point queue plus link) per admitted
/// vehicle [h].
pub fn average_travel_time(traj: &Trajectory) -> Result<f64> {
    let last = traj.offered.len() - 1;
    let admitted = traj.offered[last];
    if !(admitted > 0.0) {
        return Err(Error::NoAdmittedFlow);
    }
    if !traj.drained {
        return Err(Error::HorizonTruncated { entry_h: traj.horizon_h, end_h: traj.time_h[last] });
    }
    Ok(traj.total_time_until(last) / admitted)
}

/// Uncongested exit count `N⁺(ℓ, t)` from the variational formula: the
/// minimum over departure times `t₀ ≤ t - ℓ/v_f` of
/// `A(t₀) + f*(ℓ/(t - t₀)) (t - t₀)`.
pub fn uncongested_count(
    profile: &PiecewiseLinearProfile,
    t: f64,
    length_km: f64,
    fd: &FundamentalDiagram,
) -> f64 {
    let t_last = t - length_km / fd.v_f();
    if t_last < profile.start() {
        return 0.0;
    }
    let cost = |t0: f64| {
        let tau = t - t0;
        let p = (length_km / tau).min(fd.v_f());
        profile.cumulative(t0) + fd.k_c() * (fd.v_f() - p) * tau
    };
    // The cost is piecewise quadratic in t₀: check interval ends and the
    // points where the demand rate equals capacity.
    let mut best = cost(t_last);
    let mut consider = |t0: f64| {
        if t0 >= profile.start() && t0 <= t_last {
            best = best.min(cost(t0));
        }
    };
    consider(profile.start());
    for (t0, t1, q0, q1) in profile.pieces() {
        consider(t0);
        consider(t1);
        if q1 != q0 {
            let s = (fd.q_max() - q0) / (q1 - q0);
            if (0.0..=1.0).contains(&s) {
                consider(t0 + s * (t1 - t0));
            }
        }
    }
    best.max(0.0)
}

/// Exit counts of a D/D/1 queue fed by `n_plus` with service rate
/// `service` [veh/h] on a grid of spacing `dt` [h].
pub fn dd1_exit_counts(n_plus: &[f64], service: f64, dt: f64) -> Result<Vec<f64>> {
    for (i, w) in n_plus.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(Error::NotMonotone { index: i + 1 });
        }
    }
    let mut out = Vec::with_capacity(n_plus.len());
    let step = service * dt;
    for (i, &n) in n_plus.iter().enumerate() {
        let v = if i == 0 { n } else { n.min(out[i - 1] + step) };
        out.push(v);
    }
    Ok(out)
}

/// Average travel time [h] predicted by the D/D/1 construction applied to
/// the uncongested exit count, draining after the profile ends.
pub fn dd1_average_travel_time(
    profile: &PiecewiseLinearProfile,
    length_km: f64,
    fd: &FundamentalDiagram,
    service: f64,
    dt: f64,
) -> Result<f64> {
    let total = profile.total();
    if !(total > 0.0) {
        return Err(Error::NoAdmittedFlow);
    }
    let t0 = length_km / fd.v_f();
    let mut n_plus = Vec::new();
    let mut j = 0usize;
    loop {
        let t = j as f64 * dt;
        n_plus.push(profile.cumulative(t - t0));
        if t > profile.end() + t0 && t > 0.0 {
            // enough samples once the backlog at the tail clears
            let out = dd1_exit_counts(&n_plus, service, dt)?;
            if out[out.len() - 1] >= total - 1e-9 * total {
                let queue_time: f64 = n_plus
                    .windows(2)
                    .zip(out.windows(2))
                    .map(|(a, b)| 0.5 * ((a[0] - b[0]) + (a[1] - b[1])) * dt)
                    .sum();
                return Ok(t0 + queue_time / total);
            }
        }
        j += 1;
        if t > profile.end() + 100.0 {
            return Err(Error::HorizonTruncated { entry_h: profile.end(), end_h: t });
        }
    }
}

/// Writes one CSV row per step:
/// `time_h,queue_veh,inflow_vph,outflow_vph,vsl_kmh,mean_density_vpkm,N0,Nl`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "time_h",
        "queue_veh",
        "inflow_vph",
        "outflow_vph",
        "vsl_kmh",
        "mean_density_vpkm",
        "N0",
        "Nl",
    ])?;
    for j in 0..traj.n_steps() {
        wr.write_record(&[
            format!("{:.6}", traj.time_h[j]),
            format!("{:.6}", traj.queue[j]),
            format!("{:.6}", traj.inflow[j]),
            format!("{:.6}", traj.outflow[j]),
            format!("{:.4}", traj.vsl[j]),
            format!("{:.6}", traj.mean_density[j]),
            format!("{:.6}", traj.n0[j]),
            format!("{:.6}", traj.nl[j]),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
