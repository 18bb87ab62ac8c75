//! Closed-loop mission simulation: reference generation, the per-period
//! hypervisor/controller/plant loop, attack and forgery injection, and trace
//! export.

use std::fmt::Write as _;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{clamp_controls, control_law, ClampSpec};
use crate::design::Design;
use crate::dynamics::{
    apply_attack, mixer_forward, mixer_map, quad_derivative, AttackSpec, DynamicsError,
    QuadrotorParams, State12, Wrench, STATE_NAMES,
};
use crate::rejuvenation::{
    hv_step, FailedAuthPolicy, HvEvent, HvSets, HypervisorState, MacKey, Mode, RefMessage,
    TimingParams,
};
use crate::sets::Ellipsoid;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Position and yaw of a mission endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(default)]
    pub psi: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, z: f64, psi: f64) -> Self {
        Self { x, y, z, psi }
    }

    pub fn hover(&self) -> State12 {
        State12::hover(self.x, self.y, self.z, self.psi)
    }

    fn is_finite(&self) -> bool {
        [self.x, self.y, self.z, self.psi]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Equilibrium references spaced at most `step` apart on the straight segment
/// from `start` to `goal`, excluding `start` and ending exactly at `goal`.
pub fn generate_references(start: &Waypoint, goal: &Waypoint, step: f64) -> Vec<State12> {
    assert!(step > 0.0, "reference step must be positive");
    let d = [goal.x - start.x, goal.y - start.y, goal.z - start.z];
    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let n = ((dist / step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let mut out: Vec<State12> = (1..n)
        .map(|k| {
            let s = k as f64 / n as f64;
            State12::hover(
                start.x + s * d[0],
                start.y + s * d[1],
                start.z + s * d[2],
                start.psi + s * (goal.psi - start.psi),
            )
        })
        .collect();
    out.push(goal.hover());
    out
}

/// What the actuators receive while the untrusted partition reboots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshOutput {
    /// Last command emitted before the refresh.
    #[default]
    Hold,
    /// Zero wrench (still clamped).
    Zero,
}

/// Adversary that injects reference messages tagged with a wrong key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgerSpec {
    /// Seconds between injections.
    pub interval: f64,
    pub start: f64,
    pub end: f64,
    /// Half-width of the random box around the goal the forged points are
    /// drawn from.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub params: QuadrotorParams,
    pub clamp: ClampSpec,
    pub timing: TimingParams,
    pub start: Waypoint,
    pub goal: Waypoint,
    pub ref_step: f64,
    pub attack: Option<AttackSpec>,
    pub forger: Option<ForgerSpec>,
    pub refresh_output: RefreshOutput,
    pub failed_auth: FailedAuthPolicy,
    pub sim_dt: f64,
    pub duration: f64,
    /// Safety control is held for this long at the start of the run.
    pub initial_sc: f64,
    pub mac_key: String,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            params: QuadrotorParams::default(),
            clamp: ClampSpec::default(),
            timing: TimingParams::default(),
            start: Waypoint::new(1.0, 0.0, 2.0, 0.0),
            goal: Waypoint::new(1.0, 2.0, 4.0, 0.0),
            ref_step: 0.5,
            attack: None,
            forger: None,
            refresh_output: RefreshOutput::Hold,
            failed_auth: FailedAuthPolicy::ResetToCurrent,
            sim_dt: 0.001,
            duration: 120.0,
            initial_sc: 2.0,
            mac_key: "rejuvenation-demo-key".into(),
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        self.params
            .validate()
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        self.clamp
            .validate()
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        self.timing.validate().map_err(SimError::Invalid)?;
        if !(self.start.is_finite() && self.goal.is_finite()) {
            return bad("waypoints must be finite".into());
        }
        if !(self.ref_step > 0.0) {
            return bad("ref_step must be positive".into());
        }
        let period = self.timing.control_period;
        if !(self.sim_dt > 0.0 && self.sim_dt <= period) {
            return bad(format!("need 0 < sim_dt ≤ control period {period}"));
        }
        let ratio = period / self.sim_dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("control period must be a multiple of sim_dt".into());
        }
        if !(self.duration > 0.0 && self.initial_sc >= 0.0) {
            return bad("duration must be positive and initial_sc non-negative".into());
        }
        if self.mac_key.is_empty() {
            return bad("mac_key must not be empty".into());
        }
        if let Some(a) = &self.attack {
            a.validate().map_err(SimError::Invalid)?;
        }
        if let Some(f) = &self.forger {
            if !(f.interval > 0.0 && f.start < f.end && f.spread >= 0.0) {
                return bad(format!("malformed forger {f:?}"));
            }
        }
        Ok(())
    }

    pub fn key(&self) -> MacKey {
        MacKey::new(self.mac_key.as_bytes().to_vec())
    }

    fn forged_key(&self) -> MacKey {
        MacKey::new(format!("{}#forged", self.mac_key).into_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "detail", rename_all = "snake_case")]
pub enum SimEvent {
    Hypervisor(HvEvent),
    AttackOn,
    AttackOff,
    MessageSent {
        ref_id: usize,
    },
    ForgedInjected,
    /// `V(x; x_new) > 1` when the reference switched.
    SwitchOutsideSafeSet {
        v: f64,
    },
    Fault {
        reason: String,
    },
    MissionComplete,
}

impl SimEvent {
    /// Compact label for the CSV `event` column.
    pub fn label(&self) -> String {
        match self {
            SimEvent::Hypervisor(e) => match e {
                HvEvent::ModeSwitch { from, to } => format!("{from}->{to}"),
                HvEvent::CommOn => "comm_on".into(),
                HvEvent::CommOff => "comm_off".into(),
                HvEvent::SafetyCompleted { .. } => "sc_done".into(),
                HvEvent::TrackingCompleted { .. } => "tc_done".into(),
                HvEvent::Timeout => "timeout".into(),
                HvEvent::AuthAccepted => "auth_ok".into(),
                HvEvent::AuthRejected => "auth_fail".into(),
                HvEvent::Dropped => "dropped".into(),
                HvEvent::ReferenceSwitch { .. } => "ref_switch".into(),
            },
            SimEvent::AttackOn => "attack_on".into(),
            SimEvent::AttackOff => "attack_off".into(),
            SimEvent::MessageSent { ref_id } => format!("sent_{ref_id}"),
            SimEvent::ForgedInjected => "forged".into(),
            SimEvent::SwitchOutsideSafeSet { .. } => "switch_outside_ec".into(),
            SimEvent::Fault { .. } => "fault".into(),
            SimEvent::MissionComplete => "mission_complete".into(),
        }
    }
}

/// One control period. The state is sampled at the start of the period; the
/// mode, reference and commands are those applied over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub state: State12,
    /// Controller output before the clamp.
    pub wrench_cmd: Wrench,
    pub wrench: Wrench,
    pub motors: [f64; 4],
    pub mode: Mode,
    pub comm_on: bool,
    /// 0 is the starting hover point, `k ≥ 1` the k-th generated reference.
    pub ref_id: usize,
    /// `V(x; x_cur)`.
    pub v: f64,
    pub events: Vec<SimEvent>,
}

/// A maximal run of one mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub mode: Mode,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub completed: bool,
    pub completion_time: Option<f64>,
    pub final_v_goal: f64,
    pub fault: Option<String>,
    pub switch_violations: usize,
    /// Largest `V(x; x_new)` seen at a reference switch.
    pub max_switch_v: f64,
    pub auth_accepted: u64,
    pub auth_rejected: u64,
    pub forged_injected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// `references[0]` is the start hover point.
    pub references: Vec<State12>,
    pub outcome: Outcome,
}

impl Trace {
    /// Consecutive same-mode runs, using the record times as boundaries.
    pub fn phases(&self) -> Vec<Phase> {
        let mut out: Vec<Phase> = Vec::new();
        let end_time = |i: usize| {
            self.records
                .get(i + 1)
                .map(|r| r.t)
                .unwrap_or_else(|| self.records[i].t)
        };
        for (i, r) in self.records.iter().enumerate() {
            match out.last_mut() {
                Some(p) if p.mode == r.mode => p.end = end_time(i),
                _ => {
                    // Zero-length phases show up as mode-switch pairs within
                    // one step; record them explicitly.
                    for e in &r.events {
                        if let SimEvent::Hypervisor(HvEvent::ModeSwitch { to, .. }) = e {
                            if *to != r.mode {
                                out.push(Phase {
                                    mode: *to,
                                    start: r.t,
                                    end: r.t,
                                });
                            }
                        }
                    }
                    out.push(Phase {
                        mode: r.mode,
                        start: r.t,
                        end: end_time(i),
                    });
                }
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = String::from("t");
        for n in STATE_NAMES {
            header.push(',');
            header.push_str(n);
        }
        header.push_str(",F,tau_phi,tau_theta,tau_psi,mode,comm,ref_id,V,event");
        writeln!(w, "{header}")?;
        let mut line = String::new();
        for r in &self.records {
            line.clear();
            write!(line, "{:.16e}", r.t).unwrap();
            for v in r.state.0.iter().chain(r.wrench.to_array().iter()) {
                write!(line, ",{v:.16e}").unwrap();
            }
            let events: Vec<String> = r.events.iter().map(SimEvent::label).collect();
            write!(
                line,
                ",{},{},{},{:.16e},{}",
                r.mode,
                u8::from(r.comm_on),
                r.ref_id,
                r.v,
                events.join("|")
            )
            .unwrap();
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// One JSON object per event: `{"t": .., "type": .., "detail": ..}`.
    pub fn write_events_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            t: f64,
            #[serde(flatten)]
            event: &'a SimEvent,
        }
        for r in &self.records {
            for e in &r.events {
                serde_json::to_writer(&mut w, &Line { t: r.t, event: e })?;
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Coordinate planes exported for the ellipse plots: (x, y), (y, z), (x, z).
pub const PLOT_PLANES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Boundary points of the projections of `E_C`, `E_SC` and `E_TC` around
/// every reference, as CSV `ref_id,set,plane,k,u,v`.
///
/// `e_c` is the level-1 ellipsoid; the other two are its `eps_sc` and
/// `eps_tc` level sets.
pub fn write_ellipse_csv<W: Write>(
    e_c: &Ellipsoid,
    eps_sc: f64,
    eps_tc: f64,
    references: &[State12],
    n_points: usize,
    mut w: W,
) -> io::Result<()> {
    let level = |l: f64| {
        e_c.with_level(l)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))
    };
    writeln!(w, "ref_id,set,plane,k,u,v")?;
    let sets = [
        ("E_C", e_c.clone()),
        ("E_SC", level(eps_sc)?),
        ("E_TC", level(eps_tc)?),
    ];
    for (id, r) in references.iter().enumerate() {
        for (name, e) in &sets {
            let e = e.recentered(r.to_vector());
            for (i, j) in PLOT_PLANES {
                let plane = format!("{}-{}", STATE_NAMES[i], STATE_NAMES[j]);
                for (k, p) in e.projection_boundary(i, j, n_points).iter().enumerate() {
                    writeln!(w, "{id},{name},{plane},{k},{:.16e},{:.16e}", p[0], p[1])?;
                }
            }
        }
    }
    Ok(())
}

/// One plant step of length `dt` under a held wrench.
pub fn plant_step(
    x: &State12,
    w: &Wrench,
    p: &QuadrotorParams,
    dt: f64,
) -> Result<State12, DynamicsError> {
    let axpy = |a: &State12, k: &State12, h: f64| {
        let mut o = *a;
        for (oi, ki) in o.0.iter_mut().zip(k.0.iter()) {
            *oi += h * ki;
        }
        o
    };
    let k1 = quad_derivative(x, w, p)?;
    let k2 = quad_derivative(&axpy(x, &k1, dt / 2.0), w, p)?;
    let k3 = quad_derivative(&axpy(x, &k2, dt / 2.0), w, p)?;
    let k4 = quad_derivative(&axpy(x, &k3, dt), w, p)?;
    let mut out = *x;
    for i in 0..out.0.len() {
        out.0[i] += dt / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
    }
    if !out.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    Ok(out)
}

fn forged_point(rng: &mut ChaCha8Rng, goal: &Waypoint, spread: f64) -> State12 {
    let mut r = |c: f64| c + spread * (2.0 * rng.gen::<f64>() - 1.0);
    State12::hover(r(goal.x), r(goal.y), r(goal.z), 0.0)
}

/// Runs the mission. Certification of the design is the caller's concern.
pub fn run_scenario(s: &Scenario, design: &Design) -> Result<Trace, SimError> {
    s.validate()?;
    let period = s.timing.control_period;
    let substeps = (period / s.sim_dt).round() as usize;
    let sets = HvSets {
        shape: design.e_c.shape.clone(),
        eps_sc: design.eps_sc,
        eps_tc: design.eps_tc,
    };
    let key = s.key();
    let forged_key = s.forged_key();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);

    let x_start = s.start.hover();
    let mut references = vec![x_start];
    if s.start != s.goal {
        references.extend(generate_references(&s.start, &s.goal, s.ref_step));
    }
    let last_id = references.len() - 1;
    let goal = references[last_id];
    let id_of = |p: &State12| references.iter().position(|r| r == p);

    let mut hv = HypervisorState::new(x_start, key.clone(), s.timing, s.failed_auth, 0.0);
    hv.mode = Mode::SafetyControl;
    hv.sc_hold_until = s.initial_sc;

    let mut x = x_start;
    let mut last_wrench = s.clamp.tracking.clip(&s.params.hover_wrench());
    let mut records = Vec::new();
    let mut outcome = Outcome {
        completed: false,
        completion_time: None,
        final_v_goal: f64::NAN,
        fault: None,
        switch_violations: 0,
        max_switch_v: 0.0,
        auth_accepted: 0,
        auth_rejected: 0,
        forged_injected: 0,
    };
    let mut attack_was_active = false;
    let mut next_forgery = s.forger.map(|f| f.start);
    let mut goal_since: Option<f64> = None;
    let n_steps = (s.duration / period).floor() as usize;

    for step in 0..n_steps {
        let t = step as f64 * period;
        let mut events = Vec::new();

        if let Some(a) = &s.attack {
            let active = a.active(t);
            if active != attack_was_active {
                events.push(if active {
                    SimEvent::AttackOn
                } else {
                    SimEvent::AttackOff
                });
            }
            attack_was_active = active;
        }

        // Inbox for this period: forgeries first, then the honest sender.
        let mut inbox = Vec::new();
        if let (Some(f), Some(at)) = (&s.forger, next_forgery) {
            if t + 1e-12 >= at && t < f.end {
                inbox.push(RefMessage::signed(
                    forged_point(&mut rng, &s.goal, f.spread),
                    &forged_key,
                ));
                outcome.forged_injected += 1;
                events.push(SimEvent::ForgedInjected);
                next_forgery = Some(at + f.interval);
            }
        }
        let cur_id = id_of(&hv.x_cur).unwrap_or(0);
        if hv.comm_on
            && hv.mode == Mode::TrackingControl
            && cur_id < last_id
            && sets.value(&x, &hv.x_cur) <= sets.eps_tc
        {
            inbox.push(RefMessage::signed(references[cur_id + 1], &key));
            events.push(SimEvent::MessageSent { ref_id: cur_id + 1 });
        }

        let (next, out) = hv_step(&hv, &x, t, &inbox, &sets);
        for e in &out.events {
            if let HvEvent::ReferenceSwitch { to, .. } = e {
                let v = sets.value(&x, to);
                outcome.max_switch_v = outcome.max_switch_v.max(v);
                if v > 1.0 + 1e-9 {
                    outcome.switch_violations += 1;
                    events.push(SimEvent::SwitchOutsideSafeSet { v });
                }
            }
        }
        events.extend(out.events.into_iter().map(SimEvent::Hypervisor));
        hv = next;

        let (wrench_cmd, wrench) = match out.mode {
            Mode::SafetyControl => {
                let u = control_law(&design.safety, &x, &out.reference);
                (u, clamp_controls(&s.clamp, Mode::SafetyControl, &u))
            }
            Mode::TrackingControl => {
                let u = control_law(&design.tracking, &x, &out.reference);
                let u = match &s.attack {
                    Some(a) => a.corrupt_wrench(u, t),
                    None => u,
                };
                (u, clamp_controls(&s.clamp, Mode::TrackingControl, &u))
            }
            Mode::SoftwareRefresh => {
                let u = match s.refresh_output {
                    RefreshOutput::Hold => last_wrench,
                    RefreshOutput::Zero => Wrench::default(),
                };
                (u, clamp_controls(&s.clamp, Mode::SoftwareRefresh, &u))
            }
        };
        last_wrench = wrench;
        let motors = apply_attack(s.attack.as_ref(), mixer_map(&wrench, &s.params).commands, t);
        let applied = mixer_forward(&motors, &s.params);

        let ref_id = id_of(&hv.x_cur).unwrap_or(usize::MAX);
        let v = sets.value(&x, &hv.x_cur);
        let v_goal = sets.value(&x, &goal);
        outcome.final_v_goal = v_goal;
        if ref_id == last_id && v_goal <= sets.eps_tc {
            let since = *goal_since.get_or_insert(t);
            if t - since >= s.timing.t_uc - 1e-9 && !outcome.completed {
                outcome.completed = true;
                outcome.completion_time = Some(since);
                events.push(SimEvent::MissionComplete);
            }
        } else {
            goal_since = None;
        }

        records.push(TraceRecord {
            t,
            state: x,
            wrench_cmd,
            wrench,
            motors,
            mode: out.mode,
            comm_on: out.comm_on,
            ref_id,
            v,
            events,
        });
        if outcome.completed {
            break;
        }

        let mut fault = None;
        for _ in 0..substeps {
            match plant_step(&x, &applied, &s.params, s.sim_dt) {
                Ok(nx) => x = nx,
                Err(e) => {
                    fault = Some(e.to_string());
                    break;
                }
            }
        }
        if let Some(reason) = fault {
            let t_fault = t + period;
            records.push(TraceRecord {
                t: t_fault,
                state: x,
                wrench_cmd,
                wrench,
                motors,
                mode: hv.mode,
                comm_on: hv.comm_on,
                ref_id,
                v: sets.value(&x, &hv.x_cur),
                events: vec![SimEvent::Fault {
                    reason: reason.clone(),
                }],
            });
            outcome.fault = Some(reason);
            break;
        }
    }
    outcome.auth_accepted = hv.auth_accepted;
    outcome.auth_rejected = hv.auth_rejected;
    Ok(Trace {
        records,
        references,
        outcome,
    })
}
