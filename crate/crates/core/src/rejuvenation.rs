//! The trusted hypervisor: software-refresh / safety-control /
//! tracking-control sequencing, the communication gate, and authenticated
//! reference-point updates.

use std::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::dynamics::State12;
use crate::numerics::Matrix;

type HmacSha256 = Hmac<Sha256>;

/// Tag length in bytes (HMAC-SHA-256).
pub const TAG_LEN: usize = 32;

const TIME_EPS: f64 = 1e-9;
const REF_DOMAIN: &[u8] = b"rejuv/reference-point/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "SR")]
    SoftwareRefresh,
    #[serde(rename = "SC")]
    SafetyControl,
    #[serde(rename = "TC")]
    TrackingControl,
}

impl Mode {
    pub fn code(&self) -> &'static str {
        match self {
            Mode::SoftwareRefresh => "SR",
            Mode::SafetyControl => "SC",
            Mode::TrackingControl => "TC",
        }
    }

    /// The only mode that may follow `self`.
    pub fn successor(&self) -> Mode {
        match self {
            Mode::SoftwareRefresh => Mode::SafetyControl,
            Mode::SafetyControl => Mode::TrackingControl,
            Mode::TrackingControl => Mode::SoftwareRefresh,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Refresh duration, certified uncertain-control period, tracking timer and
/// the control period at which the hypervisor is stepped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingParams {
    pub t_sr: f64,
    pub t_uc: f64,
    pub t_r: f64,
    pub control_period: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self::new(0.03, 0.18, 0.004)
    }
}

impl TimingParams {
    /// Timer set to its largest safe value `T_UC − T_SR`.
    pub fn new(t_sr: f64, t_uc: f64, control_period: f64) -> Self {
        Self {
            t_sr,
            t_uc,
            t_r: t_uc - t_sr,
            control_period,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.t_sr > 0.0 && self.t_uc > self.t_sr && self.control_period > 0.0) {
            return Err(format!(
                "need 0 < T_SR < T_UC and a positive control period (got {self:?})"
            ));
        }
        if !(self.t_r > 0.0 && self.t_r <= self.t_uc - self.t_sr + TIME_EPS) {
            return Err(format!(
                "tracking timer {} must lie in (0, T_UC − T_SR = {}]",
                self.t_r,
                self.t_uc - self.t_sr
            ));
        }
        Ok(())
    }
}

/// Keyed-MAC secret shared with the mission controller.
#[derive(Clone, PartialEq, Eq)]
pub struct MacKey(Vec<u8>);

impl MacKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Self(bytes.into())
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacKey(<{} bytes>)", self.0.len())
    }
}

/// A proposed reference point as received from the untrusted side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefMessage {
    pub point: State12,
    pub tag: Vec<u8>,
}

fn canonical_bytes(point: &State12) -> Vec<u8> {
    let mut out = Vec::with_capacity(REF_DOMAIN.len() + 8 * point.0.len());
    out.extend_from_slice(REF_DOMAIN);
    for v in point.0 {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn mac(key: &MacKey) -> HmacSha256 {
    HmacSha256::new_from_slice(&key.0).expect("HMAC accepts any key length")
}

/// HMAC-SHA-256 tag over the canonical encoding of `point`.
pub fn sign_reference(point: &State12, key: &MacKey) -> Vec<u8> {
    let mut m = mac(key);
    m.update(&canonical_bytes(point));
    m.finalize().into_bytes().to_vec()
}

impl RefMessage {
    pub fn signed(point: State12, key: &MacKey) -> Self {
        Self {
            tag: sign_reference(&point, key),
            point,
        }
    }
}

/// Constant-time tag check.
pub fn authenticate(msg: &RefMessage, key: &MacKey) -> bool {
    if msg.tag.len() != TAG_LEN {
        return false;
    }
    let mut m = mac(key);
    m.update(&canonical_bytes(&msg.point));
    m.verify_slice(&msg.tag).is_ok()
}

/// What happens to the pending reference when a message fails
/// authentication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedAuthPolicy {
    /// Pending reference falls back to the current one.
    #[default]
    ResetToCurrent,
    /// Pending reference keeps its previously authenticated value.
    KeepPending,
}

/// Lyapunov shape and levels used by the hypervisor's own set tests.
#[derive(Debug, Clone, PartialEq)]
pub struct HvSets {
    pub shape: Matrix,
    pub eps_sc: f64,
    pub eps_tc: f64,
}

impl HvSets {
    /// `V(x; x_ref) = (x − x_ref)ᵀ P (x − x_ref)`.
    pub fn value(&self, x: &State12, x_ref: &State12) -> f64 {
        let d = x.sub(x_ref).to_vector();
        d.dot(&(&self.shape * &d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HvEvent {
    ModeSwitch {
        from: Mode,
        to: Mode,
    },
    CommOn,
    CommOff,
    SafetyCompleted {
        v: f64,
    },
    TrackingCompleted {
        v: f64,
    },
    Timeout,
    AuthAccepted,
    AuthRejected,
    /// Authenticated payload that is not an equilibrium point.
    Dropped,
    ReferenceSwitch {
        from: State12,
        to: State12,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypervisorState {
    pub mode: Mode,
    pub x_cur: State12,
    pub x_new: State12,
    pub mode_entry_time: f64,
    pub timer_deadline: f64,
    pub comm_on: bool,
    key: MacKey,
    pub timing: TimingParams,
    pub policy: FailedAuthPolicy,
    /// Safety control may not complete before this time.
    pub sc_hold_until: f64,
    pub auth_accepted: u64,
    pub auth_rejected: u64,
    pub dropped: u64,
}

/// What the hypervisor hands to the controllers for this period.
#[derive(Debug, Clone, PartialEq)]
pub struct HvOutput {
    pub comm_on: bool,
    pub mode: Mode,
    pub reference: State12,
    pub events: Vec<HvEvent>,
}

impl HypervisorState {
    /// Communication off, `x_cur = x_new = x_start`, refresh starting at `t0`.
    pub fn new(
        x_start: State12,
        key: MacKey,
        timing: TimingParams,
        policy: FailedAuthPolicy,
        t0: f64,
    ) -> Self {
        Self {
            mode: Mode::SoftwareRefresh,
            x_cur: x_start,
            x_new: x_start,
            mode_entry_time: t0,
            timer_deadline: f64::INFINITY,
            comm_on: false,
            key,
            timing,
            policy,
            sc_hold_until: t0,
            auth_accepted: 0,
            auth_rejected: 0,
            dropped: 0,
        }
    }

    pub fn key(&self) -> &MacKey {
        &self.key
    }

    fn switch(&mut self, to: Mode, t: f64, events: &mut Vec<HvEvent>) {
        debug_assert_eq!(self.mode.successor(), to);
        events.push(HvEvent::ModeSwitch {
            from: self.mode,
            to,
        });
        self.mode = to;
        self.mode_entry_time = t;
    }

    fn process_inbox(&mut self, inbox: &[RefMessage], events: &mut Vec<HvEvent>) {
        for msg in inbox {
            if !authenticate(msg, &self.key) {
                self.auth_rejected += 1;
                events.push(HvEvent::AuthRejected);
                if self.policy == FailedAuthPolicy::ResetToCurrent {
                    self.x_new = self.x_cur;
                }
                continue;
            }
            if !(msg.point.is_finite() && msg.point.is_equilibrium()) {
                self.dropped += 1;
                events.push(HvEvent::Dropped);
                continue;
            }
            self.auth_accepted += 1;
            events.push(HvEvent::AuthAccepted);
            self.x_new = msg.point;
        }
    }
}

/// Advances the hypervisor by one control period observed at time `t`.
///
/// Messages are only accepted when communication was on at the start of the
/// call; otherwise the inbox is ignored.
pub fn hv_step(
    hv: &HypervisorState,
    x: &State12,
    t: f64,
    inbox: &[RefMessage],
    sets: &HvSets,
) -> (HypervisorState, HvOutput) {
    let mut next = hv.clone();
    let mut events = Vec::new();
    let period = hv.timing.control_period;

    match hv.mode {
        Mode::TrackingControl => {
            next.process_inbox(inbox, &mut events);
            let v = sets.value(x, &next.x_cur);
            let finished = if v <= sets.eps_tc {
                events.push(HvEvent::TrackingCompleted { v });
                true
            } else if t + period > next.timer_deadline + TIME_EPS {
                // The next period would overrun the timer.
                events.push(HvEvent::Timeout);
                true
            } else {
                false
            };
            if finished {
                next.comm_on = false;
                events.push(HvEvent::CommOff);
                next.timer_deadline = f64::INFINITY;
                next.switch(Mode::SoftwareRefresh, t, &mut events);
            }
        }
        Mode::SoftwareRefresh => {
            if t - hv.mode_entry_time >= hv.timing.t_sr - TIME_EPS {
                next.switch(Mode::SafetyControl, t, &mut events);
            }
        }
        Mode::SafetyControl => {}
    }

    if next.mode == Mode::SafetyControl && t >= next.sc_hold_until - TIME_EPS {
        let v = sets.value(x, &next.x_cur);
        if v <= sets.eps_sc {
            events.push(HvEvent::SafetyCompleted { v });
            if next.x_new != next.x_cur {
                events.push(HvEvent::ReferenceSwitch {
                    from: next.x_cur,
                    to: next.x_new,
                });
            }
            next.x_cur = next.x_new;
            next.switch(Mode::TrackingControl, t, &mut events);
            next.comm_on = true;
            events.push(HvEvent::CommOn);
            next.timer_deadline = t + next.timing.t_r;
        }
    }

    let out = HvOutput {
        comm_on: next.comm_on,
        mode: next.mode,
        reference: next.x_cur,
        events,
    };
    (next, out)
}
