use proptest::prelude::*;

use rejuv_core::control::{clamp_controls, ClampSpec};
use rejuv_core::dynamics::{mixer_forward, mixer_inverse_raw, QuadrotorParams, State12, Wrench};
use rejuv_core::numerics::{mat_exp, Matrix};
use rejuv_core::rejuvenation::{
    authenticate, hv_step, FailedAuthPolicy, HvSets, HypervisorState, MacKey, Mode, RefMessage,
    TimingParams,
};
use rejuv_core::sim::{generate_references, Waypoint};

fn small_matrix() -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0..2.0f64, 16).prop_map(|v| Matrix::from_vec(4, 4, v))
}

fn wrench() -> impl Strategy<Value = Wrench> {
    (-5.0..25.0f64, -1.0..1.0f64, -1.0..1.0f64, -0.3..0.3f64)
        .prop_map(|(f, a, b, c)| Wrench::new(f, a, b, c))
}

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![
        Just(Mode::SoftwareRefresh),
        Just(Mode::SafetyControl),
        Just(Mode::TrackingControl)
    ]
}

proptest! {
    #[test]
    fn exp_semigroup(a in small_matrix(), s in 0.0..1.0f64, t in 0.0..1.0f64) {
        let lhs = mat_exp(&a, s + t).unwrap();
        let rhs = mat_exp(&a, s).unwrap() * mat_exp(&a, t).unwrap();
        prop_assert!((&lhs - &rhs).norm() <= 1e-9 * lhs.norm().max(1.0));
    }

    #[test]
    fn exp_inverse(a in small_matrix(), t in 0.0..1.0f64) {
        let p = mat_exp(&a, t).unwrap() * mat_exp(&a, -t).unwrap();
        prop_assert!((p - Matrix::identity(4, 4)).norm() <= 1e-9);
    }

    #[test]
    fn clamp_is_idempotent_and_bounded(w in wrench(), m in mode()) {
        let spec = ClampSpec::default();
        let once = clamp_controls(&spec, m, &w);
        prop_assert_eq!(clamp_controls(&spec, m, &once), once);
        prop_assert!(spec.bounds(m).contains(&once));
        // Tracking output is always admissible for safety control.
        let tc = clamp_controls(&spec, Mode::TrackingControl, &w);
        prop_assert!(spec.safety.contains(&tc));
    }

    #[test]
    fn mixer_round_trip(w in wrench()) {
        let p = QuadrotorParams::default();
        let back = mixer_forward(&mixer_inverse_raw(&w, &p), &p);
        for (u, v) in back.to_array().iter().zip(w.to_array()) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn single_bit_flip_breaks_tag(
        pos in prop::array::uniform3(-10.0..10.0f64),
        bit in 0usize..(12 * 64 + 32 * 8),
    ) {
        let key = MacKey::new(b"property key".to_vec());
        let msg = RefMessage::signed(State12::hover(pos[0], pos[1], pos[2], 0.0), &key);
        prop_assert!(authenticate(&msg, &key));
        let mut bad = msg.clone();
        if bit < 12 * 64 {
            let (i, b) = (bit / 64, bit % 64);
            bad.point.0[i] = f64::from_bits(bad.point.0[i].to_bits() ^ (1u64 << b));
        } else {
            let b = bit - 12 * 64;
            bad.tag[b / 8] ^= 1 << (b % 8);
        }
        prop_assert!(!authenticate(&bad, &key));
    }

    #[test]
    fn reference_spacing(
        a in prop::array::uniform4(-5.0..5.0f64),
        b in prop::array::uniform4(-5.0..5.0f64),
        step in 0.05..2.0f64,
    ) {
        let s = Waypoint::new(a[0], a[1], a[2], a[3]);
        let g = Waypoint::new(b[0], b[1], b[2], b[3]);
        let refs = generate_references(&s, &g, step);
        prop_assert_eq!(*refs.last().unwrap(), g.hover());
        let mut prev = s.hover();
        for r in &refs {
            prop_assert!(r.is_equilibrium());
            let d = r.sub(&prev);
            let dist = (d.0[0].powi(2) + d.0[1].powi(2) + d.0[2].powi(2)).sqrt();
            prop_assert!(dist <= step * (1.0 + 1e-9));
            prev = *r;
        }
    }

    /// Random observations and message streams: the gate, the mode order and
    /// reference integrity hold at every step.
    #[test]
    fn hypervisor_invariants(
        offsets in prop::collection::vec(0.0..0.4f64, 50..400),
        forge in prop::collection::vec(any::<bool>(), 400),
    ) {
        let key = MacKey::new(b"k".to_vec());
        let wrong = MacKey::new(b"not k".to_vec());
        let timing = TimingParams::default();
        let sets = HvSets { shape: Matrix::identity(12, 12), eps_sc: 0.05, eps_tc: 0.01 };
        let start = State12::hover(0.0, 0.0, 1.0, 0.0);
        let honest = State12::hover(0.0, 0.3, 1.0, 0.0);
        let mut hv = HypervisorState::new(start, key.clone(), timing, FailedAuthPolicy::ResetToCurrent, 0.0);
        let mut tc_entry: Option<f64> = None;
        for (k, off) in offsets.iter().enumerate() {
            let t = k as f64 * timing.control_period;
            let mut x = hv.x_cur;
            x.0[0] += off;
            let inbox = if forge[k] {
                vec![RefMessage::signed(State12::hover(9.0, 9.0, 9.0, 0.0), &wrong)]
            } else {
                vec![RefMessage::signed(honest, &key)]
            };
            let before = hv.mode;
            let (next, out) = hv_step(&hv, &x, t, &inbox, &sets);
            prop_assert!(!out.comm_on || out.mode == Mode::TrackingControl);
            prop_assert!(out.mode == before || out.mode == before.successor()
                || out.mode == before.successor().successor());
            prop_assert!(next.x_cur == start || next.x_cur == honest);
            prop_assert!(next.x_new == start || next.x_new == honest);
            if before != Mode::TrackingControl && out.mode == Mode::TrackingControl {
                tc_entry = Some(t);
            }
            if out.mode == Mode::TrackingControl {
                prop_assert!(t - tc_entry.unwrap() <= timing.t_r + 1e-9);
            }
            hv = next;
        }
    }
}
