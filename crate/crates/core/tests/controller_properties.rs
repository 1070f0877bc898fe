//! Randomized checks of the controller state machine against simple oracles.

use homectl_core::command::{Command, OnDuration, Operation};
use homectl_core::controller::{apply_command, expire_due, next_deadline, Cause, DeviceState, StateTable, Transition};
use homectl_core::registry::{parse_registry_config, Registry, SafetyPolicy};
use homectl_core::relay::{encode_frame, RelayFrame};
use homectl_core::{ApplianceName, Timestamp};
use proptest::prelude::*;

const MAX: u32 = 1800;

fn registry() -> Registry {
    parse_registry_config(
        "device ac line=0 policy=indefinite\n\
         device cooker line=1 policy=max:1800\n\
         device heater line=5 policy=max:60\n\
         device fan line=7 policy=indefinite",
    )
    .unwrap()
}

#[derive(Debug, Clone)]
enum Step {
    Cmd { device: usize, op: Operation, gap_ms: i64 },
    Sweep { gap_ms: i64 },
}

fn arb_op() -> impl Strategy<Value = Operation> {
    prop_oneof![
        Just(Operation::TurnOn),
        Just(Operation::TurnOff),
        (1u32..=4000).prop_map(|d| Operation::TurnOnTimed(OnDuration::new(d).unwrap())),
    ]
}

fn arb_steps(devices: usize) -> impl Strategy<Value = Vec<Step>> {
    let step = prop_oneof![
        3 => (0..devices, arb_op(), 0i64..600_000).prop_map(|(device, op, gap_ms)| Step::Cmd { device, op, gap_ms }),
        1 => (0i64..3_000_000).prop_map(|gap_ms| Step::Sweep { gap_ms }),
    ];
    proptest::collection::vec(step, 1..40)
}

fn run(reg: &Registry, steps: &[Step]) -> (StateTable, Vec<Transition>, Timestamp) {
    let mut table = StateTable::all_off(reg);
    let mut log = Vec::new();
    let mut now = Timestamp::EPOCH;
    for step in steps {
        match step {
            Step::Cmd { device, op, gap_ms } => {
                now = now.plus_millis(*gap_ms);
                let cmd = Command::new(reg.devices()[*device].name.clone(), *op);
                log.push(apply_command(&mut table, reg, &cmd, now, "p").unwrap());
            }
            Step::Sweep { gap_ms } => {
                now = now.plus_millis(*gap_ms);
                log.extend(expire_due(&mut table, now));
            }
        }
    }
    (table, log, now)
}

/// Fold oracle: OR together the line bit of every device that is on.
fn fold_frame(reg: &Registry, table: &StateTable) -> RelayFrame {
    let mut bits = 0u8;
    for spec in reg.devices() {
        if table.get(spec.name.as_str()).unwrap().is_on() {
            bits |= 1 << spec.line.index();
        }
    }
    RelayFrame(bits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn safety_ceiling_holds(steps in arb_steps(4)) {
        let reg = registry();
        let mut table = StateTable::all_off(&reg);
        let mut now = Timestamp::EPOCH;
        let mut last_arming = vec![None::<Timestamp>; reg.len()];
        for step in &steps {
            match step {
                Step::Cmd { device, op, gap_ms } => {
                    now = now.plus_millis(*gap_ms);
                    let cmd = Command::new(reg.devices()[*device].name.clone(), *op);
                    apply_command(&mut table, &reg, &cmd, now, "p").unwrap();
                    if !matches!(op, Operation::TurnOff) {
                        last_arming[*device] = Some(now);
                    }
                }
                Step::Sweep { gap_ms } => {
                    now = now.plus_millis(*gap_ms);
                    expire_due(&mut table, now);
                }
            }
            for (i, spec) in reg.devices().iter().enumerate() {
                let state = *table.get(spec.name.as_str()).unwrap();
                if let SafetyPolicy::MaxOn(m) = spec.policy {
                    prop_assert!(!matches!(state, DeviceState::On { .. }), "{} plain on", spec.name);
                    if let DeviceState::OnTimed { deadline, since, .. } = state {
                        let armed = last_arming[i].unwrap();
                        prop_assert!(deadline.millis_since(armed) <= i64::from(m) * 1000);
                        prop_assert!(deadline > since);
                    }
                }
            }
        }
    }

    #[test]
    fn one_device_per_command(steps in arb_steps(4), device in 0usize..4, op in arb_op()) {
        let reg = registry();
        let (mut table, _, now) = run(&reg, &steps);
        let before = table.clone();
        let cmd = Command::new(reg.devices()[device].name.clone(), op);
        let t = apply_command(&mut table, &reg, &cmd, now, "p").unwrap();
        prop_assert_eq!(&t.device, &reg.devices()[device].name);
        for (i, spec) in reg.devices().iter().enumerate() {
            if i != device {
                prop_assert_eq!(table.get(spec.name.as_str()), before.get(spec.name.as_str()));
            }
        }
    }

    #[test]
    fn other_commands_leave_deadlines_alone(
        d in 1u32..=MAX,
        others in proptest::collection::vec((prop_oneof![Just(0usize), Just(2), Just(3)], arb_op(), 0i64..10_000), 0..30),
    ) {
        let reg = registry();
        let mut table = StateTable::all_off(&reg);
        let cooker = ApplianceName::new("cooker").unwrap();
        apply_command(&mut table, &reg, &Command::new(cooker, Operation::TurnOnTimed(OnDuration::new(d).unwrap())), Timestamp::EPOCH, "p").unwrap();
        let armed = *table.get("cooker").unwrap();
        let mut now = Timestamp::EPOCH;
        for (dev, op, gap) in others {
            now = now.plus_millis(gap);
            let cmd = Command::new(reg.devices()[dev].name.clone(), op);
            apply_command(&mut table, &reg, &cmd, now, "p").unwrap();
            prop_assert_eq!(*table.get("cooker").unwrap(), armed);
        }
    }

    #[test]
    fn limited_devices_always_end_off(steps in arb_steps(4)) {
        let reg = registry();
        let (mut table, _, now) = run(&reg, &steps);
        // far past any possible deadline
        expire_due(&mut table, now.plus_secs(86_400 * 2));
        for spec in reg.devices() {
            if matches!(spec.policy, SafetyPolicy::MaxOn(_)) {
                prop_assert_eq!(*table.get(spec.name.as_str()).unwrap(), DeviceState::Off);
            }
        }
        prop_assert!(next_deadline(&table).is_none());
    }

    #[test]
    fn replay_is_deterministic(steps in arb_steps(4)) {
        let reg = registry();
        let (a_table, a_log, _) = run(&reg, &steps);
        let (b_table, b_log, _) = run(&reg, &steps);
        prop_assert_eq!(a_table, b_table);
        prop_assert_eq!(a_log, b_log);
    }

    #[test]
    fn transitions_only_noop_for_commands(steps in arb_steps(4)) {
        let reg = registry();
        let (_, log, _) = run(&reg, &steps);
        for t in log {
            if t.is_noop() {
                prop_assert!(matches!(t.cause, Cause::Command(_)));
            }
        }
    }

    #[test]
    fn frame_matches_fold_oracle(steps in arb_steps(4)) {
        let reg = registry();
        let (table, _, _) = run(&reg, &steps);
        let frame = encode_frame(&table, &reg);
        prop_assert_eq!(frame, fold_frame(&reg, &table));
        prop_assert_eq!(frame.bits() & !0b1010_0011, 0, "unmapped line set");
    }

    #[test]
    fn expiry_matches_sorted_deadline_oracle(deadlines in proptest::collection::vec(1u32..100, 2..=4), now in 0i64..120) {
        let reg = registry();
        let mut table = StateTable::all_off(&reg);
        for (i, d) in deadlines.iter().enumerate() {
            let cmd = Command::new(reg.devices()[i].name.clone(), Operation::TurnOnTimed(OnDuration::new(*d).unwrap()));
            apply_command(&mut table, &reg, &cmd, Timestamp::EPOCH, "p").unwrap();
        }
        let deadlines_by_device: Vec<i64> = reg
            .devices()
            .iter()
            .take(deadlines.len())
            .map(|s| table.get(s.name.as_str()).unwrap().deadline().unwrap().as_secs_floor())
            .collect();
        let fired = expire_due(&mut table, Timestamp::from_secs(now));
        let expected: Vec<&str> = reg
            .devices()
            .iter()
            .zip(&deadlines_by_device)
            .filter(|(_, &d)| d <= now)
            .map(|(s, _)| s.name.as_str())
            .collect();
        let got: Vec<&str> = fired.iter().map(|t| t.device.as_str()).collect();
        prop_assert_eq!(got, expected);
        prop_assert!(fired.iter().all(|t| t.cause == Cause::AutoOff && t.to == DeviceState::Off));
    }
}
