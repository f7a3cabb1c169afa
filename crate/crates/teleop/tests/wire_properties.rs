use netgov_teleop::wire::{
    decode_command, decode_frame, decode_snapshot, encode_command, encode_frame, encode_snapshot, ConstraintLine,
    OperatorCommand, ServerFrame, StateSnapshot, WireError,
};
use proptest::collection::vec;
use proptest::prelude::*;
use serde_json::Value;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3f64..1e3,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    (finite(), finite()).prop_map(|(x, y)| [x, y])
}

fn snapshot() -> impl Strategy<Value = StateSnapshot> {
    (1usize..12).prop_flat_map(|n| {
        (
            (any::<u64>(), "[a-z_0-9]{0,24}", finite(), any::<u64>()),
            (vec(0..n, 1..=n), vec(point(), n), vec(point(), n), point(), point()),
            vec((point(), finite()), 0..4),
            (any::<bool>(), any::<bool>(), any::<u64>()),
        )
            .prop_map(move |((seq, scenario, time, step), (leaders, positions, m, applied, raw), lines, flags)| {
                let constraints: Vec<ConstraintLine> =
                    lines.iter().map(|&(normal, offset)| ConstraintLine { normal, offset }).collect();
                let margins = if constraints.is_empty() { vec![] } else { positions.iter().map(|p| p[0]).collect() };
                StateSnapshot {
                    seq,
                    scenario,
                    time,
                    step,
                    n,
                    leaders,
                    positions,
                    m_estimates: m,
                    applied_reference: applied,
                    raw_reference: raw,
                    constraints,
                    margins,
                    feasible: flags.0,
                    paused: flags.1,
                    dropped: flags.2,
                }
            })
    })
}

fn command() -> impl Strategy<Value = OperatorCommand> {
    prop_oneof![
        point().prop_map(|r| OperatorCommand::SetReference { r }),
        Just(OperatorCommand::Pause),
        Just(OperatorCommand::Resume),
        Just(OperatorCommand::Reset),
        "[a-z_0-9]{1,24}".prop_map(|scenario| OperatorCommand::LoadScenario { scenario }),
        (1e-6f64..1e3).prop_map(|speed| OperatorCommand::SetSpeed { speed }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn snapshots_round_trip_exactly(s in snapshot()) {
        let line = encode_snapshot(&s);
        prop_assert!(!line.contains('\n'));
        let back = decode_snapshot(&line).unwrap();
        prop_assert_eq!(&back, &s);
        // bitwise, which also separates 0.0 from -0.0
        prop_assert_eq!(back.time.to_bits(), s.time.to_bits());
        prop_assert_eq!(decode_frame(&line).unwrap(), ServerFrame::Snapshot(s));
    }

    #[test]
    fn commands_round_trip_exactly(c in command()) {
        let line = encode_command(&c);
        prop_assert_eq!(decode_command(&line).unwrap(), c);
    }

    #[test]
    fn unknown_snapshot_fields_are_ignored(s in snapshot(), key in "x_[a-z]{1,8}") {
        let mut value: Value = serde_json::from_str(&encode_snapshot(&s)).unwrap();
        value.as_object_mut().unwrap().insert(key, serde_json::json!({"nested": [1, 2, 3]}));
        prop_assert_eq!(decode_snapshot(&value.to_string()).unwrap(), s);
    }
}

#[test]
fn every_frame_carries_the_version_and_type() {
    let frames = [
        ServerFrame::Ack { command: "pause".into() },
        ServerFrame::Error { message: "nope".into() },
    ];
    assert_eq!(encode_frame(&frames[0]), r#"{"v":1,"type":"ack","command":"pause"}"#);
    assert_eq!(encode_frame(&frames[1]), r#"{"v":1,"type":"error","message":"nope"}"#);
    for f in frames {
        assert_eq!(decode_frame(&encode_frame(&f)).unwrap(), f);
    }
    assert_eq!(decode_frame(r#"{"v":3,"type":"ack","command":"x"}"#), Err(WireError::Version(3)));
}

#[test]
fn non_finite_references_are_rejected() {
    // JSON has no NaN; an out-of-range literal parses to infinity
    let err = decode_command(r#"{"v":1,"type":"set_reference","r":[1e999,0.0]}"#).unwrap_err();
    assert!(matches!(err, WireError::Invalid(_) | WireError::Malformed(_)));
    assert!(decode_command(r#"{"v":1,"type":"set_reference","r":[1.0]}"#).is_err());
    assert!(decode_command(r#"{"v":1,"type":"set_reference"}"#).is_err());
}

#[test]
fn fifty_robot_snapshot_fits_in_one_frame() {
    let n = 50;
    // the longest shortest-round-trip doubles
    let wide = -1.2345678901234567e-300;
    let s = StateSnapshot {
        seq: u64::MAX,
        scenario: "x".repeat(64),
        time: wide,
        step: u64::MAX,
        n,
        leaders: (0..n).collect(),
        positions: vec![[wide, wide]; n],
        m_estimates: vec![[wide, wide]; n],
        applied_reference: [wide, wide],
        raw_reference: [wide, wide],
        constraints: vec![ConstraintLine { normal: [wide, wide], offset: wide }; 8],
        margins: vec![wide; n],
        feasible: true,
        paused: false,
        dropped: u64::MAX,
    };
    let line = encode_snapshot(&s);
    assert!(line.len() < 64 * 1024, "{} bytes", line.len());
    assert_eq!(decode_snapshot(&line).unwrap(), s);
}
