use std::fs;
use std::path::Path;

use radleg::io_dataset::synth::{presets, synth_generate};
use radleg::io_dataset::{load_log, write_log, LogError};

fn joints_header() -> String {
    let mut h = vec!["t".to_string()];
    h.extend((0..12).map(|k| format!("q{k}")));
    h.extend((0..12).map(|k| format!("dq{k}")));
    h.join(",")
}

fn joints_row(t: f64) -> String {
    let mut r = vec![t.to_string()];
    r.extend(std::iter::repeat_n("0.1".to_string(), 24));
    r.join(",")
}

fn write_fixture(dir: &Path, radar: &str) {
    fs::write(dir.join("radar.csv"), radar).unwrap();
    fs::write(
        dir.join("imu.csv"),
        "t,wx,wy,wz,ax,ay,az\n0.0,0,0,0,0,0,9.81\n0.01,0,0,0.1,0,0,9.81\n",
    )
    .unwrap();
    fs::write(
        dir.join("joints.csv"),
        format!(
            "{}\n{}\n{}\n",
            joints_header(),
            joints_row(0.0),
            joints_row(0.0056)
        ),
    )
    .unwrap();
    fs::write(
        dir.join("contacts.csv"),
        "t,c0,c1,c2,c3\n0.0,1,0,0,1\n0.0056,1,1,1,1\n",
    )
    .unwrap();
}

const ONE_SCAN: &str = "t,x,y,z,doppler,intensity,scan_id\n\
    0.05,1,0,0,-0.5,10,0\n0.05,0,1,0,0.0,11,0\n0.05,1,1,0.2,-0.3,12,0\n";

#[test]
fn minimal_fixture_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), ONE_SCAN);
    let log = load_log(dir.path()).unwrap();
    assert_eq!(log.radar.len(), 1);
    assert_eq!(log.radar[0].points.len(), 3);
    assert_eq!(log.imu.len(), 2);
    assert_eq!(log.joints.len(), 2);
    assert_eq!(log.contacts.len(), 2);
    assert_eq!(log.contacts[0].in_contact, [true, false, false, true]);
    assert!(log.imu[0].orientation.is_none());
    assert!(log.ground_truth.is_none());
}

#[test]
fn unsorted_rows_report_line() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(
        dir.path(),
        "t,x,y,z,doppler,intensity,scan_id\n0.10,1,0,0,0,1,0\n0.05,1,0,0,0,1,1\n",
    );
    match load_log(dir.path()) {
        Err(LogError::Monotonicity { file, line }) => {
            assert_eq!(file, "radar.csv");
            assert_eq!(line, 3);
        }
        other => panic!("expected monotonicity error, got {other:?}"),
    }
}

#[test]
fn missing_column_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "t,x,y,z,intensity,scan_id\n0.05,1,0,0,1,0\n");
    match load_log(dir.path()) {
        Err(LogError::Schema { file, msg }) => {
            assert_eq!(file, "radar.csv");
            assert!(msg.contains("doppler"));
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_log(dir.path()), Err(LogError::Io { .. })));
}

#[test]
fn synthetic_log_round_trips() {
    let mut sc = presets::curved_walk();
    sc.duration = 3.0;
    sc.path.truncate(1);
    sc.imu.attitude_sigma = [0.01, 0.01, 0.05];
    sc.radar.doppler_sigma = 0.05;
    let log = synth_generate(&sc).unwrap().log;
    let dir = tempfile::tempdir().unwrap();
    write_log(&log, dir.path()).unwrap();
    let back = load_log(dir.path()).unwrap();

    let nonempty: Vec<_> = log.radar.iter().filter(|s| !s.points.is_empty()).collect();
    assert_eq!(back.radar.len(), nonempty.len());
    for (a, b) in nonempty.iter().zip(&back.radar) {
        assert_eq!(**a, *b);
    }
    assert_eq!(back.joints, log.joints);
    assert_eq!(back.contacts, log.contacts);
    assert_eq!(back.imu.len(), log.imu.len());
    for (a, b) in log.imu.iter().zip(&back.imu) {
        assert_eq!(a.timestamp, b.timestamp);
        assert_eq!(a.angular_velocity, b.angular_velocity);
        assert_eq!(a.linear_acceleration, b.linear_acceleration);
        let (ra, rb) = (a.orientation.unwrap(), b.orientation.unwrap());
        assert!(ra.angle_to(&rb) < 1e-12);
    }
    let (ga, gb) = (log.ground_truth.unwrap(), back.ground_truth.unwrap());
    assert_eq!(ga.len(), gb.len());
    for (a, b) in ga.poses.iter().zip(&gb.poses) {
        assert!((a.p - b.p).norm() < 1e-6);
        assert!(a.r.angle_to(&b.r) < 1e-8);
    }
    assert_eq!(
        back.meta.get("source").map(String::as_str),
        Some("synthetic")
    );
    assert_eq!(
        back.meta.get("doppler_sign").map(String::as_str),
        Some("positive_receding")
    );
}
