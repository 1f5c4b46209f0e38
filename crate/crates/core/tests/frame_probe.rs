//! A softmax probe on single frames: chance on the motion task, near
//! perfect on the appearance task.

use sth::data::{frame_probe_accuracy, Dataset, SynthConfig};

fn small(cfg: SynthConfig) -> SynthConfig {
    SynthConfig { resolution: 24, object_size: 8, frames_total: 8, ..cfg }
}

#[test]
fn motion_frames_carry_no_class_signal() {
    let train = Dataset::synth(&small(SynthConfig::motion(100, 11))).unwrap();
    let test = Dataset::synth(&small(SynthConfig::motion(250, 12))).unwrap();
    let acc = frame_probe_accuracy(&train, &test, 20, 0.005, 13);
    println!("motion probe top-1 {acc:.4}");
    assert!((acc - 0.25).abs() <= 0.05, "{acc}");
}

#[test]
fn appearance_frames_are_separable() {
    let train = Dataset::synth(&small(SynthConfig::appearance(100, 11))).unwrap();
    let test = Dataset::synth(&small(SynthConfig::appearance(250, 12))).unwrap();
    let acc = frame_probe_accuracy(&train, &test, 20, 0.005, 13);
    println!("appearance probe top-1 {acc:.4}");
    assert!(acc > 0.9, "{acc}");
}
