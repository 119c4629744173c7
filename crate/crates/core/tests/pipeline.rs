use y12_core::boxes::{coco_thresholds, mean_average_precision, nms};
use y12_core::data::{read_dataset, synth_dataset, write_dataset, SynthConfig};
use y12_core::targets::{assign_targets, decode, encode};

#[test]
fn encoded_ground_truth_scores_perfect_map() {
    let samples = synth_dataset(80, &SynthConfig::new(64), 11);
    // keep images whose boxes land in distinct cells
    let gts: Vec<_> = samples
        .iter()
        .map(|s| s.labels.clone())
        .filter(|l| {
            let t = assign_targets::<f64>(std::slice::from_ref(l), 3, 64);
            t.iter().map(|s| s.positive_cells()).sum::<usize>() == l.len()
        })
        .collect();
    assert!(gts.len() > 60);
    let preds = encode::<f32>(&gts, 3, 64, 12.0);
    let dets: Vec<_> = decode(&preds, 64, 0.01).iter().map(|d| nms(d, 0.5)).collect();
    let r = mean_average_precision(&dets, &gts, 3, &coco_thresholds());
    assert!((r.map50 - 1.0).abs() < 1e-9, "{}", r.map50);
    assert!(r.map50_95 > 0.999, "{}", r.map50_95);
}

#[test]
fn dataset_survives_disk_round_trip() {
    let samples = synth_dataset(5, &SynthConfig::new(64), 2);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.image.data(), b.image.data());
        for (x, y) in a.labels.iter().zip(&b.labels) {
            assert_eq!(x.class_id, y.class_id);
            assert!((x.cx - y.cx).abs() < 1e-6 && (x.w - y.w).abs() < 1e-6);
        }
    }
}
