use emsynth_wasm::{detection, similarity, trace_pair, Knobs};

const KNOBS: Knobs = Knobs {
    noise: 0.05,
    jitter: 0.02,
    drift: 4,
    seed: 42,
};

#[test]
fn trace_pair_lengths_match() {
    let pair = trace_pair(KNOBS, 5).unwrap();
    assert_eq!(pair.real.len(), 620);
    assert_eq!(pair.synthetic.len(), 620);
    assert_eq!(pair.instructions.len(), 17);
    assert_eq!(pair.instructions[0].1, 0);
    let json = serde_json::to_value(&pair).unwrap();
    assert_eq!(json["samples_per_cycle"], 31);
}

#[test]
fn detection_separates_injections() {
    for synthetic in [false, true] {
        let run = detection(KNOBS, 120, synthetic, true).unwrap();
        assert_eq!(run.benign_p.len(), 120);
        assert_eq!(run.anomalous_p.len(), 60);
        assert!(run.auc > 0.9, "auc {}", run.auc);
        assert_eq!(run.roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(run.roc.last(), Some(&(1.0, 1.0)));
    }
}

#[test]
fn similarity_boxes() {
    let boxes = similarity(KNOBS, 60, 10).unwrap();
    let sets: Vec<_> = boxes.iter().map(|b| b.set.as_str()).collect();
    assert_eq!(
        sets,
        ["program_a", "program_b", "malicious_easy", "malicious_hard"]
    );
    assert!(boxes[1].summary.mean < boxes[0].summary.mean);
}

#[test]
fn invalid_knobs_are_errors() {
    let bad = Knobs { drift: 40, ..KNOBS };
    assert!(trace_pair(bad, 3).is_err());
    assert!(detection(bad, 40, false, false).is_err());
}
