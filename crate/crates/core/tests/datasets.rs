use std::path::Path;

use acopf_learn::acopf::feasibility_check;
use acopf_learn::cli::{gen_data, load_case, DatasetFile, GenDataOptions};
use acopf_learn::grid::Network;

fn all_feasible(net: &Network, data: &DatasetFile) {
    for (i, s) in data.records.iter().enumerate() {
        assert!(!s.softened);
        let rep = feasibility_check(net, &s.x, &s.y_c_star, s.y_s_star.as_ref().unwrap(), 1e-5).unwrap();
        assert!(rep.feasible, "record {i}: {:?}", rep.max_violation());
    }
}

#[test]
fn hundred_feasible_case30_samples() {
    let (net, id) = load_case("case30").unwrap();
    let opts = GenDataOptions { n_samples: 100, perturb_scale: 0.1, seed: 77, ..Default::default() };
    let (data, rejected) = gen_data(&net, &id, &opts).unwrap();
    assert_eq!(data.records.len(), 100);
    assert_eq!(data.header.n_drawn, 100 + rejected.len());
    all_feasible(&net, &data);
}

#[test]
fn checked_in_datasets_are_consistent() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/datasets");
    let (net, _) = load_case("case30").unwrap();
    for (name, n) in [("case30_train.jsonl", 1000), ("case30_test.jsonl", 250)] {
        let data = DatasetFile::read(&dir.join(name)).unwrap();
        data.check_network(&net).unwrap();
        assert_eq!(data.records.len(), n);
        assert_eq!(data.header.perturbation.scale, 0.1);
        all_feasible(&net, &data);
        let log = std::fs::read_to_string(dir.join(format!("{name}.rejected.jsonl"))).unwrap();
        assert_eq!(log.lines().count(), data.header.n_rejected);
    }
}
