use vrfno::analysis::energy_distance;
use vrfno::config::ExperimentConfig;
use vrfno::data::{make_arbitrary_couplings, sample_target, DistributionSpec};
use vrfno::rng::RngStream;

fn doc_block() -> String {
    let doc = include_str!("../../../docs/config.md");
    let start = doc.find("```toml\n").expect("toml block") + "```toml\n".len();
    let end = start + doc[start..].find("```").expect("closing fence");
    doc[start..end].to_string()
}

#[test]
fn documented_defaults_match_the_code() {
    assert_eq!(ExperimentConfig::parse(&doc_block()).unwrap(), ExperimentConfig::default());
}

#[test]
fn emitted_config_is_accepted_verbatim() {
    let text = ExperimentConfig::default().to_toml().unwrap();
    let back = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(back.to_toml().unwrap(), text);
}

#[test]
fn energy_test_accepts_identical_laws() {
    let mut rng = RngStream::new(3);
    let a = rng.normal_tensor(2000, 2);
    let b = rng.normal_tensor(2000, 2);
    let r = energy_distance(&a, &b, 200, &mut rng.fork("perm")).unwrap();
    assert!(r.permutation_p_value > 0.05, "{r:?}");
}

#[test]
fn energy_test_rejects_shifted_laws() {
    let mut rng = RngStream::new(4);
    let a = rng.normal_tensor(500, 2);
    let spec = DistributionSpec::Gaussian {
        mean: vec![0.3, 0.0],
        var: vec![1.0, 1.0],
    };
    let b = sample_target(&spec, 500, &mut rng).unwrap();
    let r = energy_distance(&a, &b, 200, &mut rng.fork("perm")).unwrap();
    assert!(r.permutation_p_value < 0.01, "{r:?}");
}

#[test]
fn arbitrary_coupling_sources_are_standard_normal() {
    let mut rng = RngStream::new(5);
    let targets = sample_target(&DistributionSpec::default(), 2000, &mut rng).unwrap();
    let c = make_arbitrary_couplings(&targets, &mut rng).unwrap();
    let reference = rng.fork("ref").normal_tensor(2000, 2);
    let r = energy_distance(&c.x0, &reference, 200, &mut rng.fork("perm")).unwrap();
    assert!(r.permutation_p_value > 0.05, "{r:?}");
}
