use streamattn::attention::AttentionPath;
use streamattn::grn::{self, CellSample, GRNConfig};
use streamattn::io::{load_params, read_adjacency_csv, save_params, write_adjacency_csv};
use streamattn::rng::XorShift64Star;

fn setup(seed: u64) -> (GRNConfig, grn::GRNParams, CellSample) {
    let cfg = GRNConfig::new(16, 8, 2, 2, 1, 3).with_seed(seed);
    let params = grn::init_params(&cfg, seed).unwrap();
    let mut rng = XorShift64Star::new(seed + 1);
    let sample = CellSample::random_counts(16, 4, &mut rng);
    (cfg, params, sample)
}

#[test]
fn saved_params_reproduce_logits() {
    let (cfg, params, sample) = setup(31);
    let dir = tempfile::tempdir().unwrap();
    save_params(dir.path(), &cfg, &params).unwrap();
    let (cfg2, params2) = load_params(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(
        grn::grn_forward(&sample, &params2, &cfg2).unwrap(),
        grn::grn_forward(&sample, &params, &cfg).unwrap()
    );
}

#[test]
fn adjacency_round_trips_through_csv() {
    let (cfg, params, sample) = setup(32);
    let adj = grn::extract_adjacency(&sample, &params, &cfg, 1, 1).unwrap();
    let mut buf = Vec::new();
    write_adjacency_csv(&mut buf, &adj).unwrap();
    let back = read_adjacency_csv(buf.as_slice()).unwrap();
    assert_eq!(back.shape(), adj.shape());
    assert_eq!(back.data(), adj.data());
}

#[test]
fn deleting_an_absent_gene_changes_nothing() {
    let (cfg, params, mut sample) = setup(33);
    let cfg = cfg.check_mode();
    sample.multiplicities[5] = 0.0;
    let logits = grn::grn_forward(&sample, &params, &cfg).unwrap();
    let (c2, p2, s2) = grn::delete_gene(&cfg, &params, &sample, 5).unwrap();
    let cut = grn::grn_forward(&s2, &p2, &c2).unwrap();
    for (a, b) in cut.iter().zip(&logits) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn both_paths_give_the_same_logits() {
    let (cfg, params, sample) = setup(34);
    let naive = grn::grn_forward(&sample, &params, &cfg.clone().with_path(AttentionPath::Naive)).unwrap();
    let streamed = grn::grn_forward(&sample, &params, &cfg.with_path(AttentionPath::Streamed)).unwrap();
    for (a, b) in streamed.iter().zip(&naive) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }
}
