use branchformer::attention::AttentionKind;
use branchformer::encoder::{Architecture, EncoderConfig, MergeKind};
use branchformer::gradcheck::check_encoder;
fn main() {
    for seed in 0..20 {
    for a in [AttentionKind::Mhsa, AttentionKind::Fastformer] {
        for m in [MergeKind::Concat, MergeKind::WeightedAverage] {
            let mut c = EncoderConfig::toy(a, m);
            c.seed = seed;
            let r = check_encoder(&c, Architecture::Branchformer, 6, 1e-4).unwrap();
            println!("{seed} {a} {m} {:.3e} {}", r.max_rel_error(), r.failures().iter().map(|g| g.name.clone()).collect::<Vec<_>>().join(","));
        }
    }
    let mut c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::Concat);
    c.seed = seed;
    let r = check_encoder(&c, Architecture::Transformer, 6, 1e-4).unwrap();
    println!("{seed} transformer {:.3e}", r.max_rel_error());
    }
}
