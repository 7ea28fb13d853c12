use muc_codec::config::Config;
use muc_codec::dataset::{CorpusManifest, Split};
use muc_codec::pipeline::extract_features;
use muc_codec::rvq::quantize;
fn main() {
    let mut cfg = Config::default();
    cfg.ckpt_dir = "/tmp/pilot4/run".into();
    cfg.corpus_dir = "/tmp/pilot4/corpus".into();
    let enc = muc_codec::muencoder::load::<f32>(&cfg.muencoder_path()).unwrap();
    let manifest = CorpusManifest::load(&cfg.manifest_path(), &cfg.corpus_dir).unwrap();
    for preset in ["low", "high"] {
        let books = muc_codec::rvq::load_codebooks::<f32>(&cfg.ckpt_dir.join(format!("rvq_{preset}.rvq"))).unwrap();
        for split in [Split::Train, Split::Test] {
            let feats = extract_features(&cfg, &enc, &manifest, split).unwrap();
            let mut total_in = 0.0; let mut total_out = 0.0; let mut n = 0usize;
            for (_, f) in &feats {
                let (_, _, energies) = quantize(f, &books).unwrap();
                let e_in: f64 = f.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / f.numel() as f64;
                total_in += e_in; total_out += energies.last().unwrap(); n += 1;
            }
            println!("{preset} {split:?}: mean feature energy {:.4}, residual after quant {:.4} ({:.3}% kept)",
                total_in / n as f64, total_out / n as f64, 100.0 * total_out / total_in);
        }
    }
}
