use mobility_core::backbone::TaskMode;
use mobility_core::data::split::split_dataset;
use mobility_core::data::synthetic::{generate_synthetic, SyntheticSpec};
use mobility_core::htpp::default_domain_words;
use mobility_core::model::{MobilityModel, ModelConfig};
use mobility_core::train::{evaluate, fit_normalizer, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let task = match args.get(1).map(|s| s.as_str()) {
        Some("tul") => TaskMode::Tul,
        Some("tp") => TaskMode::Tp,
        _ => TaskMode::Lp,
    };
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.003);
    let layers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let dim: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    let (seqs, vocab) = generate_synthetic(&SyntheticSpec::new(50, 200, 2000, 7)).unwrap();
    let split = split_dataset(seqs.len(), 7, (6, 2, 2)).unwrap();
    let mut cfg = ModelConfig::with_dim(dim);
    cfg.vimn.r = 2;
    cfg.backbone.layers = layers;
    cfg.backbone.heads = 2;
    cfg.htpp.k = 2;
    cfg.heads.k_mix = 4;
    let mut model = MobilityModel::new(cfg, &vocab, &default_domain_words(), 7).unwrap();
    let tcfg = TrainConfig { max_epochs: epochs, batch_size: 32, patience: 10, seed: 7, learning_rate: lr, ..TrainConfig::new(task) };
    let t0 = std::time::Instant::now();
    let out = train(&mut model, &seqs, &split, &tcfg).unwrap();
    let norm = fit_normalizer(&seqs, &split);
    let train_rep = evaluate(&model, &seqs, &split.train, task, &norm).unwrap();
    println!("{:?} lr={lr} L={layers} d={dim}: {} epochs in {:.1?} ({:.2?}/ep), best_val={:.4} @ep{}", task, out.epochs_run, t0.elapsed(), t0.elapsed()/out.epochs_run.max(1) as u32, out.best_val_metric, out.best_epoch);
    println!("train: {}", train_rep.table());
    if task == TaskMode::Tp {
        let base = mobility_core::train::global_mean_baseline_mae(&seqs, &split, &split.train).unwrap();
        println!("baseline train MAE: {base:.2} min; need <= {:.2}", 0.8 * base);
    }
}
