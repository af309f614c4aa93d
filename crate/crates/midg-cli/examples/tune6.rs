// scratch: ablation-ordering experiment for the leave-one-domain-out benchmark
use midg::data::{generate, SyntheticSpec};
use midg::pipeline::{ablate, ModelConfig, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let shift: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);
    let n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2400);
    let alpha: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let seeds: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(5);

    let spec = SyntheticSpec {
        n_samples: n,
        n_domains: 3,
        domain_shift_scale: shift,
        noise_std: noise,
        seed: 1234,
        ..SyntheticSpec::default()
    };
    let ds = generate::<f32>(&spec).unwrap();
    let mc = ModelConfig::default();
    let tc = TrainConfig { epochs, alpha, ..TrainConfig::default() };
    let seeds: Vec<u64> = (0..seeds).collect();
    let t0 = std::time::Instant::now();
    let rows = ablate(&ds, &mc, &tc, &[0, 1], 2, &seeds).unwrap();
    for r in &rows {
        let accs: Vec<String> = r.per_seed.iter().map(|m| format!("{:.3}", m.acc)).collect();
        println!(
            "moie {:<5} adapter {:<5} acc {:.4} corr {:+.3} f1 {:.3} mae {:.3}  per-seed {:?}",
            r.moie, r.adapter, r.acc, r.corr, r.f1, r.mae, accs
        );
    }
    let full = rows[3].acc;
    let no_ad = rows[1].acc;
    let no_mo = rows[2].acc;
    let off = rows[0].acc;
    println!(
        "ordering: full {:.4} >= no_adapter(moie-only) {:.4}: {} | full >= no_moie(adapter-only) {:.4}: {} | singles >= off {:.4}: {} {} | gap {:.4} >= 0.02: {}",
        full, no_ad, full >= no_ad, no_mo, full >= no_mo, off,
        no_ad >= off, no_mo >= off, full - off, full - off >= 0.02
    );
    println!("elapsed {:.1?}", t0.elapsed());
}
