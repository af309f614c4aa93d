// scratch: duty-cycled lambda + disc lr boost variants
use midg::autodiff::Tape;
use midg::data::{generate, SyntheticSpec};
use midg::moie::{DomainLabel, Moie, MoieConfig};
use midg::nn::ParamStore;
use midg::optim::Adam;
use midg::probe::{probe_accuracy, ProbeConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(seed: u64, epochs: usize, lambda: f32, regw: f32, duty: u64, disc_boost: f64) -> (f64, f64) {
    let spec = SyntheticSpec { n_samples: 2000, n_domains: 2, domain_shift_scale: 1.0, seed, ..SyntheticSpec::default() };
    let ds = generate::<f32>(&spec).unwrap();
    let d_in = spec.d_t + spec.d_a + spec.d_v;
    let d_repr = 16usize;
    let feats: Vec<Vec<f32>> = ds.samples.iter().map(|s| s.concat_features()).collect();
    let domains: Vec<bool> = ds.samples.iter().map(|s| s.domain == 1).collect();
    let labels: Vec<f32> = ds.samples.iter().map(|s| s.label).collect();
    let raw_acc = probe_accuracy(&feats, &domains, &ProbeConfig { seed: seed ^ 0xAB, ..ProbeConfig::default() }).unwrap();

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moie = Moie::new(&mut store, &mut rng, "moie", d_in, MoieConfig { k: 4, d_hidden: 16, d_repr, lambda: lambda as f64 }).unwrap();
    // per-param lr: boost discriminator
    let mut lr_scale = vec![1.0f32; store.flat_len()];
    if disc_boost != 1.0 {
        for id in store.ids() {
            if store.name(id).starts_with("moie.disc") {
                for v in &mut lr_scale[store.flat_range(id)] { *v = disc_boost as f32; }
            }
        }
    }
    let mut opt = Adam::new(1e-3, store.flat_len());
    let n = feats.len();
    let mut step = 0u64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1) * 7919);
        order.shuffle(&mut erng);
        for chunk in order.chunks(64) {
            let m = chunk.len();
            let mut x = Vec::with_capacity(m * d_in);
            let mut dl = Vec::with_capacity(m);
            let mut y = Vec::with_capacity(m);
            for &i in chunk {
                x.extend_from_slice(&feats[i]);
                dl.push(if domains[i] { DomainLabel::SimulatedOut } else { DomainLabel::InDomain });
                y.push(labels[i]);
            }
            let lam = if duty <= 1 || step % duty == duty - 1 { lambda } else { 0.0 };
            let mut tape = Tape::new(seed ^ (step + 1) * 0x9E37);
            step += 1;
            let xv = tape.leaf(&[m, d_in], &x).unwrap();
            let h = moie.forward(&mut tape, &store, xv).unwrap();
            let l_adv = moie.adversarial_loss_from_repr(&mut tape, &store, h, &dl, Some(lam)).unwrap();
            let y1 = moie.predict_in(&mut tape, &store, h).unwrap();
            let yv = tape.leaf(&[m, 1], &y).unwrap();
            let diff = tape.sub(yv, y1).unwrap();
            let sq = tape.square(diff);
            let l_reg = tape.mean_all(sq);
            let lw = tape.scale(l_reg, regw);
            let total = tape.add(l_adv, lw).unwrap();
            tape.backward(total).unwrap();
            let mut grads = vec![0.0f32; store.flat_len()];
            for id in store.ids() {
                if let Some(g) = tape.param_grad(id) {
                    grads[store.flat_range(id)].copy_from_slice(g);
                }
            }
            // apply disc lr boost by scaling grads AFTER... no: scale inside adam unsupported; emulate by scaling step via param-wise trick:
            // run adam on grads, then re-apply extra movement for boosted params is wrong. Instead: pre-scale m/v impossible here.
            // For this scratch: emulate per-param lr by scaling the GRADIENT and compensating? Adam normalizes, so gradient scaling is ~ineffective.
            // So disc_boost in this scratch is implemented as EXTRA adam steps on disc params only: skipped here; duty cycle is the mechanism under test.
            opt.step(store.flat_mut(), &grads);
        }
    }

    let mut reprs: Vec<Vec<f32>> = Vec::with_capacity(n);
    for chunk in feats.chunks(256) {
        let m = chunk.len();
        let mut x = Vec::with_capacity(m * d_in);
        for f in chunk { x.extend_from_slice(f); }
        let mut tape = Tape::new(0);
        let xv = tape.leaf(&[m, d_in], &x).unwrap();
        let h = moie.forward(&mut tape, &store, xv).unwrap();
        let hv = tape.values(h);
        for i in 0..m { reprs.push(hv[i * d_repr..(i + 1) * d_repr].to_vec()); }
    }
    let repr_acc = probe_accuracy(&reprs, &domains, &ProbeConfig { seed: seed ^ 0xCD, ..ProbeConfig::default() }).unwrap();
    (repr_acc, raw_acc)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(60);
    let lambda: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let regw: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let duty: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let t0 = std::time::Instant::now();
    let mut pass = 0;
    for seed in [0u64, 1, 2] {
        let (repr, raw) = run(seed, epochs, lambda, regw, duty, 1.0);
        let ok = repr <= 0.6 && raw >= 0.9;
        if ok { pass += 1; }
        println!("seed {seed}: repr {repr:.3} raw {raw:.3} {}", if ok { "PASS" } else { "FAIL" });
    }
    println!("{pass}/3 pass, elapsed {:.1?}", t0.elapsed());
}
