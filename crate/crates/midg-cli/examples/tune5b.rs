// scratch: instrumented adversarial dynamics
use midg::autodiff::Tape;
use midg::data::{generate, SyntheticSpec};
use midg::moie::{DomainLabel, Moie, MoieConfig};
use midg::nn::ParamStore;
use midg::optim::Adam;
use midg::probe::{probe_accuracy, ProbeConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(60);
    let lambda: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let regw: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let d_repr: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let warmup: bool = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(false);
    let seed = 0u64;

    let spec = SyntheticSpec { n_samples: 2000, n_domains: 2, domain_shift_scale: 1.0, seed, ..SyntheticSpec::default() };
    let ds = generate::<f32>(&spec).unwrap();
    let d_in = spec.d_t + spec.d_a + spec.d_v;
    let feats: Vec<Vec<f32>> = ds.samples.iter().map(|s| s.concat_features()).collect();
    let domains: Vec<bool> = ds.samples.iter().map(|s| s.domain == 1).collect();
    let labels: Vec<f32> = ds.samples.iter().map(|s| s.label).collect();

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moie = Moie::new(&mut store, &mut rng, "moie", d_in, MoieConfig { k: 4, d_hidden: 16, d_repr, lambda: lambda as f64 }).unwrap();
    let mut opt = Adam::new(1e-3, store.flat_len());
    let n = feats.len();
    let mut step = 0u64;
    let total_steps = (epochs * n.div_ceil(64)) as f64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1) * 7919);
        order.shuffle(&mut erng);
        let mut bce_sum = 0.0f64;
        let mut disc_correct = 0usize;
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
            let lam = if warmup { lambda * (2.0 / (1.0 + (-10.0 * (step as f64 / total_steps)).exp()) - 1.0) as f32 } else { lambda };
            let mut tape = Tape::new(seed ^ (step + 1) * 0x9E37);
            step += 1;
            let xv = tape.leaf(&[m, d_in], &x).unwrap();
            let h = moie.forward(&mut tape, &store, xv).unwrap();
            let hr = tape.grad_reverse(h, lam);
            let probs = moie.discriminate(&mut tape, &store, hr).unwrap();
            // track disc accuracy on current reprs
            for (row, &i) in chunk.iter().enumerate() {
                let p = tape.values(probs)[row];
                if (p >= 0.5) == domains[i] { disc_correct += 1; }
            }
            let targets: Vec<f32> = dl.iter().map(|l| match l { DomainLabel::SimulatedOut => 1.0, DomainLabel::InDomain => 0.0 }).collect();
            let tv = tape.leaf(&[m, 1], &targets).unwrap();
            let l_adv = midg::moie::binary_cross_entropy(&mut tape, probs, tv).unwrap();
            bce_sum += tape.values(l_adv)[0] as f64 * m as f64;
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
            opt.step(store.flat_mut(), &grads);
        }
        if epoch % 10 == 0 || epoch == epochs - 1 {
            println!("epoch {epoch:3}: bce {:.4}, disc acc on current h {:.3}", bce_sum / n as f64, disc_correct as f64 / n as f64);
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
    println!("fresh probe on reprs: {repr_acc:.3}");
}
