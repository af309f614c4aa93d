//! Probe classifiers: small freshly trained binary classifiers used to
//! measure how much domain information survives in a representation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::moie::binary_cross_entropy;
use crate::nn::{Linear, Mlp, ParamStore};
use crate::optim::Adam;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    /// Hidden width; 0 trains a purely linear (logistic-regression) probe.
    pub d_hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction used for training; the rest is the held-out accuracy set.
    /// 1.0 evaluates on the training data itself.
    pub train_frac: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            d_hidden: 16,
            epochs: 40,
            batch: 64,
            lr: 1e-2,
            seed: 0,
            train_frac: 0.8,
        }
    }
}

enum ProbeNet {
    Linear(Linear),
    Mlp(Mlp),
}

/// Trains a fresh probe on `(features, labels)` and returns its held-out
/// accuracy at the 0.5 threshold.
pub fn probe_accuracy<F: Scalar>(
    features: &[Vec<F>],
    labels: &[bool],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Contract {
            op: "probe",
            msg: format!("{} features vs {} labels", features.len(), labels.len()),
        });
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Contract {
            op: "probe",
            msg: "ragged feature vectors".into(),
        });
    }
    if !(0.0..=1.0).contains(&cfg.train_frac) {
        return Err(Error::Config(format!("train_frac {} outside [0, 1]", cfg.train_frac)));
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_train = ((features.len() as f64) * cfg.train_frac).round() as usize;
    let n_train = n_train.clamp(1, features.len());
    let (train_idx, eval_idx) = order.split_at(n_train);
    let eval_idx: Vec<usize> = if eval_idx.is_empty() {
        train_idx.to_vec()
    } else {
        eval_idx.to_vec()
    };

    let mut store = ParamStore::<F>::new();
    let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E0B);
    let net = if cfg.d_hidden == 0 {
        ProbeNet::Linear(Linear::new(&mut store, &mut prng, "probe", d, 1))
    } else {
        ProbeNet::Mlp(Mlp::new(&mut store, &mut prng, "probe", d, cfg.d_hidden, 1))
    };

    let mut opt = Adam::new(cfg.lr, store.flat_len());
    let mut train_order: Vec<usize> = train_idx.to_vec();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1));
        train_order.shuffle(&mut erng);
        for chunk in train_order.chunks(cfg.batch) {
            let n = chunk.len();
            let mut x = Vec::with_capacity(n * d);
            let mut y = Vec::with_capacity(n);
            for &i in chunk {
                x.extend_from_slice(&features[i]);
                y.push(if labels[i] { F::one() } else { F::zero() });
            }
            let mut tape = Tape::new(step);
            step += 1;
            let xv = tape.leaf(&[n, d], &x)?;
            let logits = match &net {
                ProbeNet::Linear(l) => l.forward(&mut tape, &store, xv)?,
                ProbeNet::Mlp(m) => m.forward(&mut tape, &store, xv)?,
            };
            let probs = tape.sigmoid(logits);
            let targets = tape.leaf(&[n, 1], &y)?;
            let loss = binary_cross_entropy(&mut tape, probs, targets)?;
            tape.backward(loss)?;
            let mut grads = vec![F::zero(); store.flat_len()];
            for id in store.ids() {
                if let Some(g) = tape.param_grad(id) {
                    grads[store.flat_range(id)].copy_from_slice(g);
                }
            }
            opt.step(store.flat_mut(), &grads);
        }
    }

    // held-out accuracy
    let n = eval_idx.len();
    let mut x = Vec::with_capacity(n * d);
    for &i in &eval_idx {
        x.extend_from_slice(&features[i]);
    }
    let mut tape = Tape::new(u64::MAX);
    let xv = tape.leaf(&[n, d], &x)?;
    let logits = match &net {
        ProbeNet::Linear(l) => l.forward(&mut tape, &store, xv)?,
        ProbeNet::Mlp(m) => m.forward(&mut tape, &store, xv)?,
    };
    let probs = tape.sigmoid(logits);
    let mut correct = 0usize;
    for (row, &i) in eval_idx.iter().enumerate() {
        let p = tape.values(probs)[row].to64();
        if (p >= 0.5) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(sep: f64, n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let lab = i % 2 == 1;
            let center = if lab { sep } else { -sep };
            xs.push(
                (0..4)
                    .map(|_| (center + rng.gen_range(-1.0..1.0)) as f32)
                    .collect(),
            );
            ys.push(lab);
        }
        (xs, ys)
    }

    #[test]
    fn separable_blobs_probe_high() {
        let (xs, ys) = blobs(2.0, 400, 1);
        let acc = probe_accuracy(&xs, &ys, &ProbeConfig::default()).unwrap();
        assert!(acc > 0.95, "acc = {acc}");
    }

    #[test]
    fn unseparable_blobs_probe_near_chance() {
        let (xs, ys) = blobs(0.0, 400, 2);
        let acc = probe_accuracy(&xs, &ys, &ProbeConfig::default()).unwrap();
        assert!(acc < 0.65, "acc = {acc}");
    }

    #[test]
    fn linear_probe_works_too() {
        let (xs, ys) = blobs(2.0, 400, 3);
        let cfg = ProbeConfig {
            d_hidden: 0,
            ..ProbeConfig::default()
        };
        let acc = probe_accuracy(&xs, &ys, &cfg).unwrap();
        assert!(acc > 0.95, "acc = {acc}");
    }
}
