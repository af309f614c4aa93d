//! Synthetic multimodal domain-shift data and the dataset text format.
//!
//! Each sample carries a real-valued sentiment label and three feature
//! vectors (text / audio / vision). Features are linear maps of the label
//! plus a shared nuisance vector, with per-domain mean shifts and per-domain
//! rotations of the additive noise; both per-domain effects scale with
//! `domain_shift_scale`, so scale 0 collapses all domains onto one
//! distribution.
//!
//! File format (UTF-8 text): line 1 is the header `MIDG1 d_t d_a d_v`; each
//! following line is `id split domain label` followed by `d_t + d_a + d_v`
//! space-separated decimal reals.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Length of the shared nuisance vector mixed into every modality.
const NUISANCE_DIM: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub n_domains: usize,
    pub domain_shift_scale: f64,
    pub label_lo: f64,
    pub label_hi: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 2000,
            d_t: 8,
            d_a: 6,
            d_v: 6,
            n_domains: 2,
            domain_shift_scale: 1.0,
            label_lo: -3.0,
            label_hi: 3.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_t == 0 || self.d_a == 0 || self.d_v == 0 {
            return Err(Error::Config("modality dims must be positive".into()));
        }
        if self.n_domains == 0 {
            return Err(Error::Config("n_domains must be >= 1".into()));
        }
        if self.label_lo >= self.label_hi {
            return Err(Error::Config(format!(
                "label range [{}, {}] is empty",
                self.label_lo, self.label_hi
            )));
        }
        if self.domain_shift_scale < 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config("scales must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<F> {
    pub id: String,
    pub split: Split,
    pub domain: usize,
    pub label: F,
    pub t: Vec<F>,
    pub a: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Scalar> Sample<F> {
    /// Concatenated `[t, a, v]` feature vector.
    pub fn concat_features(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.t.len() + self.a.len() + self.v.len());
        out.extend_from_slice(&self.t);
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.v);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub samples: Vec<Sample<F>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn split(&self, split: Split) -> Vec<&Sample<F>> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn domain_in(&self, domains: &[usize]) -> Vec<&Sample<F>> {
        self.samples
            .iter()
            .filter(|s| domains.contains(&s.domain))
            .collect()
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormalizes `I + scale * G` by modified Gram-Schmidt over columns.
/// At scale 0 this is exactly the identity.
fn rotation(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    let g_scale = 1.0 / (d as f64).sqrt();
    let mut m = normals(rng, d * d);
    for (i, v) in m.iter_mut().enumerate() {
        *v *= scale * g_scale;
        if i % d == i / d {
            *v += 1.0;
        }
    }
    // columns of m
    for c in 0..d {
        for prev in 0..c {
            let mut dot = 0.0;
            for r in 0..d {
                dot += m[r * d + c] * m[r * d + prev];
            }
            for r in 0..d {
                m[r * d + c] -= dot * m[r * d + prev];
            }
        }
        let norm = (0..d).map(|r| m[r * d + c] * m[r * d + c]).sum::<f64>().sqrt();
        for r in 0..d {
            m[r * d + c] /= norm;
        }
    }
    m
}

struct ModalityGen {
    d: usize,
    /// `[d, 1 + NUISANCE_DIM]` map from `[y; z]` to features.
    w: Vec<f64>,
    /// Per-domain mean shift, `[n_domains][d]`.
    shifts: Vec<Vec<f64>>,
    /// Per-domain noise rotation, `[n_domains][d * d]`.
    rotations: Vec<Vec<f64>>,
}

impl ModalityGen {
    fn feature(&self, domain: usize, y: f64, z: &[f64], noise: &[f64]) -> Vec<f64> {
        let k = 1 + NUISANCE_DIM;
        let rot = &self.rotations[domain];
        let shift = &self.shifts[domain];
        (0..self.d)
            .map(|i| {
                let mut v = self.w[i * k] * y;
                for (j, zj) in z.iter().enumerate() {
                    v += self.w[i * k + 1 + j] * zj;
                }
                for (j, nj) in noise.iter().enumerate() {
                    v += rot[i * self.d + j] * nj;
                }
                v + shift[i]
            })
            .collect()
    }
}

/// Deterministically generates a synthetic domain-shift dataset. Global
/// structure (maps, shifts, rotations) comes from the spec seed; each sample
/// draws from its own seeded stream, so the output is independent of
/// evaluation order.
pub fn generate<F: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<F>> {
    spec.validate()?;
    let mut grng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w_scale = 1.0 / ((1 + NUISANCE_DIM) as f64).sqrt();
    let dims = [spec.d_t, spec.d_a, spec.d_v];

    let gens: Vec<ModalityGen> = dims
        .iter()
        .map(|&d| {
            let w: Vec<f64> = normals(&mut grng, d * (1 + NUISANCE_DIM))
                .into_iter()
                .map(|v| v * w_scale)
                .collect();
            ModalityGen {
                d,
                w,
                shifts: Vec::new(),
                rotations: Vec::new(),
            }
        })
        .collect();
    let mut gens = gens;
    for dom in 0..spec.n_domains {
        let _ = dom;
        for g in &mut gens {
            let shift: Vec<f64> = normals(&mut grng, g.d)
                .into_iter()
                .map(|v| v * spec.domain_shift_scale)
                .collect();
            g.shifts.push(shift);
            g.rotations.push(rotation(&mut grng, g.d, spec.domain_shift_scale));
        }
    }

    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut srng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x5A11_0000 + i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let y = srng.gen_range(spec.label_lo..spec.label_hi);
        let z = normals(&mut srng, NUISANCE_DIM);
        let domain = i % spec.n_domains;
        let split = match i % 10 {
            0..=6 => Split::Train,
            7 => Split::Valid,
            _ => Split::Test,
        };
        let mut feats: Vec<Vec<F>> = Vec::with_capacity(3);
        for g in &gens {
            let noise: Vec<f64> = normals(&mut srng, g.d)
                .into_iter()
                .map(|v| v * spec.noise_std)
                .collect();
            feats.push(
                g.feature(domain, y, &z, &noise)
                    .into_iter()
                    .map(F::of)
                    .collect(),
            );
        }
        let v = feats.pop().unwrap();
        let a = feats.pop().unwrap();
        let t = feats.pop().unwrap();
        samples.push(Sample {
            id: format!("s{i:06}"),
            split,
            domain,
            label: F::of(y),
            t,
            a,
            v,
        });
    }

    Ok(Dataset {
        d_t: spec.d_t,
        d_a: spec.d_a,
        d_v: spec.d_v,
        samples,
    })
}

// ---- text format -----------------------------------------------------

pub fn format_dataset<F: Scalar>(ds: &Dataset<F>) -> String {
    let mut out = String::new();
    out.push_str(&format!("MIDG1 {} {} {}\n", ds.d_t, ds.d_a, ds.d_v));
    for s in &ds.samples {
        out.push_str(&format!("{} {} {} {}", s.id, s.split, s.domain, s.label));
        for v in s.t.iter().chain(&s.a).chain(&s.v) {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    out
}

/// Writes the dataset text format atomically (temp file + rename).
pub fn write_dataset<F: Scalar>(ds: &Dataset<F>, path: &Path) -> Result<()> {
    let text = format_dataset(ds);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_dataset<F: Scalar>(path: &Path) -> Result<Dataset<F>> {
    let file = std::fs::File::open(path)?;
    parse_dataset(BufReader::new(file))
}

pub fn parse_dataset<F: Scalar, R: Read>(reader: BufReader<R>) -> Result<Dataset<F>> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(Error::Parse {
            line: 1,
            msg: "empty file, expected 'MIDG1 d_t d_a d_v' header".into(),
        })?
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 || head[0] != "MIDG1" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad header '{header}', expected 'MIDG1 d_t d_a d_v'"),
        });
    }
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|d| *d > 0)
            .ok_or(Error::Parse {
                line: 1,
                msg: format!("bad dimension '{s}'"),
            })
    };
    let (d_t, d_a, d_v) = (parse_dim(head[1])?, parse_dim(head[2])?, parse_dim(head[3])?);
    let total = d_t + d_a + d_v;

    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 'id split domain label values...', got {} fields", tok.len()),
            });
        }
        let id = tok[0].to_string();
        if tok.len() != 4 + total {
            return Err(Error::Data(format!(
                "sample '{id}' (line {lineno}): expected {total} feature values, got {}",
                tok.len() - 4
            )));
        }
        let split = Split::from_str(tok[1]).map_err(|msg| Error::Parse { line: lineno, msg })?;
        let domain = tok[2].parse::<usize>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad domain '{}'", tok[2]),
        })?;
        let label = parse_value::<F>(tok[3], lineno)?;
        if !label.to64().is_finite() {
            return Err(Error::Data(format!(
                "sample '{id}' (line {lineno}): non-finite label"
            )));
        }
        let mut values = Vec::with_capacity(total);
        for s in &tok[4..] {
            let v = parse_value::<F>(s, lineno)?;
            if !v.to64().is_finite() {
                return Err(Error::Data(format!(
                    "sample '{id}' (line {lineno}): non-finite feature value"
                )));
            }
            values.push(v);
        }
        let v = values.split_off(d_t + d_a);
        let a = values.split_off(d_t);
        let t = values;
        samples.push(Sample {
            id,
            split,
            domain,
            label,
            t,
            a,
            v,
        });
    }
    Ok(Dataset {
        d_t,
        d_a,
        d_v,
        samples,
    })
}

fn parse_value<F: Scalar>(s: &str, lineno: usize) -> Result<F> {
    s.parse::<F>().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("bad numeric value '{s}'"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_stay_inside_the_range() {
        let spec = SyntheticSpec {
            n_samples: 500,
            ..SyntheticSpec::default()
        };
        let ds: Dataset<f64> = generate(&spec).unwrap();
        assert_eq!(ds.samples.len(), 500);
        for s in &ds.samples {
            assert!(s.label >= spec.label_lo && s.label <= spec.label_hi);
            assert_eq!(s.t.len(), spec.d_t);
            assert_eq!(s.a.len(), spec.d_a);
            assert_eq!(s.v.len(), spec.d_v);
        }
    }

    #[test]
    fn zero_shift_scale_gives_coincident_domain_means() {
        let spec = SyntheticSpec {
            n_samples: 10_000,
            n_domains: 2,
            domain_shift_scale: 0.0,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let ds: Dataset<f64> = generate(&spec).unwrap();
        let total = spec.d_t + spec.d_a + spec.d_v;
        let mut sums = [vec![0.0f64; total], vec![0.0f64; total]];
        let mut sumsq = vec![0.0f64; total];
        let mut counts = [0usize; 2];
        let mut grand = vec![0.0f64; total];
        for s in &ds.samples {
            let f = s.concat_features();
            counts[s.domain] += 1;
            for (j, v) in f.iter().enumerate() {
                sums[s.domain][j] += v;
                grand[j] += v;
                sumsq[j] += v * v;
            }
        }
        let n = ds.samples.len() as f64;
        for j in 0..total {
            let m0 = sums[0][j] / counts[0] as f64;
            let m1 = sums[1][j] / counts[1] as f64;
            let mean = grand[j] / n;
            let var = sumsq[j] / n - mean * mean;
            let se = (var * (1.0 / counts[0] as f64 + 1.0 / counts[1] as f64)).sqrt();
            assert!(
                (m0 - m1).abs() <= 2.0 * se,
                "coordinate {j}: |{m0} - {m1}| > 2 * {se}"
            );
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let spec = SyntheticSpec {
            n_samples: 100,
            seed: 7,
            ..SyntheticSpec::default()
        };
        let a: Dataset<f32> = generate(&spec).unwrap();
        let b: Dataset<f32> = generate(&spec).unwrap();
        assert_eq!(format_dataset(&a), format_dataset(&b));
    }

    #[test]
    fn write_read_roundtrip_is_identity() {
        let spec = SyntheticSpec {
            n_samples: 64,
            n_domains: 3,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let ds: Dataset<f32> = generate(&spec).unwrap();
        let dir = std::env::temp_dir().join(format!("midg-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.txt");
        write_dataset(&ds, &path).unwrap();
        let back: Dataset<f32> = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let spec = SyntheticSpec {
            n_samples: 4,
            ..SyntheticSpec::default()
        };
        let ds: Dataset<f32> = generate(&spec).unwrap();
        let text = format_dataset(&ds);
        let cut = &text[..text.len() * 2 / 3];
        let res = parse_dataset::<f32, _>(BufReader::new(cut.as_bytes()));
        assert!(matches!(res, Err(Error::Parse { .. }) | Err(Error::Data(_))));
    }

    #[test]
    fn wrong_vector_length_names_the_row() {
        let text = "MIDG1 8 4 6\nrow0 train 0 1.5 0.1 0.2 0.3 0.4 0.5 0.6 0.7\n";
        let res = parse_dataset::<f32, _>(BufReader::new(text.as_bytes()));
        match res {
            Err(Error::Data(msg)) => {
                assert!(msg.contains("row0"), "{msg}");
                assert!(msg.contains("18"), "{msg}");
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_is_a_parse_error_with_line() {
        let text = "MIDG1 1 1 1\nx0 train 0 oops 1 2 3\n";
        match parse_dataset::<f32, _>(BufReader::new(text.as_bytes())) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_is_a_parse_error() {
        let text = "NOPE 1 1 1\n";
        assert!(matches!(
            parse_dataset::<f32, _>(BufReader::new(text.as_bytes())),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn rotation_at_zero_scale_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = rotation(&mut rng, 5, 0.0);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(r[i * 5 + j], want);
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 6;
        let r = rotation(&mut rng, d, 1.5);
        for c1 in 0..d {
            for c2 in 0..d {
                let mut dot = 0.0;
                for row in 0..d {
                    dot += r[row * d + c1] * r[row * d + c2];
                }
                let want = if c1 == c2 { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }
}
