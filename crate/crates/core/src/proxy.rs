//! Soft-label proxies and the divergence used to compare them.
//!
//! A proxy is the raw logit output of a node's model on the shared global
//! dataset. Two proxies are compared row by row: each row is softmaxed and the
//! per-sample KL divergences are averaged over the dataset.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Anything that maps a feature row to a vector of class logits.
pub trait Classifier {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Writes the raw logits for `x` into `out` (`out.len() == num_classes()`).
    fn logits_into(&self, x: &[f64], out: &mut [f64]);
}

/// The shared unlabeled dataset every node evaluates its model on.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDataset {
    features: Matrix,
}

impl GlobalDataset {
    pub fn new(features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidInput(
                "global dataset needs at least one sample".into(),
            ));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("global dataset features"));
        }
        Ok(GlobalDataset { features })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// `G x C` logit matrix of one model on the global dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Proxy {
    logits: Matrix,
}

impl Proxy {
    pub fn new(logits: Matrix) -> Result<Self> {
        if !logits.is_finite() {
            return Err(Error::Numeric("proxy logits"));
        }
        Ok(Proxy { logits })
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn samples(&self) -> usize {
        self.logits.rows()
    }

    pub fn classes(&self) -> usize {
        self.logits.cols()
    }

    /// Size of the serialized block: `16 + 8 * G * C`.
    pub fn byte_len(&self) -> usize {
        self.logits.block_len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.logits.to_block_bytes()
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let m = Matrix::read_block(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Decode(format!(
                "{} trailing bytes after proxy",
                bytes.len()
            )));
        }
        Proxy::new(m)
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self) -> Matrix {
        let mut out = Matrix::zeros(self.samples(), self.classes());
        for i in 0..self.samples() {
            softmax_into(self.logits.row(i), out.row_mut(i));
        }
        out
    }
}

/// Serialized proxy size for `samples` rows of `classes` logits.
pub fn proxy_bytes(samples: usize, classes: usize) -> usize {
    16 + 8 * samples * classes
}

/// Non-negative divergence in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityValue(f64);

impl SimilarityValue {
    pub fn new(theta: f64) -> Result<Self> {
        if !theta.is_finite() || theta < 0.0 {
            return Err(Error::Numeric("similarity value"));
        }
        Ok(SimilarityValue(theta))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

/// Max-subtracted softmax at temperature 1.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Logits of `model` on every global sample.
pub fn compute_proxy<M: Classifier + ?Sized>(model: &M, data: &GlobalDataset) -> Result<Proxy> {
    if model.input_dim() != data.dim() {
        return Err(shape_err(
            format!("model input dim {}", model.input_dim()),
            format!("data dim {}", data.dim()),
        ));
    }
    if model.num_classes() < 2 {
        return Err(shape_err("at least 2 classes", model.num_classes()));
    }
    let mut logits = Matrix::zeros(data.len(), model.num_classes());
    for i in 0..data.len() {
        model.logits_into(data.features().row(i), logits.row_mut(i));
    }
    Proxy::new(logits)
}

fn row_kl(p_logits: &[f64], q_logits: &[f64], p: &mut [f64], q: &mut [f64]) -> f64 {
    softmax_into(p_logits, p);
    softmax_into(q_logits, q);
    p.iter()
        .zip(q.iter())
        .map(|(&a, &b)| {
            let a = a.max(PROB_FLOOR);
            let b = b.max(PROB_FLOOR);
            a * (a.ln() - b.ln())
        })
        .sum()
}

/// Mean over global samples of `KL(softmax(p_i) || softmax(q_i))`.
///
/// Flooring can leave the sum a few ulps below zero; the result is clamped at 0.
pub fn kl_divergence(p: &Proxy, q: &Proxy) -> Result<SimilarityValue> {
    let (pl, ql) = (p.logits(), q.logits());
    if pl.rows() != ql.rows() || pl.cols() != ql.cols() {
        return Err(shape_err(
            format!("{}x{}", pl.rows(), pl.cols()),
            format!("{}x{}", ql.rows(), ql.cols()),
        ));
    }
    if pl.rows() == 0 {
        return Err(Error::InvalidInput("empty proxy".into()));
    }
    let c = pl.cols();
    let mut pb = vec![0.0; c];
    let mut qb = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..pl.rows() {
        total += row_kl(pl.row(i), ql.row(i), &mut pb, &mut qb);
    }
    let mean = total / pl.rows() as f64;
    if !mean.is_finite() {
        return Err(Error::Numeric("kl divergence"));
    }
    SimilarityValue::new(mean.max(0.0))
}

/// Symmetrized divergence `(KL(p||q) + KL(q||p)) / 2`.
pub fn pair_similarity(p: &Proxy, q: &Proxy) -> Result<SimilarityValue> {
    let forward = kl_divergence(p, q)?.get();
    let reverse = kl_divergence(q, p)?.get();
    SimilarityValue::new((forward + reverse) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Linear {
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
    }

    impl Classifier for Linear {
        fn input_dim(&self) -> usize {
            self.w[0].len()
        }
        fn num_classes(&self) -> usize {
            self.w.len()
        }
        fn logits_into(&self, x: &[f64], out: &mut [f64]) {
            for (k, o) in out.iter_mut().enumerate() {
                *o = self.b[k] + self.w[k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }

    fn proxy(rows: &[Vec<f64>]) -> Proxy {
        Proxy::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    // softmax(0, 0) = (0.5, 0.5); softmax(ln 9, 0) = (0.9, 0.1).
    fn half_half() -> Proxy {
        proxy(&[vec![0.0, 0.0]])
    }
    fn nine_tenths() -> Proxy {
        proxy(&[vec![9f64.ln(), 0.0]])
    }

    // Reference values evaluated with 40-digit arithmetic.
    const KL_FORWARD: f64 = 0.510_825_623_765_990_7;
    const KL_REVERSE: f64 = 0.368_064_207_168_497_1;
    const PAIR: f64 = 0.439_444_915_467_243_9;

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Linear {
            w: vec![vec![0.0; 3]; 4],
            b: vec![0.0; 4],
        };
        let data = GlobalDataset::new(
            Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 9.0]]).unwrap(),
        )
        .unwrap();
        let p = compute_proxy(&m, &data).unwrap();
        assert!(p.logits().as_slice().iter().all(|&v| v == 0.0));
        let probs = p.probabilities();
        assert!(probs.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn linear_logits_match_hand_product() {
        let m = Linear {
            w: vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            b: vec![0.25, -1.0],
        };
        let data = GlobalDataset::new(Matrix::from_rows(&[vec![3.0, -1.0]]).unwrap()).unwrap();
        let p = compute_proxy(&m, &data).unwrap();
        // [1*3 + 2*-1 + 0.25, -1*3 + 0.5*-1 - 1]
        assert_eq!(p.logits().row(0), &[1.25, -4.5]);
        assert_eq!(compute_proxy(&m, &data).unwrap(), p);
    }

    #[test]
    fn proxy_rejects_dimension_mismatch() {
        let m = Linear {
            w: vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            b: vec![0.0, 0.0],
        };
        let data = GlobalDataset::new(Matrix::from_rows(&[vec![3.0, -1.0, 2.0]]).unwrap()).unwrap();
        assert!(matches!(compute_proxy(&m, &data), Err(Error::Shape { .. })));
    }

    #[test]
    fn kl_reference_values() {
        let (p, q) = (half_half(), nine_tenths());
        assert_eq!(kl_divergence(&p, &p).unwrap().get(), 0.0);
        assert!((kl_divergence(&p, &q).unwrap().get() - KL_FORWARD).abs() < 1e-12);
        assert!((kl_divergence(&q, &p).unwrap().get() - KL_REVERSE).abs() < 1e-12);
        assert!((pair_similarity(&p, &q).unwrap().get() - PAIR).abs() < 1e-12);
        assert_eq!(pair_similarity(&p, &p).unwrap().get(), 0.0);
    }

    #[test]
    fn kl_averages_over_samples() {
        let p = proxy(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let q = proxy(&[vec![9f64.ln(), 0.0], vec![3.0, 3.0]]);
        assert!((kl_divergence(&p, &q).unwrap().get() - KL_FORWARD / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_errors() {
        let p = half_half();
        let wide = proxy(&[vec![0.0, 0.0, 0.0]]);
        assert!(matches!(kl_divergence(&p, &wide), Err(Error::Shape { .. })));
        assert!(matches!(
            Proxy::new(Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let p = proxy(&[vec![1000.0, -1000.0]]);
        let q = proxy(&[vec![-1000.0, 1000.0]]);
        let v = kl_divergence(&p, &q).unwrap().get();
        assert!(v.is_finite() && v > 20.0);
    }

    #[test]
    fn bytes_round_trip_with_fixed_size() {
        let p = proxy(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.0, 3.5]]);
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), proxy_bytes(2, 3));
        assert_eq!(Proxy::from_bytes(&bytes).unwrap(), p);
    }

    fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..5, 2usize..6).prop_flat_map(|(g, c)| {
            (
                prop::collection::vec(-30.0f64..30.0, g * c),
                prop::collection::vec(-30.0f64..30.0, g * c),
            )
                .prop_map(move |(a, b)| {
                    let mut a = a;
                    a.push(g as f64);
                    let mut b = b;
                    b.push(c as f64);
                    (a, b)
                })
        })
    }

    fn unpack(v: &[f64], g: usize, c: usize) -> Proxy {
        Proxy::new(Matrix::from_vec(g, c, v[..g * c].to_vec()).unwrap()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn kl_is_nonnegative_and_zero_on_identity((a, b) in logits_strategy()) {
            let g = a[a.len() - 1] as usize;
            let c = b[b.len() - 1] as usize;
            let p = unpack(&a, g, c);
            let q = unpack(&b, g, c);
            prop_assert!(kl_divergence(&p, &q).unwrap().get() >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap().get(), 0.0);
            let s1 = pair_similarity(&p, &q).unwrap().get();
            let s2 = pair_similarity(&q, &p).unwrap().get();
            prop_assert_eq!(s1.to_bits(), s2.to_bits());
            for row in p.probabilities().iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
