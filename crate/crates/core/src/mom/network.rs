//! Per-timestep bottleneck encoder followed by a gated recurrent decoder.
//!
//! ```text
//! e_t = relu(We x_t + be)                          (B)
//! z_t = sigmoid(Wz e_t + Uz h_{t-1} + bz)          (D)
//! r_t = sigmoid(Wr e_t + Ur h_{t-1} + br)
//! n_t = tanh(Wn e_t + Un (r_t * h_{t-1}) + bn)
//! h_t = z_t * h_{t-1} + (1 - z_t) * n_t,  h_{-1} = 0
//! y_t = sigmoid(h_t)
//! ```
//!
//! All parameters live in one flat vector so the optimizer can treat them
//! uniformly; the named views below slice into it.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::domain::SensorSeries;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Additive guard on vector norms in the cosine similarity.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    EncoderWeight,
    EncoderBias,
    UpdateInput,
    UpdateHidden,
    UpdateBias,
    ResetInput,
    ResetHidden,
    ResetBias,
    CandidateInput,
    CandidateHidden,
    CandidateBias,
}

impl Tensor {
    pub const ALL: [Tensor; 11] = [
        Tensor::EncoderWeight,
        Tensor::EncoderBias,
        Tensor::UpdateInput,
        Tensor::UpdateHidden,
        Tensor::UpdateBias,
        Tensor::ResetInput,
        Tensor::ResetHidden,
        Tensor::ResetBias,
        Tensor::CandidateInput,
        Tensor::CandidateHidden,
        Tensor::CandidateBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::EncoderWeight => "encoder_weight",
            Tensor::EncoderBias => "encoder_bias",
            Tensor::UpdateInput => "update_input",
            Tensor::UpdateHidden => "update_hidden",
            Tensor::UpdateBias => "update_bias",
            Tensor::ResetInput => "reset_input",
            Tensor::ResetHidden => "reset_hidden",
            Tensor::ResetBias => "reset_bias",
            Tensor::CandidateInput => "candidate_input",
            Tensor::CandidateHidden => "candidate_hidden",
            Tensor::CandidateBias => "candidate_bias",
        }
    }

    /// `(rows, cols)`; biases are single-column.
    pub fn shape(self, d: usize, b: usize) -> (usize, usize) {
        match self {
            Tensor::EncoderWeight => (b, d),
            Tensor::EncoderBias => (b, 1),
            Tensor::UpdateInput | Tensor::ResetInput | Tensor::CandidateInput => (d, b),
            Tensor::UpdateHidden | Tensor::ResetHidden | Tensor::CandidateHidden => (d, d),
            Tensor::UpdateBias | Tensor::ResetBias | Tensor::CandidateBias => (d, 1),
        }
    }

    /// Inputs feeding each unit this tensor belongs to.
    pub fn fan_in(self, d: usize, b: usize) -> usize {
        match self {
            Tensor::EncoderWeight | Tensor::EncoderBias => d,
            _ => b + d,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    offsets: [usize; 12],
}

impl Layout {
    fn new(d: usize, b: usize) -> Self {
        let mut offsets = [0; 12];
        for (i, t) in Tensor::ALL.iter().enumerate() {
            let (r, c) = t.shape(d, b);
            offsets[i + 1] = offsets[i] + r * c;
        }
        Self { offsets }
    }

    fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t as usize;
        self.offsets[i]..self.offsets[i + 1]
    }

    fn total(&self) -> usize {
        self.offsets[11]
    }
}

/// Encoder/decoder parameters for inputs of dimension `D` through a bottleneck of `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomModel {
    d: usize,
    b: usize,
    params: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += m v` for row-major `m` of shape `(out.len(), v.len())`.
fn gemv(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += m^T v` for row-major `m` of shape `(v.len(), out.len())`.
fn gemv_t(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = out.len();
    for (vi, row) in v.iter().zip(m.chunks_exact(cols)) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
}

/// `g += u v^T`.
fn outer(g: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (ui, row) in u.iter().zip(g.chunks_exact_mut(cols)) {
        for (gij, vj) in row.iter_mut().zip(v) {
            *gij += ui * vj;
        }
    }
}

fn add(out: &mut [f64], v: &[f64]) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += x;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Guarded cosine similarity.
pub fn cos_sim(x: &[f64], y: &[f64]) -> f64 {
    dot(x, y) / ((norm(x) + NORM_GUARD) * (norm(y) + NORM_GUARD))
}

/// Per-timestep activations kept for back-propagation.
struct Step {
    a: Vec<f64>,
    e: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    y: Vec<f64>,
}

impl MomModel {
    fn check_dims(d: usize, b: usize) -> Result<()> {
        if b == 0 || b >= d {
            return Err(Error::Config(format!(
                "bottleneck must satisfy 0 < B < D, got B = {b}, D = {d}"
            )));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(d: usize, b: usize) -> Result<Self> {
        Self::check_dims(d, b)?;
        Ok(Self {
            d,
            b,
            params: vec![0.0; Layout::new(d, b).total()],
        })
    }

    /// Rebuilds a model from a flat parameter vector in [`Tensor::ALL`] order.
    pub fn from_params(d: usize, b: usize, params: Vec<f64>) -> Result<Self> {
        Self::check_dims(d, b)?;
        let expected = Layout::new(d, b).total();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "model parameter count".into(),
                expected,
                found: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                matrix: "model parameters",
                row: i,
                col: 0,
            });
        }
        Ok(Self { d, b, params })
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn bottleneck(&self) -> usize {
        self.b
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.params[Layout::new(self.d, self.b).range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let range = Layout::new(self.d, self.b).range(t);
        &mut self.params[range]
    }

    fn check_input(&self, seq: &SensorSeries) -> Result<()> {
        if seq.dims() != self.d {
            return Err(Error::DimensionMismatch {
                what: "sensor channels vs model input".into(),
                expected: self.d,
                found: seq.dims(),
            });
        }
        if seq.is_empty() {
            return Err(Error::Empty("sequence has no timesteps".into()));
        }
        Ok(())
    }

    fn forward(&self, seq: &SensorSeries) -> Vec<Step> {
        let (d, b) = (self.d, self.b);
        let p = |t| self.tensor(t);
        let mut h = vec![0.0; d];
        let mut x = vec![0.0; d];
        let mut steps = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            for (xi, v) in x.iter_mut().zip(seq.column(t)) {
                *xi = *v;
            }
            let mut a = p(Tensor::EncoderBias).to_vec();
            gemv(&mut a, p(Tensor::EncoderWeight), &x);
            let e: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();

            let mut z = p(Tensor::UpdateBias).to_vec();
            gemv(&mut z, p(Tensor::UpdateInput), &e);
            gemv(&mut z, p(Tensor::UpdateHidden), &h);
            z.iter_mut().for_each(|v| *v = sigmoid(*v));

            let mut r = p(Tensor::ResetBias).to_vec();
            gemv(&mut r, p(Tensor::ResetInput), &e);
            gemv(&mut r, p(Tensor::ResetHidden), &h);
            r.iter_mut().for_each(|v| *v = sigmoid(*v));

            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let mut n = p(Tensor::CandidateBias).to_vec();
            gemv(&mut n, p(Tensor::CandidateInput), &e);
            gemv(&mut n, p(Tensor::CandidateHidden), &rh);
            n.iter_mut().for_each(|v| *v = v.tanh());

            let h_next: Vec<f64> = (0..d).map(|i| z[i] * h[i] + (1.0 - z[i]) * n[i]).collect();
            let y = h_next.iter().map(|v| sigmoid(*v)).collect();
            debug_assert_eq!(e.len(), b);
            steps.push(Step {
                a,
                e,
                h_prev: std::mem::replace(&mut h, h_next),
                z,
                r,
                n,
                y,
            });
        }
        steps
    }

    /// Reconstruction of `seq`, same shape. Column `t` depends only on input
    /// columns `0..=t`.
    pub fn reconstruct(&self, seq: &SensorSeries) -> Result<SensorSeries> {
        self.check_input(seq)?;
        let steps = self.forward(seq);
        let mut out = ndarray::Array2::zeros((self.d, seq.len()));
        for (t, s) in steps.iter().enumerate() {
            for (i, v) in s.y.iter().enumerate() {
                out[[i, t]] = *v;
            }
        }
        SensorSeries::new(out, seq.dt())
    }

    /// Cosine objective of one sequence and, into `grad`, its gradient scaled
    /// by `scale`.
    fn accumulate(&self, seq: &SensorSeries, scale: f64, grad: &mut [f64]) -> f64 {
        let (d, b) = (self.d, self.b);
        let layout = Layout::new(d, b);
        let steps = self.forward(seq);
        let t_len = steps.len() as f64;
        let mut loss = 0.0;

        let p = |t| self.tensor(t);
        let mut dh_next = vec![0.0; d];
        let mut x = vec![0.0; d];
        for t in (0..steps.len()).rev() {
            let s = &steps[t];
            for (xi, v) in x.iter_mut().zip(seq.column(t)) {
                *xi = *v;
            }
            // d(-cos)/dy
            let (nx, ny_raw) = (norm(&x), norm(&s.y));
            let (gx, gy) = (nx + NORM_GUARD, ny_raw + NORM_GUARD);
            let xy = dot(&x, &s.y);
            loss -= xy / (gx * gy);
            let coef = -scale / t_len;
            let mut dh: Vec<f64> = (0..d)
                .map(|i| {
                    let dy_norm = if ny_raw > 0.0 { s.y[i] / ny_raw } else { 0.0 };
                    let dc = x[i] / (gx * gy) - xy / (gx * gy * gy) * dy_norm;
                    coef * dc * s.y[i] * (1.0 - s.y[i])
                })
                .collect();
            add(&mut dh, &dh_next);

            let mut dh_prev: Vec<f64> = dh.iter().zip(&s.z).map(|(g, z)| g * z).collect();
            let dz_pre: Vec<f64> = (0..d)
                .map(|i| dh[i] * (s.h_prev[i] - s.n[i]) * s.z[i] * (1.0 - s.z[i]))
                .collect();
            let dn_pre: Vec<f64> = (0..d)
                .map(|i| dh[i] * (1.0 - s.z[i]) * (1.0 - s.n[i] * s.n[i]))
                .collect();

            let rh: Vec<f64> = s.r.iter().zip(&s.h_prev).map(|(a, b)| a * b).collect();
            let mut drh = vec![0.0; d];
            gemv_t(&mut drh, p(Tensor::CandidateHidden), &dn_pre);
            let dr_pre: Vec<f64> = (0..d).map(|i| drh[i] * s.h_prev[i] * s.r[i] * (1.0 - s.r[i])).collect();
            for i in 0..d {
                dh_prev[i] += drh[i] * s.r[i];
            }
            gemv_t(&mut dh_prev, p(Tensor::UpdateHidden), &dz_pre);
            gemv_t(&mut dh_prev, p(Tensor::ResetHidden), &dr_pre);

            let mut de = vec![0.0; b];
            gemv_t(&mut de, p(Tensor::UpdateInput), &dz_pre);
            gemv_t(&mut de, p(Tensor::ResetInput), &dr_pre);
            gemv_t(&mut de, p(Tensor::CandidateInput), &dn_pre);
            let da: Vec<f64> = de
                .iter()
                .zip(&s.a)
                .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                .collect();

            let g = |tensor| layout.range(tensor);
            outer(&mut grad[g(Tensor::UpdateInput)], &dz_pre, &s.e);
            outer(&mut grad[g(Tensor::UpdateHidden)], &dz_pre, &s.h_prev);
            add(&mut grad[g(Tensor::UpdateBias)], &dz_pre);
            outer(&mut grad[g(Tensor::ResetInput)], &dr_pre, &s.e);
            outer(&mut grad[g(Tensor::ResetHidden)], &dr_pre, &s.h_prev);
            add(&mut grad[g(Tensor::ResetBias)], &dr_pre);
            outer(&mut grad[g(Tensor::CandidateInput)], &dn_pre, &s.e);
            outer(&mut grad[g(Tensor::CandidateHidden)], &dn_pre, &rh);
            add(&mut grad[g(Tensor::CandidateBias)], &dn_pre);
            outer(&mut grad[g(Tensor::EncoderWeight)], &da, &x);
            add(&mut grad[g(Tensor::EncoderBias)], &da);

            dh_next = dh_prev;
        }
        loss / t_len
    }

    /// Mean cosine objective over `sequences` and its gradient with respect to
    /// [`MomModel::params`].
    pub fn loss_and_gradient(&self, sequences: &[SensorSeries]) -> Result<(f64, Vec<f64>)> {
        if sequences.is_empty() {
            return Err(Error::Empty("no sequences to evaluate".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / sequences.len() as f64;
        let mut loss = 0.0;
        for seq in sequences {
            self.check_input(seq)?;
            loss += self.accumulate(seq, scale, &mut grad);
        }
        Ok((loss * scale, grad))
    }

    /// Mean cosine objective over `sequences`.
    pub fn loss(&self, sequences: &[SensorSeries]) -> Result<f64> {
        if sequences.is_empty() {
            return Err(Error::Empty("no sequences to evaluate".into()));
        }
        let mut total = 0.0;
        for seq in sequences {
            total += cosine_objective(seq, &self.reconstruct(seq)?)?;
        }
        Ok(total / sequences.len() as f64)
    }
}

/// Weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, deterministic in `seed`.
pub fn init_model(d: usize, bottleneck: usize, seed: u64) -> Result<MomModel> {
    let mut model = MomModel::zeros(d, bottleneck)?;
    let mut rng = substream(seed, "mom-init", 0);
    for t in Tensor::ALL {
        let bound = 1.0 / (t.fan_in(d, bottleneck) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in model.tensor_mut(t) {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(model)
}

/// `-(1/T) sum_t cos(x_t, xhat_t)`.
pub fn cosine_objective(original: &SensorSeries, reconstruction: &SensorSeries) -> Result<f64> {
    if original.data().dim() != reconstruction.data().dim() {
        return Err(Error::DimensionMismatch {
            what: "reconstruction shape".into(),
            expected: original.len(),
            found: reconstruction.len(),
        });
    }
    if original.is_empty() {
        return Err(Error::Empty("sequence has no timesteps".into()));
    }
    let t = original.len();
    let mut x = vec![0.0; original.dims()];
    let mut y = vec![0.0; original.dims()];
    let mut total = 0.0;
    for i in 0..t {
        x.iter_mut().zip(original.column(i)).for_each(|(a, b)| *a = *b);
        y.iter_mut().zip(reconstruction.column(i)).for_each(|(a, b)| *a = *b);
        total += cos_sim(&x, &y);
    }
    Ok(-total / t as f64)
}

/// Uniform jitter helper used by tests and benches to build random models.
pub fn random_model<R: Rng + ?Sized>(d: usize, b: usize, scale: f64, rng: &mut R) -> Result<MomModel> {
    let mut model = MomModel::zeros(d, b)?;
    for w in model.params_mut() {
        *w = rng.random_range(-scale..scale);
    }
    Ok(model)
}
