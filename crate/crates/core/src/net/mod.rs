//! Fully connected velocity network `v_theta(x_t, t, c)` with hand-written backward pass.
//!
//! Input features are `[x_t, sin/cos time features, class embedding]`; hidden layers use SiLU.
//! All parameters live in one flat `Vec<f64>` so that snapshots, gradients and the Adam state
//! share a single layout.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub time_features: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: vec![128, 128, 128],
            num_classes: 8,
            embed_dim: 8,
            time_features: 16,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Arch("dim must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Arch("at least one hidden layer is required".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Arch("hidden widths must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Arch("num_classes must be positive".into()));
        }
        if self.time_features < 2 || self.time_features % 2 != 0 {
            return Err(Error::Arch("time_features must be an even number >= 2".into()));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.dim + self.time_features + self.embed_dim
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(self.dim);
        w
    }

    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let dense: usize = w.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        dense + self.num_classes * self.embed_dim
    }
}

/// Architecture settings from a config file; the data dimension comes from the mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub time_features: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let a = Arch::default();
        Self {
            hidden: a.hidden,
            num_classes: a.num_classes,
            embed_dim: a.embed_dim,
            time_features: a.time_features,
        }
    }
}

impl ArchConfig {
    pub fn for_dim(&self, dim: usize) -> Arch {
        Arch {
            dim,
            hidden: self.hidden.clone(),
            num_classes: self.num_classes,
            embed_dim: self.embed_dim,
            time_features: self.time_features,
        }
    }
}

/// Where the checkpointed parameters came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lineage {
    pub init_seed: u64,
    /// One entry per training phase, oldest first.
    pub history: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

fn layout(arch: &Arch) -> (Vec<Dense>, usize) {
    let mut off = 0;
    let mut layers = Vec::new();
    for p in arch.widths().windows(2) {
        let (n_in, n_out) = (p[0], p[1]);
        layers.push(Dense {
            w: off,
            b: off + n_in * n_out,
            n_in,
            n_out,
        });
        off += n_in * n_out + n_out;
    }
    (layers, off)
}

/// Sinusoidal features with geometrically spaced frequencies in `[0.5, 32]`.
pub fn time_features(t: f64, n: usize) -> impl Iterator<Item = f64> {
    let half = n / 2;
    let freq = move |k: usize| {
        if half == 1 {
            1.0
        } else {
            0.5 * 64f64.powf(k as f64 / (half - 1) as f64)
        }
    };
    (0..half)
        .map(move |k| (freq(k) * t).sin())
        .chain((0..half).map(move |k| (freq(k) * t).cos()))
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Debug)]
pub struct VelocityNet {
    arch: Arch,
    params: Vec<f64>,
    layers: Vec<Dense>,
    embed_off: usize,
    lineage: Lineage,
    uid: u64,
    version: u64,
}

impl Clone for VelocityNet {
    /// The copy gets its own identity, so forward records never cross between copies.
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.clone(),
            layers: self.layers.clone(),
            embed_off: self.embed_off,
            lineage: self.lineage.clone(),
            uid: next_uid(),
            version: 0,
        }
    }
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    uid: u64,
    version: u64,
    /// Input to each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Array2<f64>>,
    classes: Vec<usize>,
}

impl ForwardRecord {
    pub fn batch_size(&self) -> usize {
        self.classes.len()
    }
}

/// Flat gradient aligned with the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad(pub Vec<f64>);

impl Grad {
    pub fn zeros(n: usize) -> Self {
        Grad(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn add_assign(&mut self, other: &Grad) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().for_each(|g| *g *= c);
    }

    /// Rescales in place so the norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Frozen copy of the parameters, used for `theta_old` / `theta_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub arch: Arch,
    pub params: Vec<f64>,
    pub lineage: Lineage,
}

impl ParamSnapshot {
    pub fn restore(&self) -> Result<VelocityNet> {
        VelocityNet::from_params(self.arch.clone(), self.params.clone(), self.lineage.clone())
    }
}

impl VelocityNet {
    /// Uniform fan-in initialisation `U(-1/sqrt(n_in), 1/sqrt(n_in))`, embeddings `U(-1, 1)`.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layers, embed_off) = layout(&arch);
        let mut params = vec![0.0; arch.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for p in &mut params[l.w..l.b + l.n_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        for p in &mut params[embed_off..] {
            *p = rng.random_range(-1.0..1.0);
        }
        Ok(Self {
            arch,
            params,
            layers,
            embed_off,
            lineage: Lineage {
                init_seed: seed,
                history: vec![format!("init seed={seed}")],
            },
            uid: next_uid(),
            version: 0,
        })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>, lineage: Lineage) -> Result<Self> {
        arch.validate()?;
        check_dim("VelocityNet::from_params", arch.param_count(), params.len())?;
        let (layers, embed_off) = layout(&arch);
        Ok(Self {
            arch,
            params,
            layers,
            embed_off,
            lineage,
            uid: next_uid(),
            version: 0,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn push_lineage(&mut self, entry: impl Into<String>) {
        self.lineage.history.push(entry.into());
    }

    /// Mutable access to the raw parameters; invalidates outstanding forward records.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            arch: self.arch.clone(),
            params: self.params.clone(),
            lineage: self.lineage.clone(),
        }
    }

    fn weight(&self, l: &Dense) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.n_out, l.n_in), &self.params[l.w..l.b]).expect("layout")
    }

    fn input_matrix(&self, x: ArrayView2<'_, f64>, t: &[f64], c: &[usize]) -> Result<Array2<f64>> {
        let a = &self.arch;
        check_dim("net forward (x columns)", a.dim, x.ncols())?;
        check_dim("net forward (t length)", x.nrows(), t.len())?;
        check_dim("net forward (class length)", x.nrows(), c.len())?;
        let b = x.nrows();
        let mut h = Array2::zeros((b, a.input_width()));
        h.slice_mut(s![.., ..a.dim]).assign(&x);
        for i in 0..b {
            if c[i] >= a.num_classes {
                return Err(Error::domain(
                    "net forward",
                    format!("class {} >= num_classes {}", c[i], a.num_classes),
                ));
            }
            let mut row = h.row_mut(i);
            for (k, f) in time_features(t[i], a.time_features).enumerate() {
                row[a.dim + k] = f;
            }
            let e = self.embed_off + c[i] * a.embed_dim;
            for k in 0..a.embed_dim {
                row[a.dim + a.time_features + k] = self.params[e + k];
            }
        }
        Ok(h)
    }

    fn run(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        c: &[usize],
        keep: bool,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let mut h = self.input_matrix(x, t, c)?;
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let bias = ndarray::ArrayView1::from(&self.params[l.b..l.b + l.n_out]);
            let mut z = h.dot(&self.weight(l).t());
            z += &bias;
            if keep {
                inputs.push(h);
            }
            if li == last {
                h = z;
            } else {
                let a = z.mapv(silu);
                if keep {
                    pre.push(z);
                }
                h = a;
            }
        }
        Ok((h, inputs, pre))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, t: &[f64], c: &[usize]) -> Result<Array2<f64>> {
        Ok(self.run(x, t, c, false)?.0)
    }

    pub fn forward_record(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        c: &[usize],
    ) -> Result<(Array2<f64>, ForwardRecord)> {
        let (out, inputs, pre) = self.run(x, t, c, true)?;
        Ok((
            out,
            ForwardRecord {
                uid: self.uid,
                version: self.version,
                inputs,
                pre,
                classes: c.to_vec(),
            },
        ))
    }

    /// Gradient of `sum_i <upstream[i], v(x_i)>` with respect to all parameters.
    pub fn backward(&self, rec: &ForwardRecord, upstream: ArrayView2<'_, f64>) -> Result<Grad> {
        if rec.uid != self.uid || rec.version != self.version {
            return Err(Error::StaleRecord(format!(
                "record taken from net {} v{}, current net {} v{}",
                rec.uid, rec.version, self.uid, self.version
            )));
        }
        check_dim("net backward (rows)", rec.batch_size(), upstream.nrows())?;
        check_dim("net backward (cols)", self.arch.dim, upstream.ncols())?;
        let mut grad = Grad::zeros(self.params.len());
        let mut dz = upstream.to_owned();
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let h_in = &rec.inputs[li];
            let gw = dz.t().dot(h_in);
            grad.0[l.w..l.b].copy_from_slice(gw.as_slice().expect("standard layout"));
            let gb = dz.sum_axis(Axis(0));
            grad.0[l.b..l.b + l.n_out].copy_from_slice(gb.as_slice().expect("contiguous"));
            let dh = dz.dot(&self.weight(&l));
            if li > 0 {
                let mut d = dh;
                d.zip_mut_with(&rec.pre[li - 1], |g, &z| *g *= silu_grad(z));
                dz = d;
            } else {
                let a = &self.arch;
                let off = a.dim + a.time_features;
                for (i, &c) in rec.classes.iter().enumerate() {
                    let e = self.embed_off + c * a.embed_dim;
                    for k in 0..a.embed_dim {
                        grad.0[e + k] += dh[[i, off + k]];
                    }
                }
            }
        }
        Ok(grad)
    }
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64], c: &[usize]) -> Result<Array2<f64>> {
        self.forward(x, t, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::StandardNormal;

    fn small_arch(hidden: Vec<usize>) -> Arch {
        Arch {
            dim: 2,
            hidden,
            num_classes: 3,
            embed_dim: 4,
            time_features: 6,
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
        let t = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let c = (0..n).map(|i| i % 3).collect();
        (x, t, c)
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = VelocityNet::init(Arch::default(), 7).unwrap();
        let b = VelocityNet::init(Arch::default(), 7).unwrap();
        assert_eq!(a.params(), b.params());
        let c = VelocityNet::init(Arch::default(), 8).unwrap();
        assert_ne!(a.params(), c.params());
        let zero_depth = Arch {
            hidden: vec![],
            ..Arch::default()
        };
        assert!(matches!(VelocityNet::init(zero_depth, 1), Err(Error::Arch(_))));
    }

    #[test]
    fn default_net_is_finite_on_zeros() {
        let net = VelocityNet::init(Arch::default(), 1).unwrap();
        let x = Array2::zeros((4, 2));
        let out = net.forward(x.view(), &[0.5; 4], &[0, 1, 2, 7]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(net.forward(x.view(), &[0.5; 4], &[0, 1, 2, 8]).is_err());
        assert!(matches!(
            net.forward(Array2::zeros((4, 3)).view(), &[0.5; 4], &[0; 4]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn batched_matches_single_rows() {
        let net = VelocityNet::init(small_arch(vec![128, 128]), 3).unwrap();
        let (x, t, c) = batch(300, 2, 4);
        let full = net.forward(x.view(), &t, &c).unwrap();
        for i in (0..300).step_by(7) {
            let one = net
                .forward(x.slice(s![i..i + 1, ..]), &t[i..i + 1], &c[i..i + 1])
                .unwrap();
            for k in 0..2 {
                assert_eq!(one[[0, k]].to_bits(), full[[i, k]].to_bits(), "row {i}");
            }
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        for hidden in [vec![5], vec![8, 6], vec![7, 7, 7]] {
            let mut net = VelocityNet::init(small_arch(hidden.clone()), 11).unwrap();
            let (x, t, c) = batch(5, 2, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let w = Array2::from_shape_fn((5, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let loss = |n: &VelocityNet| (&n.forward(x.view(), &t, &c).unwrap() * &w).sum();
            let (_, rec) = net.forward_record(x.view(), &t, &c).unwrap();
            let g = net.backward(&rec, w.view()).unwrap();
            let h = 1e-5;
            for _ in 0..30 {
                let k = rng.random_range(0..net.param_count());
                let orig = net.params()[k];
                net.params_mut()[k] = orig + h;
                let up = loss(&net);
                net.params_mut()[k] = orig - h;
                let down = loss(&net);
                net.params_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - g.0[k]).abs() / fd.abs().max(g.0[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "{hidden:?} param {k}: fd={fd} analytic={}", g.0[k]);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let net = VelocityNet::init(small_arch(vec![8]), 2).unwrap();
        let (x, t, c) = batch(4, 2, 3);
        let (_, rec) = net.forward_record(x.view(), &t, &c).unwrap();
        let zero = net.backward(&rec, Array2::zeros((4, 2)).view()).unwrap();
        assert!(zero.0.iter().all(|g| *g == 0.0));
        let up = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64) - 0.5 * j as f64);
        let g1 = net.backward(&rec, up.view()).unwrap();
        let g2 = net.backward(&rec, (&up * 2.5).view()).unwrap();
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert!((2.5 * a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn stale_record_is_rejected() {
        let mut net = VelocityNet::init(small_arch(vec![4]), 2).unwrap();
        let (x, t, c) = batch(3, 2, 3);
        let (_, rec) = net.forward_record(x.view(), &t, &c).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(
            net.backward(&rec, Array2::zeros((3, 2)).view()),
            Err(Error::StaleRecord(_))
        ));
        let other = VelocityNet::init(small_arch(vec![4]), 2).unwrap();
        let (_, rec) = other.forward_record(x.view(), &t, &c).unwrap();
        assert!(net.backward(&rec, Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn snapshot_restores_identical_function() {
        let net = VelocityNet::init(small_arch(vec![8, 8]), 5).unwrap();
        let snap = net.snapshot();
        let back = snap.restore().unwrap();
        let (x, t, c) = batch(6, 2, 1);
        assert_eq!(
            net.forward(x.view(), &t, &c).unwrap(),
            back.forward(x.view(), &t, &c).unwrap()
        );
    }

    #[test]
    fn time_features_distinguish_times() {
        let a: Vec<f64> = time_features(0.3, 16).collect();
        let b: Vec<f64> = time_features(0.31, 16).collect();
        assert_eq!(a.len(), 16);
        assert_ne!(a, b);
    }
}
