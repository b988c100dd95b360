//! Straight-line scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use crossmodal_seg::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows).map(|_| random_vec(rng, cols, scale)).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Dense layer with weight `(out, in)`: `y_o = sum_i w[o][i] x_i + b_o`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Mat,
    pub b: Option<Vec<f64>>,
}

impl Dense {
    pub fn random(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, bias: bool) -> Self {
        Self {
            w: random_mat(rng, out_dim, in_dim, 0.8),
            b: bias.then(|| random_vec(rng, out_dim, 0.5)),
        }
    }

    pub fn zero(out_dim: usize, in_dim: usize, bias: bool) -> Self {
        Self {
            w: vec![vec![0.0; in_dim]; out_dim],
            b: bias.then(|| vec![0.0; out_dim]),
        }
    }

    /// `u v^T`.
    pub fn rank_one(u: &[f64], v: &[f64]) -> Self {
        Self {
            w: u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect(),
            b: None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .enumerate()
            .map(|(o, row)| {
                let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                dot + self.b.as_ref().map_or(0.0, |b| b[o])
            })
            .collect()
    }

    /// Write into `{prefix}.weight` / `{prefix}.bias`.
    pub fn store(&self, store: &ParamStore, prefix: &str) {
        let rows = self.w.len();
        let cols = self.w[0].len();
        let flat: Vec<f64> = self.w.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (rows, cols), &Device::Cpu).unwrap();
        store.set(&format!("{prefix}.weight"), &t).unwrap();
        if let Some(b) = &self.b {
            store
                .set(&format!("{prefix}.bias"), &Tensor::new(b.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
        }
    }
}

/// Softmax over the entries whose mask is set; masked entries get exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

/// Parameters of one alignment direction, in the order the formulas use them.
#[derive(Debug, Clone)]
pub struct AlignmentWeights {
    pub in_proj: Dense,
    pub w_q: Dense,
    pub w_k: Dense,
    pub w_v: Dense,
    pub out_proj: Dense,
    pub gate_fc1: Dense,
    pub gate_fc2: Dense,
}

impl AlignmentWeights {
    pub fn random(rng: &mut ChaCha8Rng, query_dim: usize, key_dim: usize) -> Self {
        Self {
            in_proj: Dense::random(rng, query_dim, query_dim, true),
            w_q: Dense::random(rng, query_dim, query_dim, false),
            w_k: Dense::random(rng, query_dim, key_dim, false),
            w_v: Dense::random(rng, query_dim, key_dim, false),
            out_proj: Dense::random(rng, query_dim, query_dim, true),
            gate_fc1: Dense::random(rng, query_dim, query_dim, true),
            gate_fc2: Dense::random(rng, query_dim, query_dim, true),
        }
    }

    pub fn store(&self, store: &ParamStore, prefix: &str) {
        self.in_proj.store(store, &format!("{prefix}.in_proj"));
        self.w_q.store(store, &format!("{prefix}.w_q"));
        self.w_k.store(store, &format!("{prefix}.w_k"));
        self.w_v.store(store, &format!("{prefix}.w_v"));
        self.out_proj.store(store, &format!("{prefix}.out_proj"));
        self.gate_fc1.store(store, &format!("{prefix}.gate.fc1"));
        self.gate_fc2.store(store, &format!("{prefix}.gate.fc2"));
    }
}

pub struct AlignmentReference {
    /// `[head][query][key]`.
    pub similarity: Vec<Mat>,
    pub guided: Mat,
    pub refined: Mat,
}

/// Scalar-by-scalar evaluation of one alignment direction.
///
/// Queries are projected with GELU, attend over the keys with a per-head
/// scaled dot product, the attended values are multiplied element-wise with
/// the projected queries, projected again with GELU, and gated by
/// `tanh(fc2(relu(fc1(a)))) * a`.
pub fn alignment_reference(
    w: &AlignmentWeights,
    queries: &Mat,
    keys: &Mat,
    key_mask: &[bool],
    heads: usize,
) -> AlignmentReference {
    let c = w.in_proj.w.len();
    let d = c / heads;
    let projected: Mat = queries.iter().map(|q| w.in_proj.apply(q).into_iter().map(gelu).collect()).collect();
    let q: Mat = projected.iter().map(|p| w.w_q.apply(p)).collect();
    let k: Mat = keys.iter().map(|x| w.w_k.apply(x)).collect();
    let v: Mat = keys.iter().map(|x| w.w_v.apply(x)).collect();
    let mut similarity = vec![vec![]; heads];
    let mut attended = vec![vec![0.0; c]; queries.len()];
    for h in 0..heads {
        let r = h * d..(h + 1) * d;
        for (t, qt) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|ks| r.clone().map(|j| qt[j] * ks[j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let wts = masked_softmax(&logits, key_mask);
            for j in r.clone() {
                attended[t][j] = wts.iter().zip(&v).map(|(a, vs)| a * vs[j]).sum();
            }
            similarity[h].push(wts);
        }
    }
    let guided: Mat = attended
        .iter()
        .zip(&projected)
        .map(|(a, p)| a.iter().zip(p).map(|(x, y)| x * y).collect())
        .collect();
    let refined = guided
        .iter()
        .map(|g| {
            let a: Vec<f64> = w.out_proj.apply(g).into_iter().map(gelu).collect();
            let hidden: Vec<f64> = w.gate_fc1.apply(&a).into_iter().map(relu).collect();
            let gate = w.gate_fc2.apply(&hidden);
            gate.iter().zip(&a).map(|(g, x)| g.tanh() * x).collect()
        })
        .collect();
    AlignmentReference {
        similarity,
        guided,
        refined,
    }
}

/// Bilinear sample of a 3x3 kernel at offset `(x, y)` from its centre; zero outside.
pub fn sample_kernel(k: &[[f64; 3]; 3], x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let tap = |xi: f64, yi: f64| -> f64 {
        let (c, r) = (xi + 1.0, yi + 1.0);
        if (0.0..=2.0).contains(&c) && (0.0..=2.0).contains(&r) {
            k[r as usize][c as usize]
        } else {
            0.0
        }
    };
    tap(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + tap(x0 + 1.0, y0) * fx * (1.0 - fy)
        + tap(x0, y0 + 1.0) * (1.0 - fx) * fy
        + tap(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// Rotate a 3x3 kernel by `angle`: the tap at `p` takes the base value at `R(-angle) p`.
pub fn rotate_kernel(k: &[[f64; 3]; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (col, v) in row.iter_mut().enumerate() {
            let (x, y) = (col as f64 - 1.0, r as f64 - 1.0);
            *v = sample_kernel(k, c * x + s * y, -s * x + c * y);
        }
    }
    out
}

/// Direct 3x3, stride 1, zero padding 1 convolution. `input[c][y][x]`, `kernel[o][c]`.
pub fn conv3x3(input: &[Mat], kernel: &[Vec<[[f64; 3]; 3]>], bias: &[f64]) -> Vec<Mat> {
    let h = input[0].len() as isize;
    let w = input[0][0].len() as isize;
    kernel
        .iter()
        .zip(bias)
        .map(|(ko, b)| {
            (0..h)
                .map(|y| {
                    (0..w)
                        .map(|x| {
                            let mut acc = *b;
                            for (ci, kc) in ko.iter().enumerate() {
                                for dy in -1..=1isize {
                                    for dx in -1..=1isize {
                                        let (yy, xx) = (y + dy, x + dx);
                                        if yy >= 0 && yy < h && xx >= 0 && xx < w {
                                            acc += kc[(dy + 1) as usize][(dx + 1) as usize]
                                                * input[ci][yy as usize][xx as usize];
                                        }
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `(O, I, 3, 3)` tensor to nested kernels.
pub fn kernels_of(t: &Tensor) -> Vec<Vec<[[f64; 3]; 3]>> {
    let (o, i, _, _) = t.dims4().unwrap();
    let v = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    (0..o)
        .map(|a| {
            (0..i)
                .map(|b| {
                    let base = (a * i + b) * 9;
                    std::array::from_fn(|r| std::array::from_fn(|c| v[base + r * 3 + c]))
                })
                .collect()
        })
        .collect()
}

/// `(1, C, H, W)` tensor to `[c][y][x]`.
pub fn chw_of(t: &Tensor) -> Vec<Mat> {
    let t = t.to_dtype(DType::F64).unwrap().squeeze(0).unwrap();
    t.to_vec3::<f64>().unwrap()
}

pub fn vec1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    vec1(a).iter().zip(vec1(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with the denominator floored at `1e-8`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
