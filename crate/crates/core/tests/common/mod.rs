//! Independent reference implementations shared by integration and
//! acceptance tests. Everything here works on plain `Vec<f64>` rows and
//! avoids the autodiff engine.
#![allow(dead_code)]

use adaptermix_core::adapters::{MixtureOfAdapters, ResidualAdapter};
use adaptermix_core::numerics::LAYER_NORM_EPS;
use adaptermix_core::rng::Rng;
use adaptermix_core::{ParamId, ParamStore, Session, Tensor, Var};

pub type Mat = Vec<Vec<f64>>;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Overwrites every parameter with `N(0, scale²)` noise; layer-norm gains
/// are centered on one.
pub fn randomize(store: &mut ParamStore, rng: &mut Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).ends_with("gain");
        let n = store.get(id).numel();
        let data: Vec<f64> = (0..n)
            .map(|_| if gain { 1.0 } else { 0.0 } + scale * rng.normal())
            .collect();
        store.set_data(id, &data).unwrap();
    }
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn param_mat(store: &ParamStore, id: ParamId) -> Mat {
    to_mat(store.get(id))
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let q = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..q)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat, cols: usize) -> Mat {
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let sd = (var + LAYER_NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / sd * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// `ReLU(LN(x)·W_down)·W_up`.
pub fn adapter_core(store: &ParamStore, a: &ResidualAdapter, x: &Mat) -> Mat {
    let gain = store.get(a.ln_gain).data();
    let bias = store.get(a.ln_bias).data();
    let z = matmul(&layer_norm(x, gain, bias), &param_mat(store, a.w_down));
    let z: Mat = z
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    matmul(&z, &param_mat(store, a.w_up))
}

pub fn residual_adapter(store: &ParamStore, a: &ResidualAdapter, h: &Mat) -> Mat {
    add(h, &adapter_core(store, a, h))
}

/// Expert-choice selection by full sort per adapter column: descending
/// affinity, smaller token index first on ties.
pub fn select_tokens(s: &Mat, n_adapters: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n_adapters)
        .map(|i| {
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b][i].partial_cmp(&s[a][i]).unwrap().then(a.cmp(&b)));
            order.truncate(k);
            order
        })
        .collect()
}

/// The mixture written with explicit one-hot dispatch matrices:
/// `Xᵢ = Pᵢ·h`, `Yᵢ = coreᵢ(Xᵢ)`, `ĥ = h + Σᵢ Pᵢᵀ·diag(Gᵢ)·Yᵢ`, where
/// `Pᵢ[j][t] = 1` iff adapter `i`'s `j`-th pick is token `t`.
pub fn dense_moa(store: &ParamStore, moa: &MixtureOfAdapters, h: &Mat) -> Mat {
    let n = h.len();
    let d = moa.d_model();
    let big_n = moa.n_adapters();
    if n == 0 {
        return Vec::new();
    }
    let s = softmax_rows(&matmul(h, &param_mat(store, moa.w_g)));
    let k = ((n as f64 * moa.capacity() / big_n as f64).floor() as usize).clamp(1, n);
    let picks = select_tokens(&s, big_n, k);
    let mut out = h.clone();
    for (i, adapter) in moa.adapters.iter().enumerate() {
        let p: Mat = picks[i]
            .iter()
            .map(|&t| (0..n).map(|c| if c == t { 1.0 } else { 0.0 }).collect())
            .collect();
        let x = matmul(&p, h);
        let y = adapter_core(store, adapter, &x);
        let gated: Mat = y
            .iter()
            .zip(&picks[i])
            .map(|(row, &t)| row.iter().map(|v| v * s[t][i]).collect())
            .collect();
        let back = matmul(&transpose(&p, n), &gated);
        out = add(&out, &back);
        debug_assert_eq!(out[0].len(), d);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Mel-cepstral distortion by the textbook loop, with truncation.
pub fn mcd_oracle(a: &Mat, b: &Mat) -> f64 {
    let n = a.len().min(b.len());
    let k = 10.0 / std::f64::consts::LN_10;
    let mut acc = 0.0;
    for t in 0..n {
        let mut sq = 0.0;
        for j in 0..a[t].len() {
            sq += (a[t][j] - b[t][j]).powi(2);
        }
        acc += k * (2.0 * sq).sqrt();
    }
    acc / n as f64
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Central-difference check of `loss` against the autodiff gradients of the
/// parameters in `ids`. At most `per_tensor` entries of each tensor are
/// probed, spread evenly. Returns the worst `|a − n| / max(|a|, |n|, floor)`.
pub fn store_gradcheck<F>(store: &ParamStore, ids: &[ParamId], h: f64, per_tensor: usize, floor: f64, loss: F) -> f64
where
    F: Fn(&mut Session<'_>) -> Var,
{
    let mut s = Session::new(store);
    let l = loss(&mut s);
    let grads = s.backward(l).unwrap();
    let eval = |st: &ParamStore| -> f64 {
        let mut s = Session::inference(st);
        let l = loss(&mut s);
        s.graph().value(l).data()[0]
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.get(id).numel();
        let stride = (n / per_tensor.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[e] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g[e]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if err > 1e-4 {
                eprintln!("{}[{e}]: analytic {analytic:e} numeric {numeric:e}", store.name(id));
            }
            worst = worst.max(err);
        }
    }
    worst
}
