//! Residual adapters and the mixture of adapters with expert-choice routing.
//!
//! A residual adapter maps `h ↦ h + ReLU(LayerNorm(h)·W_down)·W_up`. The
//! mixture holds `N` such adapters plus a routing embedding `W_g`:
//!
//! 1. `S = softmax_rows(h·W_g)` gives every token a distribution over the
//!    adapters.
//! 2. Each adapter independently picks the `k = clamp(⌊n·c/N⌋, 1, n)` tokens
//!    with the largest affinity in its column of `S`; `G` holds the picked
//!    affinities. A token may be picked by several adapters or by none.
//! 3. Each adapter transforms only its tokens; the results are scaled by
//!    their gates and scattered back onto `h`.
//!
//! Adapters inside a mixture contribute only their bottleneck branch. The
//! residual `h` is added once, at the mixture level, so a one-adapter
//! mixture with `c = 1` is exactly a residual adapter applied to every token.
//!
//! The one-hot permutation matrices of the textbook formulation are never
//! built; index lists drive `gather_rows`/`scatter_add_rows` instead.
//! Routing indices are discrete and carry no gradient. Gradients reach
//! `W_g` through the gate values.

use alloc::format;
use alloc::vec::Vec;

use crate::numerics::{Tensor, Var, LAYER_NORM_EPS};
use crate::params::{join, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::{Error, Result};

/// One bottleneck adapter: layer norm, down projection to `r`, ReLU, up
/// projection back to `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAdapter {
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    d_model: usize,
    r: usize,
}

impl ResidualAdapter {
    /// Registers a freshly initialized adapter under `prefix`.
    ///
    /// `W_up` starts at zero so the adapter is the identity map until
    /// trained; `W_down` is uniform in `±1/√d_model`.
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, r: usize, rng: &mut Rng) -> Result<Self> {
        check_dims(d_model, r)?;
        let bound = 1.0 / libm::sqrt(d_model as f64);
        let down: Vec<f64> = (0..d_model * r).map(|_| rng.uniform_range(-bound, bound)).collect();
        let w_down = store.add(join(prefix, "w_down"), Tensor::new(alloc::vec![d_model, r], down)?)?;
        let w_up = store.add(join(prefix, "w_up"), Tensor::zeros(&[r, d_model]))?;
        let ln_gain = store.add(join(prefix, "ln_gain"), Tensor::filled(&[d_model], 1.0))?;
        let ln_bias = store.add(join(prefix, "ln_bias"), Tensor::zeros(&[d_model]))?;
        Ok(Self {
            w_down,
            w_up,
            ln_gain,
            ln_bias,
            d_model,
            r,
        })
    }

    /// Rebinds an adapter whose tensors already live in `store` under `prefix`.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_down = lookup(store, prefix, "w_down")?;
        let w_up = lookup(store, prefix, "w_up")?;
        let ln_gain = lookup(store, prefix, "ln_gain")?;
        let ln_bias = lookup(store, prefix, "ln_bias")?;
        let (d_model, r) = store.get(w_down).dims2()?;
        check_dims(d_model, r)?;
        if store.get(w_up).shape() != [r, d_model] {
            return Err(Error::Dimension {
                op: "adapter w_up",
                left: store.get(w_up).shape().to_vec(),
                right: alloc::vec![r, d_model],
            });
        }
        Ok(Self {
            w_down,
            w_up,
            ln_gain,
            ln_bias,
            d_model,
            r,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn bottleneck(&self) -> usize {
        self.r
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w_down, self.w_up, self.ln_gain, self.ln_bias]
    }

    /// `2·d·r` projection weights plus `2·d` layer-norm parameters.
    pub fn param_count(d_model: usize, r: usize) -> usize {
        2 * d_model * r + 2 * d_model
    }

    /// The bottleneck branch `ReLU(LayerNorm(h)·W_down)·W_up`, without the
    /// residual.
    pub fn core(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let (_, width) = s.graph().value(h).dims2()?;
        if width != self.d_model {
            return Err(Error::Dimension {
                op: "adapter_core",
                left: s.graph().value(h).shape().to_vec(),
                right: alloc::vec![self.d_model],
            });
        }
        let (gain, bias) = (s.param(self.ln_gain), s.param(self.ln_bias));
        let (down, up) = (s.param(self.w_down), s.param(self.w_up));
        let g = s.graph_mut();
        let normed = g.layer_norm(h, gain, bias, LAYER_NORM_EPS)?;
        let z = g.matmul(normed, down)?;
        let z = g.relu(z);
        g.matmul(z, up)
    }

    /// `h + core(h)`.
    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let c = self.core(s, h)?;
        s.graph_mut().add(h, c)
    }
}

fn check_dims(d_model: usize, r: usize) -> Result<()> {
    if d_model < 2 {
        return Err(Error::Config {
            field: "d_model",
            reason: format!("{d_model} < 2"),
        });
    }
    if r == 0 || r > d_model {
        return Err(Error::Config {
            field: "r",
            reason: format!("bottleneck {r} must be in 1..={d_model}"),
        });
    }
    Ok(())
}

fn lookup(store: &ParamStore, prefix: &str, name: &str) -> Result<ParamId> {
    let full = join(prefix, name);
    store
        .find(&full)
        .ok_or_else(|| Error::State(format!("missing parameter `{full}`")))
}

/// Tokens per adapter: `clamp(⌊n·c/N⌋, 1, n)`; zero only for an empty
/// sequence.
pub fn compute_k(n: usize, capacity: f64, n_adapters: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = libm::floor(n as f64 * capacity / n_adapters.max(1) as f64);
    let k = if raw < 1.0 { 1 } else { raw as usize };
    k.min(n)
}

/// Outcome of expert-choice routing for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingPlan {
    /// Token-to-adapter affinity `S`, `[n×N]`, rows summing to one.
    pub affinity: Tensor,
    pub k: usize,
    /// `indices[i]` lists the tokens adapter `i` processes, best first.
    pub indices: Vec<Vec<usize>>,
    /// `gates[i][j] == affinity[indices[i][j]][i]`.
    pub gates: Vec<Vec<f64>>,
}

/// Top-`k` tokens per adapter column of `affinity[n×N]`.
///
/// Within an adapter, tokens are ordered by descending affinity; ties go to
/// the smaller token index.
pub fn top_k_tokens(affinity: &Tensor, k: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    let (n, n_adapters) = affinity.dims2()?;
    let k = k.min(n);
    let mut indices = Vec::with_capacity(n_adapters);
    let mut gates = Vec::with_capacity(n_adapters);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n_adapters {
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            affinity
                .at(b, i)
                .total_cmp(&affinity.at(a, i))
                .then(a.cmp(&b))
        });
        let picked: Vec<usize> = order[..k].to_vec();
        gates.push(picked.iter().map(|&t| affinity.at(t, i)).collect());
        indices.push(picked);
    }
    Ok((indices, gates))
}

/// `N` residual adapters sharing one slot, plus routing embedding `W_g`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureOfAdapters {
    pub adapters: Vec<ResidualAdapter>,
    pub w_g: ParamId,
    capacity: f64,
}

impl MixtureOfAdapters {
    /// Registers `n_adapters` adapters and `W_g ~ N(0, 0.01²)` under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        r: usize,
        n_adapters: usize,
        capacity: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_mixture(n_adapters, capacity)?;
        let mut adapters = Vec::with_capacity(n_adapters);
        for i in 0..n_adapters {
            let p = join(prefix, &format!("adapters.{i}"));
            adapters.push(ResidualAdapter::init(store, &p, d_model, r, rng)?);
        }
        let wg: Vec<f64> = (0..d_model * n_adapters).map(|_| 0.01 * rng.normal()).collect();
        let w_g = store.add(join(prefix, "w_g"), Tensor::new(alloc::vec![d_model, n_adapters], wg)?)?;
        Ok(Self {
            adapters,
            w_g,
            capacity,
        })
    }

    /// Rebinds a mixture previously registered under `prefix`.
    pub fn from_store(store: &ParamStore, prefix: &str, capacity: f64) -> Result<Self> {
        let w_g = lookup(store, prefix, "w_g")?;
        let (d_model, n_adapters) = store.get(w_g).dims2()?;
        check_mixture(n_adapters, capacity)?;
        let mut adapters = Vec::with_capacity(n_adapters);
        for i in 0..n_adapters {
            let a = ResidualAdapter::from_store(store, &join(prefix, &format!("adapters.{i}")))?;
            if a.d_model != d_model || (i > 0 && a.r != adapters.first().map_or(a.r, |f: &ResidualAdapter| f.r)) {
                return Err(Error::State(format!("adapter {i} of `{prefix}` has mismatched dimensions")));
            }
            adapters.push(a);
        }
        Ok(Self {
            adapters,
            w_g,
            capacity,
        })
    }

    pub fn n_adapters(&self) -> usize {
        self.adapters.len()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn d_model(&self) -> usize {
        self.adapters[0].d_model
    }

    pub fn bottleneck(&self) -> usize {
        self.adapters[0].r
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.adapters.iter().flat_map(|a| a.param_ids()).collect();
        ids.push(self.w_g);
        ids
    }

    /// `N·(2dr + 2d) + d·N`.
    pub fn param_count(d_model: usize, r: usize, n_adapters: usize) -> usize {
        n_adapters * ResidualAdapter::param_count(d_model, r) + d_model * n_adapters
    }

    fn affinity(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let (_, width) = s.graph().value(h).dims2()?;
        if width != self.d_model() {
            return Err(Error::Dimension {
                op: "moa_forward",
                left: s.graph().value(h).shape().to_vec(),
                right: alloc::vec![self.d_model()],
            });
        }
        let wg = s.param(self.w_g);
        let g = s.graph_mut();
        let logits = g.matmul(h, wg)?;
        g.softmax_rows(logits)
    }

    /// Computes the routing plan for `h[n×d_model]` without recording
    /// gradients.
    pub fn route(&self, store: &ParamStore, h: &Tensor) -> Result<RoutingPlan> {
        let mut s = Session::inference(store);
        let hv = s.graph_mut().constant(h.clone());
        let sv = self.affinity(&mut s, hv)?;
        let affinity = s.graph().value(sv).clone();
        let k = compute_k(affinity.rows(), self.capacity, self.n_adapters());
        let (indices, gates) = top_k_tokens(&affinity, k)?;
        Ok(RoutingPlan {
            affinity,
            k,
            indices,
            gates,
        })
    }

    /// `ĥ = h + Σᵢ scatter(Iᵢ, Gᵢ ⊙ coreᵢ(h[Iᵢ]))`.
    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        self.forward_impl(s, h, None)
    }

    /// As [`forward`](Self::forward) but with caller-supplied token
    /// selections. Gates are still read from the live affinities, so
    /// gradients flow through `W_g`; this is what finite-difference checks
    /// use to hold the discrete routing fixed.
    pub fn forward_routed(&self, s: &mut Session<'_>, h: Var, indices: &[Vec<usize>]) -> Result<Var> {
        if indices.len() != self.n_adapters() {
            return Err(Error::Contract(format!(
                "{} index lists for {} adapters",
                indices.len(),
                self.n_adapters()
            )));
        }
        self.forward_impl(s, h, Some(indices))
    }

    fn forward_impl(&self, s: &mut Session<'_>, h: Var, fixed: Option<&[Vec<usize>]>) -> Result<Var> {
        let sv = self.affinity(s, h)?;
        let n = s.graph().value(h).rows();
        if n == 0 {
            return Ok(h);
        }
        let owned;
        let indices: &[Vec<usize>] = match fixed {
            Some(ix) => ix,
            None => {
                let k = compute_k(n, self.capacity, self.n_adapters());
                owned = top_k_tokens(s.graph().value(sv), k)?.0;
                &owned
            }
        };
        let mut out = h;
        for (i, (adapter, picked)) in self.adapters.iter().zip(indices).enumerate() {
            if picked.is_empty() {
                continue;
            }
            let x = s.graph_mut().gather_rows(h, picked)?;
            let y = adapter.core(s, x)?;
            let positions: Vec<(usize, usize)> = picked.iter().map(|&t| (t, i)).collect();
            let g = s.graph_mut();
            let gate = g.gather_elements(sv, &positions)?;
            let y = g.mul_rows(y, gate)?;
            out = g.scatter_add_rows(out, picked, y)?;
        }
        Ok(out)
    }
}

fn check_mixture(n_adapters: usize, capacity: f64) -> Result<()> {
    if n_adapters == 0 {
        return Err(Error::Config {
            field: "n_adapters",
            reason: "need at least one adapter".into(),
        });
    }
    if !(capacity > 0.0 && capacity.is_finite()) {
        return Err(Error::Config {
            field: "capacity",
            reason: format!("{capacity} must be a positive finite number"),
        });
    }
    Ok(())
}
