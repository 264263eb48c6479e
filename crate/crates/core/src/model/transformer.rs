use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::lora::LoraAdapters;
use crate::seed::rng_for;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Projection matrices inside a block that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixId {
    Query,
    Key,
    Value,
    Output,
    FfIn,
    FfOut,
}

impl MatrixId {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixId::Query => "query",
            MatrixId::Key => "key",
            MatrixId::Value => "value",
            MatrixId::Output => "output",
            MatrixId::FfIn => "ff_in",
            MatrixId::FfOut => "ff_out",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "query" | "q" => MatrixId::Query,
            "key" | "k" => MatrixId::Key,
            "value" | "v" => MatrixId::Value,
            "output" | "o" => MatrixId::Output,
            "ff_in" => MatrixId::FfIn,
            "ff_out" => MatrixId::FfOut,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub attn_norm_gain: Array1<f64>,
    pub attn_norm_bias: Array1<f64>,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
    pub ff_norm_gain: Array1<f64>,
    pub ff_norm_bias: Array1<f64>,
    pub ff_in: Array2<f64>,
    pub ff_in_bias: Array1<f64>,
    pub ff_out: Array2<f64>,
    pub ff_out_bias: Array1<f64>,
}

impl LayerWeights {
    pub fn matrix(&self, id: MatrixId) -> &Array2<f64> {
        match id {
            MatrixId::Query => &self.query,
            MatrixId::Key => &self.key,
            MatrixId::Value => &self.value,
            MatrixId::Output => &self.output,
            MatrixId::FfIn => &self.ff_in,
            MatrixId::FfOut => &self.ff_out,
        }
    }

    pub fn matrix_mut(&mut self, id: MatrixId) -> &mut Array2<f64> {
        match id {
            MatrixId::Query => &mut self.query,
            MatrixId::Key => &mut self.key,
            MatrixId::Value => &mut self.value,
            MatrixId::Output => &mut self.output,
            MatrixId::FfIn => &mut self.ff_in,
            MatrixId::FfOut => &mut self.ff_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Array1<f64>,
    pub final_norm_bias: Array1<f64>,
    pub lm_head: Array2<f64>,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl TransformerWeights {
    /// Gaussian initialisation: embeddings with std 0.02, projections with
    /// `fan_in^-1/2`, residual outputs further scaled by `(2 n_layers)^-1/2`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &["model_init"]);
        let d = config.d_model;
        let f = config.d_ff;
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm_gain: Array1::ones(d),
                attn_norm_bias: Array1::zeros(d),
                query: normal_matrix(&mut rng, d, d, proj),
                key: normal_matrix(&mut rng, d, d, proj),
                value: normal_matrix(&mut rng, d, d, proj),
                output: normal_matrix(&mut rng, d, d, resid),
                ff_norm_gain: Array1::ones(d),
                ff_norm_bias: Array1::zeros(d),
                ff_in: normal_matrix(&mut rng, f, d, proj),
                ff_in_bias: Array1::zeros(f),
                ff_out: normal_matrix(&mut rng, d, f, resid * (d as f64 / f as f64).sqrt()),
                ff_out_bias: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding: normal_matrix(&mut rng, config.vocab_size, d, 0.02),
            position_embedding: normal_matrix(&mut rng, config.context_length, d, 0.02),
            layers,
            final_norm_gain: Array1::ones(d),
            final_norm_bias: Array1::zeros(d),
            lm_head: normal_matrix(&mut rng, config.vocab_size, d, proj),
        })
    }

    /// A zero tensor of every shape, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("token_embedding".into(), slice(&self.token_embedding)),
            ("position_embedding".into(), slice(&self.position_embedding)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm_gain"), slice1(&l.attn_norm_gain)));
            out.push((p("attn_norm_bias"), slice1(&l.attn_norm_bias)));
            out.push((p("query"), slice(&l.query)));
            out.push((p("key"), slice(&l.key)));
            out.push((p("value"), slice(&l.value)));
            out.push((p("output"), slice(&l.output)));
            out.push((p("ff_norm_gain"), slice1(&l.ff_norm_gain)));
            out.push((p("ff_norm_bias"), slice1(&l.ff_norm_bias)));
            out.push((p("ff_in"), slice(&l.ff_in)));
            out.push((p("ff_in_bias"), slice1(&l.ff_in_bias)));
            out.push((p("ff_out"), slice(&l.ff_out)));
            out.push((p("ff_out_bias"), slice1(&l.ff_out_bias)));
        }
        out.push(("final_norm_gain".into(), slice1(&self.final_norm_gain)));
        out.push(("final_norm_bias".into(), slice1(&self.final_norm_bias)));
        out.push(("lm_head".into(), slice(&self.lm_head)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("token_embedding".into(), slice_mut(&mut self.token_embedding)),
            ("position_embedding".into(), slice_mut(&mut self.position_embedding)),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm_gain"), slice1_mut(&mut l.attn_norm_gain)));
            out.push((p("attn_norm_bias"), slice1_mut(&mut l.attn_norm_bias)));
            out.push((p("query"), slice_mut(&mut l.query)));
            out.push((p("key"), slice_mut(&mut l.key)));
            out.push((p("value"), slice_mut(&mut l.value)));
            out.push((p("output"), slice_mut(&mut l.output)));
            out.push((p("ff_norm_gain"), slice1_mut(&mut l.ff_norm_gain)));
            out.push((p("ff_norm_bias"), slice1_mut(&mut l.ff_norm_bias)));
            out.push((p("ff_in"), slice_mut(&mut l.ff_in)));
            out.push((p("ff_in_bias"), slice1_mut(&mut l.ff_in_bias)));
            out.push((p("ff_out"), slice_mut(&mut l.ff_out)));
            out.push((p("ff_out_bias"), slice1_mut(&mut l.ff_out_bias)));
        }
        out.push(("final_norm_gain".into(), slice1_mut(&mut self.final_norm_gain)));
        out.push(("final_norm_bias".into(), slice1_mut(&mut self.final_norm_bias)));
        out.push(("lm_head".into(), slice_mut(&mut self.lm_head)));
        out
    }

    /// Checks tensor shapes against the embedded config.
    pub fn validate_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let mut problems = Vec::new();
        let mut check = |name: &str, got: &[usize], want: &[usize]| {
            if got != want {
                problems.push(format!("{name}: {got:?} != {want:?}"));
            }
        };
        check("token_embedding", self.token_embedding.shape(), &[v, d]);
        check("position_embedding", self.position_embedding.shape(), &[c.context_length, d]);
        check("lm_head", self.lm_head.shape(), &[v, d]);
        check("final_norm_gain", self.final_norm_gain.shape(), &[d]);
        check("final_norm_bias", self.final_norm_bias.shape(), &[d]);
        if self.layers.len() != c.n_layers {
            check("layers", &[self.layers.len()], &[c.n_layers]);
        }
        for (i, l) in self.layers.iter().enumerate() {
            for m in [MatrixId::Query, MatrixId::Key, MatrixId::Value, MatrixId::Output] {
                check(&format!("layers.{i}.{}", m.as_str()), l.matrix(m).shape(), &[d, d]);
            }
            check(&format!("layers.{i}.ff_in"), l.ff_in.shape(), &[f, d]);
            check(&format!("layers.{i}.ff_out"), l.ff_out.shape(), &[d, f]);
            check(&format!("layers.{i}.ff_in_bias"), l.ff_in_bias.shape(), &[f]);
            for (n, t) in [
                ("attn_norm_gain", &l.attn_norm_gain),
                ("attn_norm_bias", &l.attn_norm_bias),
                ("ff_norm_gain", &l.ff_norm_gain),
                ("ff_norm_bias", &l.ff_norm_bias),
                ("ff_out_bias", &l.ff_out_bias),
            ] {
                check(&format!("layers.{i}.{n}"), t.shape(), &[d]);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(problems.join("; ")))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}
fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
    out: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> NormCache {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let out = &xhat * gain + bias;
    NormCache { xhat, rstd, out }
}

/// Returns `dx` and accumulates `dgain`/`dbias` when given.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &h| *v = r * (*v - mean_d - h * mean_dx));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `x Wᵀ`, plus `scale · (x Bᵀ) Aᵀ` when an adapter is attached. The
/// second value is the adapter's `x Bᵀ` intermediate.
fn project(
    x: &Array2<f64>,
    w: &Array2<f64>,
    adapter: Option<(&Array2<f64>, &Array2<f64>, f64)>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = x.dot(&w.t());
    let mid = adapter.map(|(a, b, scale)| {
        let mid = x.dot(&b.t());
        y.scaled_add(scale, &mid.dot(&a.t()));
        mid
    });
    (y, mid)
}

struct LayerCache {
    attn_norm: NormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    mids: Vec<(MatrixId, Array2<f64>)>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ff_norm: NormCache,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

impl LayerCache {
    fn mid(&self, id: MatrixId) -> Option<&Array2<f64>> {
        self.mids.iter().find(|(m, _)| *m == id).map(|(_, a)| a)
    }
}

/// Activations saved by [`forward_train`] for [`backward`].
pub struct ForwardCache {
    ids: Vec<usize>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
}

impl ForwardCache {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

fn adapter_for<'a>(
    adapters: Option<&'a LoraAdapters>,
    layer: usize,
    id: MatrixId,
) -> Option<(&'a Array2<f64>, &'a Array2<f64>, f64)> {
    adapters.and_then(|set| set.get(layer, id).map(|(_, ad)| (&ad.a, &ad.b, set.scale())))
}

fn check_input(weights: &TransformerWeights, ids: &[usize]) -> Result<()> {
    let c = &weights.config;
    if ids.is_empty() {
        return Err(Error::ShapeMismatch("empty token sequence".into()));
    }
    if ids.len() > c.context_length {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            context: c.context_length,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
        return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary {}", c.vocab_size)));
    }
    Ok(())
}

/// Logits for every position (`sequence × vocab`).
pub fn forward(weights: &TransformerWeights, adapters: Option<&LoraAdapters>, ids: &[usize]) -> Result<Array2<f64>> {
    let positions: Vec<usize> = (0..ids.len()).collect();
    forward_train(weights, adapters, ids, &positions).map(|(logits, _)| logits)
}

/// Runs the model and returns logits only at `positions`, plus the cache
/// needed to backpropagate from them.
pub fn forward_train(
    weights: &TransformerWeights,
    adapters: Option<&LoraAdapters>,
    ids: &[usize],
    positions: &[usize],
) -> Result<(Array2<f64>, ForwardCache)> {
    check_input(weights, ids)?;
    if let Some(&p) = positions.iter().find(|&&p| p >= ids.len()) {
        return Err(Error::ShapeMismatch(format!("position {p} beyond sequence length {}", ids.len())));
    }
    if let Some(set) = adapters {
        set.check_against(weights)?;
    }
    let c = &weights.config;
    let t = ids.len();
    let dh = c.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut h = Array2::zeros((t, c.d_model));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = h.row_mut(i);
        row.assign(&weights.token_embedding.row(id));
        row += &weights.position_embedding.row(i);
    }

    let mut layer_caches = Vec::with_capacity(c.n_layers);
    for (li, layer) in weights.layers.iter().enumerate() {
        let attn_norm = layer_norm(&h, &layer.attn_norm_gain, &layer.attn_norm_bias);
        let mut mids = Vec::new();
        let mut run = |id: MatrixId, x: &Array2<f64>| {
            let (y, mid) = project(x, layer.matrix(id), adapter_for(adapters, li, id));
            if let Some(m) = mid {
                mids.push((id, m));
            }
            y
        };
        let q = run(MatrixId::Query, &attn_norm.out);
        let k = run(MatrixId::Key, &attn_norm.out);
        let v = run(MatrixId::Value, &attn_norm.out);

        let mut attn = Array2::zeros((t, c.d_model));
        let mut probs = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            for i in 0..t {
                for j in 0..t {
                    scores[[i, j]] = if j > i { f64::NEG_INFINITY } else { scores[[i, j]] * inv_sqrt };
                }
            }
            let p = softmax_rows(&scores);
            attn.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let attn_out = run(MatrixId::Output, &attn);
        h += &attn_out;

        let ff_norm = layer_norm(&h, &layer.ff_norm_gain, &layer.ff_norm_bias);
        let (mut ff_pre, mid) = project(&ff_norm.out, &layer.ff_in, adapter_for(adapters, li, MatrixId::FfIn));
        if let Some(m) = mid {
            mids.push((MatrixId::FfIn, m));
        }
        ff_pre += &layer.ff_in_bias;
        let ff_act = ff_pre.mapv(gelu);
        let (mut ff_out, mid) = project(&ff_act, &layer.ff_out, adapter_for(adapters, li, MatrixId::FfOut));
        if let Some(m) = mid {
            mids.push((MatrixId::FfOut, m));
        }
        ff_out += &layer.ff_out_bias;
        h += &ff_out;

        layer_caches.push(LayerCache {
            attn_norm,
            q,
            k,
            v,
            mids,
            probs,
            attn,
            ff_norm,
            ff_pre,
            ff_act,
        });
    }

    let final_norm = layer_norm(&h, &weights.final_norm_gain, &weights.final_norm_bias);
    let selected = final_norm.out.select(Axis(0), positions);
    let logits = selected.dot(&weights.lm_head.t());
    Ok((
        logits,
        ForwardCache {
            ids: ids.to_vec(),
            positions: positions.to_vec(),
            layers: layer_caches,
            final_norm,
        },
    ))
}

/// Gradients of a scalar loss. `base` is present only when base-weight
/// gradients were requested; `adapters` holds `(dA, dB)` per adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub base: Option<TransformerWeights>,
    pub adapters: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Gradients {
    pub fn zeros(weights: &TransformerWeights, adapters: Option<&LoraAdapters>, with_base: bool) -> Self {
        Self {
            base: with_base.then(|| weights.zeros_like()),
            adapters: adapters
                .map(|set| {
                    set.adapters
                        .iter()
                        .map(|ad| (Array2::zeros(ad.a.raw_dim()), Array2::zeros(ad.b.raw_dim())))
                        .collect()
                })
                .unwrap_or_default(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        if let (Some(mine), Some(theirs)) = (self.base.as_mut(), other.base.as_ref()) {
            for ((_, a), (_, b)) in mine.tensors_mut().into_iter().zip(theirs.tensors()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        for ((da, db), (oa, ob)) in self.adapters.iter_mut().zip(&other.adapters) {
            *da += oa;
            *db += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        if let Some(base) = self.base.as_mut() {
            for (_, t) in base.tensors_mut() {
                t.iter_mut().for_each(|x| *x *= factor);
            }
        }
        for (da, db) in &mut self.adapters {
            da.mapv_inplace(|x| x * factor);
            db.mapv_inplace(|x| x * factor);
        }
    }
}

/// Accumulates gradients of `Σ dlogits ⊙ logits` through one projection.
#[allow(clippy::too_many_arguments)]
fn project_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    layer: usize,
    id: MatrixId,
    mid: Option<&Array2<f64>>,
    adapters: Option<&LoraAdapters>,
    grads: &mut Gradients,
    dw: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    let mut dx = dy.dot(w);
    if let Some(dw) = dw {
        *dw += &dy.t().dot(x);
    }
    if let (Some(set), Some(mid)) = (adapters, mid) {
        if let Some((idx, ad)) = set.get(layer, id) {
            let scale = set.scale();
            let dy_a = dy.dot(&ad.a);
            dx.scaled_add(scale, &dy_a.dot(&ad.b));
            let (ga, gb) = &mut grads.adapters[idx];
            ga.scaled_add(scale, &dy.t().dot(mid));
            gb.scaled_add(scale, &dy_a.t().dot(x));
        }
    }
    dx
}

/// Backpropagates `dlogits` (rows aligned with the cache's positions).
pub fn backward(
    weights: &TransformerWeights,
    adapters: Option<&LoraAdapters>,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    with_base: bool,
) -> Gradients {
    let c = &weights.config;
    let t = cache.ids.len();
    let dh = c.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut grads = Gradients::zeros(weights, adapters, with_base);

    let selected = cache.final_norm.out.select(Axis(0), &cache.positions);
    if let Some(base) = grads.base.as_mut() {
        base.lm_head += &dlogits.t().dot(&selected);
    }
    let d_sel = dlogits.dot(&weights.lm_head);
    let mut d_final = Array2::zeros((t, c.d_model));
    for (row, &p) in d_sel.rows().into_iter().zip(&cache.positions) {
        let mut target = d_final.row_mut(p);
        target += &row;
    }
    let mut dh_res = {
        let g = grads.base.as_mut().map(|b| (&mut b.final_norm_gain, &mut b.final_norm_bias));
        layer_norm_backward(&d_final, &cache.final_norm, &weights.final_norm_gain, g)
    };

    for li in (0..c.n_layers).rev() {
        let layer = &weights.layers[li];
        let lc = &cache.layers[li];

        // feed-forward branch
        let d_ff_out = &dh_res;
        let mut d_ff_out_w = grads.base.as_ref().map(|_| Array2::zeros(layer.ff_out.raw_dim()));
        let d_act = project_backward(
            d_ff_out,
            &lc.ff_act,
            &layer.ff_out,
            li,
            MatrixId::FfOut,
            lc.mid(MatrixId::FfOut),
            adapters,
            &mut grads,
            d_ff_out_w.as_mut(),
        );
        let d_pre = Zip::from(&d_act).and(&lc.ff_pre).map_collect(|&g, &u| g * gelu_grad(u));
        let mut d_ff_in_w = grads.base.as_ref().map(|_| Array2::zeros(layer.ff_in.raw_dim()));
        let d_ff_norm = project_backward(
            &d_pre,
            &lc.ff_norm.out,
            &layer.ff_in,
            li,
            MatrixId::FfIn,
            lc.mid(MatrixId::FfIn),
            adapters,
            &mut grads,
            d_ff_in_w.as_mut(),
        );
        let d_mid_from_ff = {
            let g = grads
                .base
                .as_mut()
                .map(|b| {
                    let l = &mut b.layers[li];
                    (&mut l.ff_norm_gain, &mut l.ff_norm_bias)
                });
            layer_norm_backward(&d_ff_norm, &lc.ff_norm, &layer.ff_norm_gain, g)
        };
        if let Some(b) = grads.base.as_mut() {
            let bl = &mut b.layers[li];
            bl.ff_out += &d_ff_out_w.unwrap();
            bl.ff_in += &d_ff_in_w.unwrap();
            bl.ff_out_bias += &dh_res.sum_axis(Axis(0));
            bl.ff_in_bias += &d_pre.sum_axis(Axis(0));
        }
        dh_res += &d_mid_from_ff;

        // attention branch
        let mut d_out_w = grads.base.as_ref().map(|_| Array2::zeros(layer.output.raw_dim()));
        let d_attn = project_backward(
            &dh_res,
            &lc.attn,
            &layer.output,
            li,
            MatrixId::Output,
            lc.mid(MatrixId::Output),
            adapters,
            &mut grads,
            d_out_w.as_mut(),
        );
        let mut dq = Array2::zeros((t, c.d_model));
        let mut dk = Array2::zeros((t, c.d_model));
        let mut dv = Array2::zeros((t, c.d_model));
        for head in 0..c.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let p = &lc.probs[head];
            let d_o = d_attn.slice(cols);
            let dp = d_o.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_o));
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|v, &pv| *v -= pv * dot);
            }
            ds.mapv_inplace(|x| x * inv_sqrt);
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        let x = &lc.attn_norm.out;
        let mut dwq = grads.base.as_ref().map(|_| Array2::zeros(layer.query.raw_dim()));
        let mut dwk = grads.base.as_ref().map(|_| Array2::zeros(layer.key.raw_dim()));
        let mut dwv = grads.base.as_ref().map(|_| Array2::zeros(layer.value.raw_dim()));
        let mut d_norm = project_backward(&dq, x, &layer.query, li, MatrixId::Query, lc.mid(MatrixId::Query), adapters, &mut grads, dwq.as_mut());
        d_norm += &project_backward(&dk, x, &layer.key, li, MatrixId::Key, lc.mid(MatrixId::Key), adapters, &mut grads, dwk.as_mut());
        d_norm += &project_backward(&dv, x, &layer.value, li, MatrixId::Value, lc.mid(MatrixId::Value), adapters, &mut grads, dwv.as_mut());
        let d_in_from_attn = {
            let g = grads
                .base
                .as_mut()
                .map(|b| {
                    let l = &mut b.layers[li];
                    (&mut l.attn_norm_gain, &mut l.attn_norm_bias)
                });
            layer_norm_backward(&d_norm, &lc.attn_norm, &layer.attn_norm_gain, g)
        };
        if let Some(b) = grads.base.as_mut() {
            let bl = &mut b.layers[li];
            bl.output += &d_out_w.unwrap();
            bl.query += &dwq.unwrap();
            bl.key += &dwk.unwrap();
            bl.value += &dwv.unwrap();
        }
        dh_res += &d_in_from_attn;
    }

    if let Some(b) = grads.base.as_mut() {
        for (i, &id) in cache.ids.iter().enumerate() {
            let g = dh_res.row(i);
            let mut tok = b.token_embedding.row_mut(id);
            tok += &g;
            let mut pos = b.position_embedding.row_mut(i);
            pos += &g;
        }
    }
    grads
}
