//! The two learnable function families: a masked per-output-variable drift
//! network whose first ("graph") layer row norms carry the inferred graph,
//! and a time- and knockout-conditioned score network. Forward and backward
//! passes are hand-coded; optimization is AdamW plus a row-wise group-lasso
//! proximal step on the graph layers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{norm, Mat, Prng};
use crate::{Result, SfkError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative recovered from the post-activation value (both ELU and
    /// ReLU are monotone, so the output determines the branch).
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if a > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = SfkError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            other => Err(SfkError::InvalidArgument(format!(
                "unknown activation '{}' (expected elu|relu)",
                other
            ))),
        }
    }
}

/// One affine layer, weights `fan_in x fan_out` plus a bias row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, w_std: f64, b_std: f64, prng: &mut Prng) -> Self {
        let mut w = Mat::zeros(fan_in, fan_out);
        for v in w.as_mut_slice() {
            *v = w_std * prng.gauss();
        }
        let b = (0..fan_out).map(|_| b_std * prng.gauss()).collect();
        Dense { w, b }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Mat::zeros(fan_in, fan_out),
            b: vec![0.0; fan_out],
        }
    }

    fn zeros_like(&self) -> Self {
        Dense::zeros(self.w.rows(), self.w.cols())
    }

    fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|v| v.is_finite())
    }
}

fn add_bias(m: &mut Mat, b: &[f64]) {
    for i in 0..m.rows() {
        for (v, &bv) in m.row_mut(i).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn apply_activation(m: &mut Mat, act: Activation) {
    for v in m.as_mut_slice() {
        *v = act.apply(*v);
    }
}

fn col_sums(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// delta <- (delta . w^T) * act'(a), the standard backprop step through an
/// activated affine layer with post-activation `a`.
fn backprop_through(delta: &Mat, w: &Mat, a: &Mat, act: Activation) -> Result<Mat> {
    let mut out = delta.matmul_nt(w)?;
    for (v, &av) in out.as_mut_slice().iter_mut().zip(a.as_slice()) {
        *v *= act.deriv_from_output(av);
    }
    Ok(out)
}

/// Which inputs a condition severs: under knockout `c`, the influence of
/// source coordinate `c` on every target `j != c` is removed; the
/// observational mask allows everything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionMask {
    d: usize,
    knockout: Option<usize>,
}

impl InterventionMask {
    pub fn observational(d: usize) -> Self {
        InterventionMask { d, knockout: None }
    }

    pub fn knockout(d: usize, c: usize) -> Result<Self> {
        if c >= d {
            return Err(SfkError::InvalidArgument(format!(
                "knockout index {} out of range for d={}",
                c, d
            )));
        }
        Ok(InterventionMask { d, knockout: Some(c) })
    }

    pub fn from_knockout(d: usize, c: Option<usize>) -> Result<Self> {
        match c {
            None => Ok(Self::observational(d)),
            Some(c) => Self::knockout(d, c),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn knockout_index(&self) -> Option<usize> {
        self.knockout
    }

    /// Mask entry for (target j, source i): false iff the edge is severed.
    pub fn allows(&self, target_j: usize, source_i: usize) -> bool {
        match self.knockout {
            Some(c) => !(source_i == c && target_j != c),
            None => true,
        }
    }

    /// The input coordinate excluded from target `j`'s graph layer, if any.
    fn skipped_input(&self, j: usize) -> Option<usize> {
        self.knockout.filter(|&c| c != j)
    }

    /// Conditioning vector for the score network: 1 at perturbed entries.
    pub fn k_vector(&self) -> Vec<f64> {
        let mut k = vec![0.0; self.d];
        if let Some(c) = self.knockout {
            k[c] = 1.0;
        }
        k
    }
}

/// One per-output-variable network: graph layer `d x h`, `depth-1` hidden
/// `h x h` layers, and an `h x 1` output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerOutputNet {
    pub graph: Dense,
    pub hidden: Vec<Dense>,
    pub out: Dense,
}

/// Parameters of the autonomous drift. Output `j` depends on the inputs only
/// through `nets[j]`; nothing is shared across outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgmParams {
    pub d: usize,
    pub h: usize,
    /// Number of weight layers after the graph layer (depth-1 hidden + head).
    pub depth: usize,
    pub activation: Activation,
    pub nets: Vec<PerOutputNet>,
}

impl NgmParams {
    pub fn init(
        d: usize,
        h: usize,
        depth: usize,
        activation: Activation,
        w_std: f64,
        b_std: f64,
        prng: &mut Prng,
    ) -> Result<Self> {
        if d == 0 || h == 0 || depth == 0 {
            return Err(SfkError::InvalidArgument(format!(
                "ngm dims must be positive (d={}, h={}, depth={})",
                d, h, depth
            )));
        }
        let nets = (0..d)
            .map(|_| PerOutputNet {
                graph: Dense::init(d, h, w_std, b_std, prng),
                hidden: (0..depth - 1)
                    .map(|_| Dense::init(h, h, w_std, b_std, prng))
                    .collect(),
                out: Dense::init(h, 1, w_std, b_std, prng),
            })
            .collect();
        Ok(NgmParams {
            d,
            h,
            depth,
            activation,
            nets,
        })
    }

    pub fn zeros(d: usize, h: usize, depth: usize, activation: Activation) -> Self {
        NgmParams {
            d,
            h,
            depth,
            activation,
            nets: (0..d)
                .map(|_| PerOutputNet {
                    graph: Dense::zeros(d, h),
                    hidden: (0..depth - 1).map(|_| Dense::zeros(h, h)).collect(),
                    out: Dense::zeros(h, 1),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NgmParams {
            d: self.d,
            h: self.h,
            depth: self.depth,
            activation: self.activation,
            nets: self
                .nets
                .iter()
                .map(|n| PerOutputNet {
                    graph: n.graph.zeros_like(),
                    hidden: n.hidden.iter().map(Dense::zeros_like).collect(),
                    out: n.out.zeros_like(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nets
            .iter()
            .all(|n| n.graph.is_finite() && n.out.is_finite() && n.hidden.iter().all(Dense::is_finite))
    }

    /// Flat view of every parameter tensor, in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for n in &self.nets {
            out.push(n.graph.w.as_slice());
            out.push(n.graph.b.as_slice());
            for l in &n.hidden {
                out.push(l.w.as_slice());
                out.push(l.b.as_slice());
            }
            out.push(n.out.w.as_slice());
            out.push(n.out.b.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for n in &mut self.nets {
            out.push(n.graph.w.as_mut_slice());
            out.push(n.graph.b.as_mut_slice());
            for l in &mut n.hidden {
                out.push(l.w.as_mut_slice());
                out.push(l.b.as_mut_slice());
            }
            out.push(n.out.w.as_mut_slice());
            out.push(n.out.b.as_mut_slice());
        }
        out
    }
}

/// Activations cached by [`ngm_forward`] for the matching backward call.
pub struct NgmCache {
    x: Mat,
    mask: InterventionMask,
    /// Per output j: post-activation of the graph layer and of each hidden
    /// layer, in forward order.
    acts: Vec<Vec<Mat>>,
}

fn net_forward_one(
    net: &PerOutputNet,
    x: &Mat,
    skip: Option<usize>,
    act: Activation,
) -> Result<(Vec<f64>, Vec<Mat>)> {
    let mut acts = Vec::with_capacity(net.hidden.len() + 1);
    let mut a = match skip {
        None => x.matmul(&net.graph.w)?,
        Some(c) => x.matmul_skip_row(&net.graph.w, Some(c))?,
    };
    add_bias(&mut a, &net.graph.b);
    apply_activation(&mut a, act);
    acts.push(a);
    for l in &net.hidden {
        let mut z = acts.last().unwrap().matmul(&l.w)?;
        add_bias(&mut z, &l.b);
        apply_activation(&mut z, act);
        acts.push(z);
    }
    let last = acts.last().unwrap();
    let mut y = last.matmul(&net.out.w)?;
    add_bias(&mut y, &net.out.b);
    Ok((y.as_slice().to_vec(), acts))
}

/// Evaluate the masked drift on a batch. Returns the `n x d` drift and the
/// cache consumed by [`ngm_backward`].
pub fn ngm_forward(params: &NgmParams, x: &Mat, mask: &InterventionMask) -> Result<(Mat, NgmCache)> {
    if x.cols() != params.d {
        return Err(SfkError::shape(
            "ngm_forward",
            format!("input has {} columns, model d={}", x.cols(), params.d),
        ));
    }
    if mask.d() != params.d {
        return Err(SfkError::shape(
            "ngm_forward",
            format!("mask d={} vs model d={}", mask.d(), params.d),
        ));
    }
    let per_j: Vec<(Vec<f64>, Vec<Mat>)> = params
        .nets
        .par_iter()
        .enumerate()
        .map(|(j, net)| net_forward_one(net, x, mask.skipped_input(j), params.activation))
        .collect::<Result<_>>()?;
    let n = x.rows();
    let mut out = Mat::zeros(n, params.d);
    let mut acts = Vec::with_capacity(params.d);
    for (j, (col, a)) in per_j.into_iter().enumerate() {
        for i in 0..n {
            out.set(i, j, col[i]);
        }
        acts.push(a);
    }
    Ok((
        out,
        NgmCache {
            x: x.clone(),
            mask: mask.clone(),
            acts,
        },
    ))
}

fn net_backward_one(
    net: &PerOutputNet,
    x: &Mat,
    acts: &[Mat],
    gcol: &Mat,
    skip: Option<usize>,
    act: Activation,
) -> Result<PerOutputNet> {
    let last = acts.last().unwrap();
    let gw_out = last.matmul_tn(gcol)?;
    let gb_out = col_sums(gcol);
    let mut delta = backprop_through(gcol, &net.out.w, last, act)?;
    let mut ghidden: Vec<Dense> = Vec::with_capacity(net.hidden.len());
    for (l, layer) in net.hidden.iter().enumerate().rev() {
        let prev = &acts[l];
        ghidden.push(Dense {
            w: prev.matmul_tn(&delta)?,
            b: col_sums(&delta),
        });
        delta = backprop_through(&delta, &layer.w, prev, act)?;
    }
    ghidden.reverse();
    let mut gw_graph = x.matmul_tn(&delta)?;
    if let Some(c) = skip {
        // The masked row never entered the forward pass; its gradient is
        // exactly zero, not the x^T delta product.
        for v in gw_graph.row_mut(c) {
            *v = 0.0;
        }
    }
    Ok(PerOutputNet {
        graph: Dense {
            w: gw_graph,
            b: col_sums(&delta),
        },
        hidden: ghidden,
        out: Dense { w: gw_out, b: gb_out },
    })
}

/// Exact reverse-mode gradients of [`ngm_forward`] contracted with the
/// upstream gradient (`n x d`).
pub fn ngm_backward(params: &NgmParams, cache: &NgmCache, upstream: &Mat) -> Result<NgmParams> {
    let n = cache.x.rows();
    if upstream.rows() != n || upstream.cols() != params.d {
        return Err(SfkError::shape(
            "ngm_backward",
            format!("upstream {}x{}, expected {}x{}", upstream.rows(), upstream.cols(), n, params.d),
        ));
    }
    if cache.acts.len() != params.d
        || cache
            .acts
            .first()
            .is_some_and(|a| a[0].cols() != params.h || a.len() != params.depth)
    {
        return Err(SfkError::shape("ngm_backward", "cache does not match parameters".to_string()));
    }
    let grads: Vec<PerOutputNet> = params
        .nets
        .par_iter()
        .enumerate()
        .map(|(j, net)| {
            let mut gcol = Mat::zeros(n, 1);
            for i in 0..n {
                gcol.set(i, 0, upstream.get(i, j));
            }
            net_backward_one(
                net,
                &cache.x,
                &cache.acts[j],
                &gcol,
                cache.mask.skipped_input(j),
                params.activation,
            )
        })
        .collect::<Result<_>>()?;
    let mut out = params.zeros_like();
    out.nets = grads;
    Ok(out)
}

/// Read the inferred graph: entry (j, i) is the Euclidean norm of row i of
/// output j's graph layer. Self-edges are retained; scoring decides whether
/// to exclude them.
pub fn extract_graph(params: &NgmParams) -> Mat {
    let mut a = Mat::zeros(params.d, params.d);
    for (j, net) in params.nets.iter().enumerate() {
        for i in 0..params.d {
            a.set(j, i, norm(net.graph.w.row(i)));
        }
    }
    a
}

/// Row-wise shrink-or-kill update on every graph layer: a row with norm at
/// most `tau` becomes zero, otherwise it is scaled by `1 - tau/norm`. No
/// other parameters are touched.
pub fn group_lasso_prox(params: &mut NgmParams, tau: f64) {
    if tau == 0.0 {
        return;
    }
    for net in &mut params.nets {
        for i in 0..net.graph.w.rows() {
            let row = net.graph.w.row_mut(i);
            let r = norm(row);
            if r <= tau {
                row.fill(0.0);
            } else {
                let s = 1.0 - tau / r;
                for v in row {
                    *v *= s;
                }
            }
        }
    }
}

/// Group-lasso penalty value: the sum of graph-layer row norms.
pub fn group_lasso_value(params: &NgmParams) -> f64 {
    params
        .nets
        .iter()
        .map(|n| (0..n.graph.w.rows()).map(|i| norm(n.graph.w.row(i))).sum::<f64>())
        .sum()
}

/// Weights of the time- and knockout-conditioned score network: a plain MLP
/// on the concatenated `[x, t, k]` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub d: usize,
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

impl ScoreParams {
    pub fn init(
        d: usize,
        hidden: &[usize],
        activation: Activation,
        w_std: f64,
        b_std: f64,
        prng: &mut Prng,
    ) -> Result<Self> {
        if d == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(SfkError::InvalidArgument(
                "score net dims must be positive".to_string(),
            ));
        }
        let mut widths = vec![2 * d + 1];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], w_std, b_std, prng))
            .collect();
        Ok(ScoreParams {
            d,
            activation,
            layers,
        })
    }

    pub fn zeros(d: usize, hidden: &[usize], activation: Activation) -> Self {
        let mut widths = vec![2 * d + 1];
        widths.extend_from_slice(hidden);
        widths.push(d);
        ScoreParams {
            d,
            activation,
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ScoreParams {
            d: self.d,
            activation: self.activation,
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }
}

pub struct ScoreCache {
    input: Mat,
    /// Post-activation of every layer except the linear head.
    acts: Vec<Mat>,
}

/// Evaluate the score network on a batch: `x` is `n x d`, `t` is `n x 1`
/// (global time), `k` is the `n x d` conditioning matrix.
pub fn score_forward(params: &ScoreParams, x: &Mat, t: &Mat, k: &Mat) -> Result<(Mat, ScoreCache)> {
    let n = x.rows();
    if x.cols() != params.d || k.rows() != n || k.cols() != params.d || t.rows() != n || t.cols() != 1 {
        return Err(SfkError::shape(
            "score_forward",
            format!(
                "x {}x{}, t {}x{}, k {}x{} for d={}",
                x.rows(),
                x.cols(),
                t.rows(),
                t.cols(),
                k.rows(),
                k.cols(),
                params.d
            ),
        ));
    }
    let mut input = Mat::zeros(n, 2 * params.d + 1);
    for i in 0..n {
        let row = input.row_mut(i);
        row[..params.d].copy_from_slice(x.row(i));
        row[params.d] = t.get(i, 0);
        row[params.d + 1..].copy_from_slice(k.row(i));
    }
    let mut acts = Vec::with_capacity(params.layers.len() - 1);
    let mut cur = input.clone();
    for (li, l) in params.layers.iter().enumerate() {
        let mut z = cur.matmul(&l.w)?;
        add_bias(&mut z, &l.b);
        if li + 1 < params.layers.len() {
            apply_activation(&mut z, params.activation);
            acts.push(z.clone());
        }
        cur = z;
    }
    Ok((cur, ScoreCache { input, acts }))
}

/// Exact reverse-mode gradients of [`score_forward`] contracted with the
/// upstream gradient.
pub fn score_backward(params: &ScoreParams, cache: &ScoreCache, upstream: &Mat) -> Result<ScoreParams> {
    let n = cache.input.rows();
    if upstream.rows() != n || upstream.cols() != params.d {
        return Err(SfkError::shape(
            "score_backward",
            format!("upstream {}x{}, expected {}x{}", upstream.rows(), upstream.cols(), n, params.d),
        ));
    }
    if cache.acts.len() + 1 != params.layers.len() {
        return Err(SfkError::shape("score_backward", "cache does not match parameters".to_string()));
    }
    let mut grads = params.zeros_like();
    let mut delta = upstream.clone();
    for li in (0..params.layers.len()).rev() {
        let below: &Mat = if li == 0 { &cache.input } else { &cache.acts[li - 1] };
        grads.layers[li].w = below.matmul_tn(&delta)?;
        grads.layers[li].b = col_sums(&delta);
        if li > 0 {
            delta = backprop_through(&delta, &params.layers[li].w, &cache.acts[li - 1], params.activation)?;
        }
    }
    Ok(grads)
}

/// AdamW with decoupled weight decay and bias-corrected moments. The moment
/// buffers are aligned with the flat tensor traversal used by the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(lr: f64, weight_decay: f64, tensor_lens: &[usize]) -> Self {
        AdamWState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: tensor_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: tensor_lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    /// One update over matching parameter/gradient tensor lists.
    pub fn apply(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(SfkError::shape(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (ti, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[ti].len() {
                return Err(SfkError::shape(
                    "adamw_step",
                    format!("tensor {} length mismatch", ti),
                ));
            }
            for (ei, &gv) in g.iter().enumerate() {
                if !gv.is_finite() {
                    return Err(SfkError::NonFinite(format!(
                        "gradient tensor {} element {} = {} at optimizer step {}",
                        ti, ei, gv, self.step
                    )));
                }
                let m = &mut self.m[ti][ei];
                let v = &mut self.v[ti][ei];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let pv = &mut p[ei];
                *pv *= 1.0 - self.lr * self.weight_decay;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
