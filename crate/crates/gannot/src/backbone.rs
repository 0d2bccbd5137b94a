//! A small bi-directional gated recurrent seq2seq backbone with manual
//! forward and backward passes. One probability row per input frame
//! (many-to-many); the loss head on top is either CTC or per-frame
//! cross-entropy, nothing else differs between the two modes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_prob, softmax};

/// Which loss head sits on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Ctc,
    Ce,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(LossMode::Ctc),
            "ce" => Ok(LossMode::Ce),
            other => Err(Error::Config(format!(
                "unknown loss mode '{other}', expected 'ctc' or 'ce'"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Ctc => "ctc",
            LossMode::Ce => "ce",
        })
    }
}

/// Input dimension, recurrent width, and gesture-class count of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl ModelDims {
    /// Output width: gesture classes plus the blank/background column.
    pub fn width(&self) -> usize {
        self.num_classes + 1
    }
}

/// Weights of one gated recurrent direction. `*_w` maps the projected input,
/// `*_u` the previous hidden state; all matrices are `hidden x hidden`,
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruWeights {
    pub update_w: Vec<f64>,
    pub update_u: Vec<f64>,
    pub update_b: Vec<f64>,
    pub reset_w: Vec<f64>,
    pub reset_u: Vec<f64>,
    pub reset_b: Vec<f64>,
    pub cand_w: Vec<f64>,
    pub cand_u: Vec<f64>,
    pub cand_b: Vec<f64>,
}

impl GruWeights {
    fn zeros(hidden: usize) -> Self {
        let m = vec![0.0; hidden * hidden];
        let b = vec![0.0; hidden];
        Self {
            update_w: m.clone(),
            update_u: m.clone(),
            update_b: b.clone(),
            reset_w: m.clone(),
            reset_u: m.clone(),
            reset_b: b.clone(),
            cand_w: m.clone(),
            cand_u: m,
            cand_b: b,
        }
    }

    fn blocks(&self) -> [&Vec<f64>; 9] {
        [
            &self.update_w,
            &self.update_u,
            &self.update_b,
            &self.reset_w,
            &self.reset_u,
            &self.reset_b,
            &self.cand_w,
            &self.cand_u,
            &self.cand_b,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.update_w,
            &mut self.update_u,
            &mut self.update_b,
            &mut self.reset_w,
            &mut self.reset_u,
            &mut self.reset_b,
            &mut self.cand_w,
            &mut self.cand_u,
            &mut self.cand_b,
        ]
    }
}

/// All weights of the backbone: input projection, forward and backward
/// recurrent directions, and the output projection onto `K + 1` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    dims: ModelDims,
    /// `hidden x feat_dim`, row-major.
    pub in_w: Vec<f64>,
    pub in_b: Vec<f64>,
    pub fwd: GruWeights,
    pub bwd: GruWeights,
    /// `(num_classes + 1) x (2 * hidden)`, row-major; the first `hidden`
    /// columns read the forward state, the rest the backward state.
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            in_w: vec![0.0; dims.hidden * dims.feat_dim],
            in_b: vec![0.0; dims.hidden],
            fwd: GruWeights::zeros(dims.hidden),
            bwd: GruWeights::zeros(dims.hidden),
            out_w: vec![0.0; dims.width() * 2 * dims.hidden],
            out_b: vec![0.0; dims.width()],
        }
    }

    /// Seeded uniform(-0.08, 0.08) initialization.
    pub fn init(dims: ModelDims, rng: &mut impl rand::Rng) -> Self {
        let mut params = Self::zeros(dims);
        for block in params.blocks_mut() {
            for w in block.iter_mut() {
                *w = rng.gen_range(-0.08..0.08);
            }
        }
        params
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    /// All weight blocks in a fixed order; gradients share the layout.
    pub fn blocks(&self) -> Vec<&Vec<f64>> {
        let mut blocks = vec![&self.in_w, &self.in_b];
        blocks.extend(self.fwd.blocks());
        blocks.extend(self.bwd.blocks());
        blocks.push(&self.out_w);
        blocks.push(&self.out_b);
        blocks
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut blocks = vec![&mut self.in_w, &mut self.in_b];
        blocks.extend(self.fwd.blocks_mut());
        blocks.extend(self.bwd.blocks_mut());
        blocks.push(&mut self.out_w);
        blocks.push(&mut self.out_b);
        blocks
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Checks that every weight block matches the declared dimensions and
    /// that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let expect = [
            ("in_w", self.in_w.len(), d.hidden * d.feat_dim),
            ("in_b", self.in_b.len(), d.hidden),
            ("out_w", self.out_w.len(), d.width() * 2 * d.hidden),
            ("out_b", self.out_b.len(), d.width()),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::dim(format!("{name} has {got} weights, expected {want}")));
            }
        }
        for gru in [&self.fwd, &self.bwd] {
            for block in gru.blocks() {
                if block.len() != d.hidden * d.hidden && block.len() != d.hidden {
                    return Err(Error::dim(format!(
                        "recurrent block has {} weights, expected {} or {}",
                        block.len(),
                        d.hidden * d.hidden,
                        d.hidden
                    )));
                }
            }
        }
        if self.blocks().iter().any(|b| b.iter().any(|w| !w.is_finite())) {
            return Err(Error::Config("model weights contain non-finite values".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// out = M x, with M row-major `rows x cols`.
fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        *o = m[i * cols..(i + 1) * cols]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// out += M^T x, with M row-major `rows x cols`, x of length `rows`.
fn matvec_t_add(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let xi = x[i];
        for (o, &w) in out.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *o += w * xi;
        }
    }
}

/// M += a b^T (outer product), M row-major `a.len() x b.len()`.
fn outer_add(m: &mut [f64], a: &[f64], b: &[f64]) {
    for (i, &ai) in a.iter().enumerate() {
        for (mij, &bj) in m[i * b.len()..(i + 1) * b.len()].iter_mut().zip(b) {
            *mij += ai * bj;
        }
    }
}

/// Per-step activations of one recurrent direction, stored in processing
/// order (the backward direction processes frames last-to-first).
#[derive(Debug, Clone)]
struct DirectionCache {
    update: Vec<f64>,
    reset: Vec<f64>,
    cand: Vec<f64>,
    hidden: Vec<f64>,
    reset_hidden: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: ModelDims,
    len: usize,
    window: Vec<Vec<f64>>,
    embed: Vec<f64>,
    fwd: DirectionCache,
    bwd: DirectionCache,
}

fn gru_forward(
    gw: &GruWeights,
    embed: &[f64],
    len: usize,
    hidden: usize,
    reverse: bool,
) -> DirectionCache {
    let mut cache = DirectionCache {
        update: vec![0.0; len * hidden],
        reset: vec![0.0; len * hidden],
        cand: vec![0.0; len * hidden],
        hidden: vec![0.0; len * hidden],
        reset_hidden: vec![0.0; len * hidden],
    };
    let mut h_prev = vec![0.0; hidden];
    let mut a = vec![0.0; hidden];
    let mut rec = vec![0.0; hidden];
    for step in 0..len {
        let frame = if reverse { len - 1 - step } else { step };
        let e = &embed[frame * hidden..(frame + 1) * hidden];
        let at = step * hidden..(step + 1) * hidden;

        matvec(&gw.update_w, hidden, hidden, e, &mut a);
        matvec(&gw.update_u, hidden, hidden, &h_prev, &mut rec);
        for j in 0..hidden {
            cache.update[at.start + j] = sigmoid(a[j] + rec[j] + gw.update_b[j]);
        }

        matvec(&gw.reset_w, hidden, hidden, e, &mut a);
        matvec(&gw.reset_u, hidden, hidden, &h_prev, &mut rec);
        for j in 0..hidden {
            cache.reset[at.start + j] = sigmoid(a[j] + rec[j] + gw.reset_b[j]);
            cache.reset_hidden[at.start + j] = cache.reset[at.start + j] * h_prev[j];
        }

        matvec(&gw.cand_w, hidden, hidden, e, &mut a);
        matvec(
            &gw.cand_u,
            hidden,
            hidden,
            &cache.reset_hidden[at.clone()],
            &mut rec,
        );
        for j in 0..hidden {
            cache.cand[at.start + j] = (a[j] + rec[j] + gw.cand_b[j]).tanh();
            let z = cache.update[at.start + j];
            cache.hidden[at.start + j] = (1.0 - z) * h_prev[j] + z * cache.cand[at.start + j];
        }
        h_prev.copy_from_slice(&cache.hidden[at]);
    }
    cache
}

/// Runs the backbone over one window of frames. Returns unnormalized logits,
/// one row of `K + 1` scores per input frame, plus the cache for `backward`.
pub fn forward(params: &ModelParams, window: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
    let dims = params.dims;
    if window.is_empty() {
        return Err(Error::dim("forward pass on an empty window".into()));
    }
    if let Some(frame) = window.iter().find(|f| f.len() != dims.feat_dim) {
        return Err(Error::dim(format!(
            "window frame has dimension {}, model expects {}",
            frame.len(),
            dims.feat_dim
        )));
    }
    let len = window.len();
    let hidden = dims.hidden;

    let mut embed = vec![0.0; len * hidden];
    for (t, frame) in window.iter().enumerate() {
        let e = &mut embed[t * hidden..(t + 1) * hidden];
        matvec(&params.in_w, hidden, dims.feat_dim, frame, e);
        for (ej, b) in e.iter_mut().zip(&params.in_b) {
            *ej += b;
        }
    }

    let fwd = gru_forward(&params.fwd, &embed, len, hidden, false);
    let bwd = gru_forward(&params.bwd, &embed, len, hidden, true);

    let width = dims.width();
    let mut logits = vec![vec![0.0; width]; len];
    for (t, row) in logits.iter_mut().enumerate() {
        let hf = &fwd.hidden[t * hidden..(t + 1) * hidden];
        let hb_step = len - 1 - t; // backward cache is in processing order
        let hb = &bwd.hidden[hb_step * hidden..(hb_step + 1) * hidden];
        for (k, r) in row.iter_mut().enumerate() {
            let w = &params.out_w[k * 2 * hidden..(k + 1) * 2 * hidden];
            let dot_f: f64 = w[..hidden].iter().zip(hf).map(|(a, b)| a * b).sum();
            let dot_b: f64 = w[hidden..].iter().zip(hb).map(|(a, b)| a * b).sum();
            *r = dot_f + dot_b + params.out_b[k];
        }
    }

    Ok((
        logits,
        ForwardCache {
            dims,
            len,
            window: window.to_vec(),
            embed,
            fwd,
            bwd,
        },
    ))
}

/// Backpropagates one direction. `d_hidden[step]` is the loss gradient
/// flowing into that step's hidden state from the output layer; returns the
/// gradient w.r.t. the embedded inputs (accumulated into `d_embed`, frame
/// order).
#[allow(clippy::too_many_arguments)]
fn gru_backward(
    gw: &GruWeights,
    grad: &mut GruWeights,
    cache: &DirectionCache,
    embed: &[f64],
    d_hidden_out: &[f64],
    d_embed: &mut [f64],
    len: usize,
    hidden: usize,
    reverse: bool,
) {
    let mut d_h = vec![0.0; hidden];
    let mut d_h_prev = vec![0.0; hidden];
    let mut d_gate = vec![0.0; hidden];
    let mut d_rh = vec![0.0; hidden];
    let zero = vec![0.0; hidden];
    for step in (0..len).rev() {
        let frame = if reverse { len - 1 - step } else { step };
        let at = step * hidden..(step + 1) * hidden;
        let e = &embed[frame * hidden..(frame + 1) * hidden];
        let h_prev = if step == 0 {
            &zero[..]
        } else {
            &cache.hidden[(step - 1) * hidden..step * hidden]
        };
        for (j, d) in d_h.iter_mut().enumerate() {
            *d += d_hidden_out[at.start + j];
        }

        let update = &cache.update[at.clone()];
        let reset = &cache.reset[at.clone()];
        let cand = &cache.cand[at.clone()];
        let reset_hidden = &cache.reset_hidden[at.clone()];
        let de = &mut d_embed[frame * hidden..(frame + 1) * hidden];

        // Candidate gate: h = (1 - z) * h_prev + z * c, c = tanh(a_c).
        for j in 0..hidden {
            d_h_prev[j] = d_h[j] * (1.0 - update[j]);
            d_gate[j] = d_h[j] * update[j] * (1.0 - cand[j] * cand[j]);
        }
        outer_add(&mut grad.cand_w, &d_gate, e);
        outer_add(&mut grad.cand_u, &d_gate, reset_hidden);
        for (g, d) in grad.cand_b.iter_mut().zip(&d_gate) {
            *g += d;
        }
        matvec_t_add(&gw.cand_w, hidden, hidden, &d_gate, de);
        d_rh.fill(0.0);
        matvec_t_add(&gw.cand_u, hidden, hidden, &d_gate, &mut d_rh);
        for j in 0..hidden {
            d_h_prev[j] += d_rh[j] * reset[j];
        }

        // Update gate: z = sigmoid(a_z).
        for j in 0..hidden {
            d_gate[j] = d_h[j] * (cand[j] - h_prev[j]) * update[j] * (1.0 - update[j]);
        }
        outer_add(&mut grad.update_w, &d_gate, e);
        outer_add(&mut grad.update_u, &d_gate, h_prev);
        for (g, d) in grad.update_b.iter_mut().zip(&d_gate) {
            *g += d;
        }
        matvec_t_add(&gw.update_w, hidden, hidden, &d_gate, de);
        matvec_t_add(&gw.update_u, hidden, hidden, &d_gate, &mut d_h_prev);

        // Reset gate: r = sigmoid(a_r), applied as r * h_prev.
        for j in 0..hidden {
            d_gate[j] = d_rh[j] * h_prev[j] * reset[j] * (1.0 - reset[j]);
        }
        outer_add(&mut grad.reset_w, &d_gate, e);
        outer_add(&mut grad.reset_u, &d_gate, h_prev);
        for (g, d) in grad.reset_b.iter_mut().zip(&d_gate) {
            *g += d;
        }
        matvec_t_add(&gw.reset_w, hidden, hidden, &d_gate, de);
        matvec_t_add(&gw.reset_u, hidden, hidden, &d_gate, &mut d_h_prev);

        d_h.copy_from_slice(&d_h_prev);
    }
}

/// Gradient of the loss w.r.t. every model parameter, given the upstream
/// gradient w.r.t. the logits produced by the matching `forward` call.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_logits: &[Vec<f64>],
) -> Result<ModelParams> {
    let dims = params.dims;
    if cache.dims != dims
        || d_logits.len() != cache.len
        || d_logits.iter().any(|row| row.len() != dims.width())
    {
        return Err(Error::StaleCache);
    }
    let len = cache.len;
    let hidden = dims.hidden;
    let mut grad = ModelParams::zeros(dims);

    // Output projection, splitting the upstream gradient into the two
    // direction states.
    let mut d_h_fwd = vec![0.0; len * hidden];
    let mut d_h_bwd = vec![0.0; len * hidden];
    for (t, d_row) in d_logits.iter().enumerate() {
        let hf = &cache.fwd.hidden[t * hidden..(t + 1) * hidden];
        let hb_step = len - 1 - t;
        let hb = &cache.bwd.hidden[hb_step * hidden..(hb_step + 1) * hidden];
        for (k, &dk) in d_row.iter().enumerate() {
            let w_row = k * 2 * hidden;
            let gw = &mut grad.out_w[w_row..w_row + 2 * hidden];
            for j in 0..hidden {
                gw[j] += dk * hf[j];
                gw[hidden + j] += dk * hb[j];
            }
            grad.out_b[k] += dk;
            let w = &params.out_w[w_row..w_row + 2 * hidden];
            for j in 0..hidden {
                d_h_fwd[t * hidden + j] += w[j] * dk;
                d_h_bwd[hb_step * hidden + j] += w[hidden + j] * dk;
            }
        }
    }

    let mut d_embed = vec![0.0; len * hidden];
    gru_backward(
        &params.fwd,
        &mut grad.fwd,
        &cache.fwd,
        &cache.embed,
        &d_h_fwd,
        &mut d_embed,
        len,
        hidden,
        false,
    );
    gru_backward(
        &params.bwd,
        &mut grad.bwd,
        &cache.bwd,
        &cache.embed,
        &d_h_bwd,
        &mut d_embed,
        len,
        hidden,
        true,
    );

    for (t, frame) in cache.window.iter().enumerate() {
        let de = &d_embed[t * hidden..(t + 1) * hidden];
        outer_add(&mut grad.in_w, de, frame);
        for (g, d) in grad.in_b.iter_mut().zip(de) {
            *g += d;
        }
    }
    Ok(grad)
}

/// Mean per-frame cross-entropy of `softmax(logits)` against one target
/// class per frame, with its gradient (softmax minus one-hot, scaled by the
/// frame count).
pub fn ce_loss_and_grad(
    logits: &[Vec<f64>],
    frame_targets: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != frame_targets.len() {
        return Err(Error::dim(format!(
            "{} logit rows vs {} frame targets",
            logits.len(),
            frame_targets.len()
        )));
    }
    let width = logits.first().map_or(0, Vec::len);
    let len = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; width]; logits.len()];
    let mut probs = vec![0.0; width];
    for ((row, &target), g) in logits.iter().zip(frame_targets).zip(grad.iter_mut()) {
        if row.len() != width || target >= width {
            return Err(Error::dim(format!(
                "frame target {target} out of range for {width} output columns"
            )));
        }
        softmax(row, &mut probs);
        loss -= log_prob(probs[target]);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (probs[k] - if k == target { 1.0 } else { 0.0 }) / len;
        }
    }
    Ok((loss / len, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{ctc_loss, ctc_loss_and_grad, ProbMatrix};
    use crate::stream::LabelSequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..len)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let dims = ModelDims {
            feat_dim: 4,
            hidden: 8,
            num_classes: 2,
        };
        let params = ModelParams::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let window = random_window(&mut rng, 10, 4);
        let (logits, _) = forward(&params, &window).unwrap();
        let probs = ProbMatrix::from_logits(&logits).unwrap();
        for t in 0..10 {
            for k in 0..3 {
                assert!((probs.prob(t, k) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_length_equals_input_length() {
        let dims = ModelDims {
            feat_dim: 3,
            hidden: 6,
            num_classes: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ModelParams::init(dims, &mut rng);
        for len in [3, 50, 200] {
            let window = random_window(&mut rng, len, 3);
            let (logits, _) = forward(&params, &window).unwrap();
            assert_eq!(logits.len(), len);
            assert!(logits.iter().all(|row| row.len() == dims.width()));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dims = ModelDims {
            feat_dim: 3,
            hidden: 4,
            num_classes: 2,
        };
        let params = ModelParams::zeros(dims);
        let window = vec![vec![0.0; 5]];
        assert!(matches!(
            forward(&params, &window),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn reversing_input_and_swapping_directions_reverses_logits() {
        let dims = ModelDims {
            feat_dim: 3,
            hidden: 5,
            num_classes: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(dims, &mut rng);
        let window = random_window(&mut rng, 7, 3);

        // Swap the direction-specific blocks: the two recurrent weight sets
        // and the two halves of the output projection that read them.
        let mut swapped = params.clone();
        std::mem::swap(&mut swapped.fwd, &mut swapped.bwd);
        let hidden = dims.hidden;
        for k in 0..dims.width() {
            let row = k * 2 * hidden;
            for j in 0..hidden {
                swapped.out_w.swap(row + j, row + hidden + j);
            }
        }
        let reversed: Vec<Vec<f64>> = window.iter().rev().cloned().collect();

        let (logits, _) = forward(&params, &window).unwrap();
        let (logits_swapped, _) = forward(&swapped, &reversed).unwrap();
        for t in 0..7 {
            for k in 0..dims.width() {
                assert!(
                    (logits[t][k] - logits_swapped[6 - t][k]).abs() < 1e-12,
                    "bidirectional symmetry broken at ({t},{k})"
                );
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let dims = ModelDims {
            feat_dim: 2,
            hidden: 4,
            num_classes: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(dims, &mut rng);
        let window = random_window(&mut rng, 5, 2);
        let (logits, cache) = forward(&params, &window).unwrap();
        let zeros = vec![vec![0.0; logits[0].len()]; logits.len()];
        let grad = backward(&params, &cache, &zeros).unwrap();
        assert!(grad.blocks().iter().all(|b| b.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let dims = ModelDims {
            feat_dim: 2,
            hidden: 4,
            num_classes: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(dims, &mut rng);
        let window = random_window(&mut rng, 5, 2);
        let (_, cache) = forward(&params, &window).unwrap();
        let wrong_len = vec![vec![0.0; dims.width()]; 4];
        assert!(matches!(
            backward(&params, &cache, &wrong_len),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn single_frame_gradient_skips_recurrent_weights() {
        let dims = ModelDims {
            feat_dim: 3,
            hidden: 4,
            num_classes: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::init(dims, &mut rng);
        let window = random_window(&mut rng, 1, 3);
        let (logits, cache) = forward(&params, &window).unwrap();
        let (_, d_logits) = ce_loss_and_grad(&logits, &[1]).unwrap();
        let grad = backward(&params, &cache, &d_logits).unwrap();
        // With a single frame the previous hidden state is zero, so every
        // recurrent (U) gradient vanishes while the input maps do not.
        for gru in [&grad.fwd, &grad.bwd] {
            assert!(gru.update_u.iter().all(|&g| g == 0.0));
            assert!(gru.reset_u.iter().all(|&g| g == 0.0));
            assert!(gru.cand_u.iter().all(|&g| g == 0.0));
        }
        assert!(grad.in_w.iter().any(|&g| g != 0.0));
    }

    fn ctc_network_loss(params: &ModelParams, window: &[Vec<f64>], labels: &LabelSequence) -> f64 {
        let (logits, _) = forward(params, window).unwrap();
        ctc_loss(&ProbMatrix::from_logits(&logits).unwrap(), labels).unwrap()
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let dims = ModelDims {
            feat_dim: 3,
            hidden: 4,
            num_classes: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ModelParams::init(dims, &mut rng);
        let window = random_window(&mut rng, 6, 3);
        let labels = LabelSequence::new(vec![1, 0]);

        let (logits, cache) = forward(&params, &window).unwrap();
        let (_, d_logits) = ctc_loss_and_grad(&logits, &labels).unwrap();
        let grad = backward(&params, &cache, &d_logits).unwrap();
        let grads: Vec<Vec<f64>> = grad.blocks().into_iter().cloned().collect();

        let h = 1e-5;
        for (block_idx, block_grad) in grads.iter().enumerate() {
            for w_idx in 0..block_grad.len() {
                let original = params.blocks()[block_idx][w_idx];
                params.blocks_mut()[block_idx][w_idx] = original + h;
                let plus = ctc_network_loss(&params, &window, &labels);
                params.blocks_mut()[block_idx][w_idx] = original - h;
                let minus = ctc_network_loss(&params, &window, &labels);
                params.blocks_mut()[block_idx][w_idx] = original;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = block_grad[w_idx];
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-3,
                    "block {block_idx} weight {w_idx}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn uniform_ce_loss_is_log_width() {
        let logits = vec![vec![0.0; 3]; 5];
        let (loss, _) = ce_loss_and_grad(&logits, &[0, 1, 2, 0, 1]).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_ce_loss_to_zero() {
        let mut logits = vec![vec![0.0; 3]; 4];
        let targets = [2, 0, 1, 2];
        for (row, &t) in logits.iter_mut().zip(&targets) {
            row[t] = 50.0;
        }
        let (loss, _) = ce_loss_and_grad(&logits, &targets).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let targets = [2usize, 0, 1, 1];
        let (_, grad) = ce_loss_and_grad(&logits, &targets).unwrap();
        let h = 1e-5;
        for t in 0..4 {
            for k in 0..3 {
                let mut plus = logits.clone();
                plus[t][k] += h;
                let mut minus = logits.clone();
                minus[t][k] -= h;
                let (lp, _) = ce_loss_and_grad(&plus, &targets).unwrap();
                let (lm, _) = ce_loss_and_grad(&minus, &targets).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                assert!(
                    (numeric - grad[t][k]).abs() < 1e-6,
                    "ce grad mismatch at ({t},{k})"
                );
            }
        }
    }
}
