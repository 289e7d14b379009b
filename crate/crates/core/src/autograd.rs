//! Reverse-mode gradients for the layer set in [`crate::layers`], the losses,
//! and a central finite-difference checker.
//!
//! Routing is a hard selection: no gradient flows through the choice of
//! experts. With `top_k > 1` the subset-softmax weights are differentiable
//! and the gate receives their gradient; with `top_k = 1` the single weight is
//! the constant `1.0`, so the gate only learns through the balance loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    dense_forward, lora_moe_forward_cached, moe_forward_cached, Block, DenseLayer, GatedCache, Model, RouteTrace,
};
use crate::numerics::{matmul, relu, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dispersion {
    /// Squared coefficient of variation, population variance.
    #[default]
    Cv2,
    Gini,
}

/// Load-balancing penalty `λ · f(u)` on the batch-mean of the full gate
/// softmax, applied to every gated block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub dispersion: Dispersion,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda: 0.01,
            dispersion: Dispersion::Cv2,
        }
    }
}

impl BalanceConfig {
    pub fn enabled(lambda: f64, dispersion: Dispersion) -> Self {
        Self {
            enabled: true,
            lambda,
            dispersion,
        }
    }

    fn active(&self) -> bool {
        self.enabled && self.lambda != 0.0
    }
}

/// Mean negative log-likelihood of the labelled class; probabilities are
/// clamped at `1e-12` before the log.
pub fn cross_entropy(probs: &Matrix, labels: &[u8]) -> Result<f64> {
    check_labels(probs, labels)?;
    let n = labels.len().max(1) as f64;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -clamp_prob(probs.get(r, y as usize)).ln())
        .sum();
    Ok(total / n)
}

// f64::max would swallow NaN
fn clamp_prob(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(1e-12)
    }
}

fn check_labels(probs: &Matrix, labels: &[u8]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::shape("labels", probs.rows(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y as usize >= probs.cols()) {
        return Err(Error::Argument(format!("label {bad} outside {{0, 1}}")));
    }
    Ok(())
}

fn usage(gate_probs: &Matrix) -> Vec<f64> {
    let b = gate_probs.rows().max(1) as f64;
    gate_probs.column_sums().into_iter().map(|s| s / b).collect()
}

fn dispersion_value(u: &[f64], kind: Dispersion) -> f64 {
    let n = u.len() as f64;
    match kind {
        Dispersion::Cv2 => {
            let m = u.iter().sum::<f64>() / n;
            let v = u.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            v / (m * m)
        }
        Dispersion::Gini => {
            let t: f64 = u.iter().sum();
            let s: f64 = u.iter().map(|a| u.iter().map(|b| (a - b).abs()).sum::<f64>()).sum();
            s / (2.0 * n * t)
        }
    }
}

fn dispersion_grad(u: &[f64], kind: Dispersion) -> Vec<f64> {
    let n = u.len() as f64;
    match kind {
        Dispersion::Cv2 => {
            let m = u.iter().sum::<f64>() / n;
            let v = u.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            u.iter()
                .map(|x| 2.0 * (x - m) / (n * m * m) - 2.0 * v / (n * m * m * m))
                .collect()
        }
        Dispersion::Gini => {
            let t: f64 = u.iter().sum();
            let s: f64 = u.iter().map(|a| u.iter().map(|b| (a - b).abs()).sum::<f64>()).sum();
            u.iter()
                .map(|a| {
                    let ds: f64 = 2.0 * u.iter().map(|b| sign(a - b)).sum::<f64>();
                    ds / (2.0 * n * t) - s / (2.0 * n * t * t)
                })
                .collect()
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `λ · f(u)` where `u` is the column mean of `gate_probs` (`B x N`).
pub fn balance_loss(gate_probs: &Matrix, cfg: &BalanceConfig) -> Result<f64> {
    if gate_probs.cols() == 0 {
        return Err(Error::Argument("balance loss needs at least one expert".into()));
    }
    if !cfg.active() {
        return Ok(0.0);
    }
    Ok(cfg.lambda * dispersion_value(&usage(gate_probs), cfg.dispersion))
}

/// d balance_loss / d gate_probs.
fn balance_loss_grad(gate_probs: &Matrix, cfg: &BalanceConfig) -> Matrix {
    let b = gate_probs.rows().max(1) as f64;
    let du = dispersion_grad(&usage(gate_probs), cfg.dispersion);
    let mut g = Matrix::zeros(gate_probs.rows(), gate_probs.cols());
    for r in 0..g.rows() {
        for (o, d) in g.row_mut(r).iter_mut().zip(&du) {
            *o = cfg.lambda * d / b;
        }
    }
    g
}

#[derive(Debug, Clone)]
struct BlockTape {
    input: Matrix,
    /// Block output before the inter-block ReLU.
    output: Matrix,
    gated: Option<GatedCache>,
}

/// Forward caches for one batch.
#[derive(Debug, Clone)]
pub struct Tape {
    x_raw: Matrix,
    blocks: Vec<BlockTape>,
    probs: Matrix,
}

impl Tape {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.x_raw.rows()
    }

    /// Sign pattern of every hidden pre-activation.
    pub fn relu_pattern(&self) -> Vec<Vec<bool>> {
        let hidden = self.blocks.len().saturating_sub(1);
        self.blocks[..hidden]
            .iter()
            .map(|b| b.output.data().iter().map(|&v| v > 0.0).collect())
            .collect()
    }

    pub fn routes(&self) -> RouteTrace {
        RouteTrace {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.gated.as_ref().map(|g| g.selections.clone()))
                .collect(),
        }
    }

    /// Full softmax over the gate logits of every gated block.
    pub fn gate_probs(&self) -> Vec<Option<Matrix>> {
        self.blocks
            .iter()
            .map(|b| b.gated.as_ref().map(|g| softmax_rows(&g.logits)))
            .collect()
    }
}

/// Forward pass that keeps what [`backward`] needs.
pub fn forward_with_tape(model: &Model, x_raw: &Matrix) -> Result<Tape> {
    if x_raw.cols() != model.input_dim() {
        return Err(Error::shape("forward", model.input_dim(), x_raw.cols()));
    }
    let mut blocks = Vec::with_capacity(model.blocks.len());
    let mut h = x_raw.clone();
    let last = model.blocks.len() - 1;
    for (i, block) in model.blocks.iter().enumerate() {
        let (z, gated) = match block {
            Block::Dense(l) => (dense_forward(l, &h)?, None),
            Block::Moe(l) => {
                let (z, c) = moe_forward_cached(l, &h, x_raw)?;
                (z, Some(c))
            }
            Block::LoraMoe(l) => {
                let (z, c) = lora_moe_forward_cached(l, &h, x_raw)?;
                (z, Some(c))
            }
        };
        let next = if i < last { relu(&z) } else { z.clone() };
        blocks.push(BlockTape {
            input: std::mem::replace(&mut h, next),
            output: z,
            gated,
        });
    }
    Ok(Tape {
        x_raw: x_raw.clone(),
        probs: softmax_rows(&h),
        blocks,
    })
}

/// Training objective: cross-entropy plus the balance penalty of every gated
/// block.
pub fn objective(tape: &Tape, labels: &[u8], balance: &BalanceConfig) -> Result<f64> {
    let mut loss = cross_entropy(&tape.probs, labels)?;
    if balance.active() {
        for p in tape.gate_probs().into_iter().flatten() {
            loss += balance_loss(&p, balance)?;
        }
    }
    Ok(loss)
}

/// Gradients, stored in a structure congruent with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub blocks: Vec<Block>,
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Grads {
        Grads {
            blocks: model.blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    /// Named gradient arrays in the same order as [`Model::params`].
    pub fn params(&self) -> Vec<(String, &[f64])> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.params().into_iter().map(move |(n, p)| (format!("block{i}.{n}"), p)))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|(_, p)| p.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn dense_backward(
    layer: &DenseLayer,
    x: &Matrix,
    dy: &Matrix,
    grad: &mut DenseLayer,
    need_dx: bool,
) -> Result<Option<Matrix>> {
    let dw = matmul(&dy.transpose(), x)?;
    for (g, d) in grad.weight.data_mut().iter_mut().zip(dw.data()) {
        *g += d;
    }
    for (g, d) in grad.bias.iter_mut().zip(dy.column_sums()) {
        *g += d;
    }
    if need_dx {
        Ok(Some(matmul(dy, &layer.weight)?))
    } else {
        Ok(None)
    }
}

fn scale_rows(m: &Matrix, w: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (r, &s) in w.iter().enumerate() {
        for v in out.row_mut(r) {
            *v *= s;
        }
    }
    out
}

fn scatter_add(dst: &mut Matrix, rows: &[usize], part: &Matrix) {
    for (i, &r) in rows.iter().enumerate() {
        for (o, v) in dst.row_mut(r).iter_mut().zip(part.row(i)) {
            *o += v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient w.r.t. gate logits from the subset-softmax weights, plus the
/// balance penalty on the full gate softmax.
fn gate_logit_grads(cache: &GatedCache, dweights: &[Vec<f64>], balance: &BalanceConfig) -> Matrix {
    let mut dl = Matrix::zeros(cache.logits.rows(), cache.logits.cols());
    for (r, sel) in cache.selections.iter().enumerate() {
        let dw = &dweights[r];
        let inner: f64 = sel.iter().zip(dw).map(|(&(_, w), d)| w * d).sum();
        for (&(j, w), d) in sel.iter().zip(dw) {
            dl.set(r, j, dl.get(r, j) + w * (d - inner));
        }
    }
    if balance.active() {
        let p = softmax_rows(&cache.logits);
        let dp = balance_loss_grad(&p, balance);
        for r in 0..p.rows() {
            let inner = dot(p.row(r), dp.row(r));
            for j in 0..p.cols() {
                dl.set(r, j, dl.get(r, j) + p.get(r, j) * (dp.get(r, j) - inner));
            }
        }
    }
    dl
}

fn slot_of(sel: &[(usize, f64)], expert: usize) -> usize {
    sel.iter().position(|&(j, _)| j == expert).expect("expert in selection")
}

/// Exact gradients of [`objective`] for the batch recorded in `tape`.
pub fn backward(model: &Model, tape: &Tape, labels: &[u8], balance: &BalanceConfig) -> Result<Grads> {
    if tape.blocks.len() != model.blocks.len() {
        return Err(Error::TapeMismatch(format!(
            "{} cached blocks for a {}-block model",
            tape.blocks.len(),
            model.blocks.len()
        )));
    }
    for (i, (b, t)) in model.blocks.iter().zip(&tape.blocks).enumerate() {
        let kind_ok = matches!(
            (b, &t.gated),
            (Block::Dense(_), None) | (Block::Moe(_), Some(_)) | (Block::LoraMoe(_), Some(_))
        );
        if !kind_ok || t.input.cols() != b.input_dim() || t.output.cols() != b.output_dim() {
            return Err(Error::TapeMismatch(format!(
                "block {i} differs from the cached forward"
            )));
        }
    }
    check_labels(&tape.probs, labels)?;

    let batch = labels.len().max(1) as f64;
    let mut dz = tape.probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let v = dz.get(r, y as usize);
        dz.set(r, y as usize, v - 1.0);
    }
    for v in dz.data_mut() {
        *v /= batch;
    }

    let mut grads = Grads::zeros_like(model);
    for i in (0..model.blocks.len()).rev() {
        let bt = &tape.blocks[i];
        let need_dx = i > 0;
        let dx = match (&model.blocks[i], &mut grads.blocks[i]) {
            (Block::Dense(l), Block::Dense(g)) => dense_backward(l, &bt.input, &dz, g, need_dx)?,
            (Block::LoraMoe(l), Block::LoraMoe(g)) => {
                let cache = bt.gated.as_ref().expect("checked above");
                let mut dx = dense_backward(&l.base, &bt.input, &dz, &mut g.base, need_dx)?;
                let mut dweights: Vec<Vec<f64>> = cache.selections.iter().map(|s| vec![0.0; s.len()]).collect();
                for grp in &cache.groups {
                    let ad = &l.adapters[grp.expert];
                    let s = ad.scale();
                    let dy = dz.select_rows(&grp.rows);
                    for (q, &r) in grp.rows.iter().enumerate() {
                        let slot = slot_of(&cache.selections[r], grp.expert);
                        dweights[r][slot] = dot(dy.row(q), grp.output.row(q));
                    }
                    let gw = scale_rows(&dy, &grp.weights);
                    let hidden = grp.hidden.as_ref().expect("adapter cache");
                    let db = matmul(&hidden.transpose(), &gw)?;
                    let dh = matmul(&gw, &ad.b.transpose())?.map(|v| v * s);
                    let da = matmul(&grp.input.transpose(), &dh)?;
                    let gad = &mut g.adapters[grp.expert];
                    for (o, v) in gad.b.data_mut().iter_mut().zip(db.data()) {
                        *o += s * v;
                    }
                    for (o, v) in gad.a.data_mut().iter_mut().zip(da.data()) {
                        *o += v;
                    }
                    if let Some(dx) = dx.as_mut() {
                        scatter_add(dx, &grp.rows, &matmul(&dh, &ad.a.transpose())?);
                    }
                }
                let dl = gate_logit_grads(cache, &dweights, balance);
                accumulate_gate(&mut g.gate.weight, &mut g.gate.bias, &dl, &tape.x_raw)?;
                dx
            }
            (Block::Moe(l), Block::Moe(g)) => {
                let cache = bt.gated.as_ref().expect("checked above");
                let mut dx = need_dx.then(|| Matrix::zeros(bt.input.rows(), bt.input.cols()));
                let mut dweights: Vec<Vec<f64>> = cache.selections.iter().map(|s| vec![0.0; s.len()]).collect();
                for grp in &cache.groups {
                    let dy = dz.select_rows(&grp.rows);
                    for (q, &r) in grp.rows.iter().enumerate() {
                        let slot = slot_of(&cache.selections[r], grp.expert);
                        dweights[r][slot] = dot(dy.row(q), grp.output.row(q));
                    }
                    let gw = scale_rows(&dy, &grp.weights);
                    let part = dense_backward(
                        &l.experts[grp.expert],
                        &grp.input,
                        &gw,
                        &mut g.experts[grp.expert],
                        need_dx,
                    )?;
                    if let (Some(dx), Some(part)) = (dx.as_mut(), part) {
                        scatter_add(dx, &grp.rows, &part);
                    }
                }
                let dl = gate_logit_grads(cache, &dweights, balance);
                accumulate_gate(&mut g.gate.weight, &mut g.gate.bias, &dl, &tape.x_raw)?;
                dx
            }
            _ => unreachable!("grads are built from the model"),
        };
        if let Some(dx) = dx {
            let prev = &tape.blocks[i - 1].output;
            dz = dx;
            for (d, &z) in dz.data_mut().iter_mut().zip(prev.data()) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
    }
    Ok(grads)
}

fn accumulate_gate(gw: &mut Matrix, gb: &mut [f64], dlogits: &Matrix, x_raw: &Matrix) -> Result<()> {
    let dw = matmul(&dlogits.transpose(), x_raw)?;
    for (o, v) in gw.data_mut().iter_mut().zip(dw.data()) {
        *o += v;
    }
    for (o, v) in gb.iter_mut().zip(dlogits.column_sums()) {
        *o += v;
    }
    Ok(())
}

/// Largest relative error for one named parameter array.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a `±ε` perturbation changed some route.
    pub route_unstable: usize,
    /// Entries skipped because a `±ε` perturbation moved a hidden ReLU input
    /// across zero.
    pub kink_unstable: usize,
    /// Checked entries whose mismatch is below the rounding noise of the
    /// difference quotient; they count as exact.
    pub noise_limited: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn route_unstable(&self) -> usize {
        self.params.iter().map(|p| p.route_unstable).sum()
    }

    pub fn kink_unstable(&self) -> usize {
        self.params.iter().map(|p| p.kink_unstable).sum()
    }

    pub fn noise_limited(&self) -> usize {
        self.params.iter().map(|p| p.noise_limited).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Rounding noise of a central difference: a few ulps of the larger loss over
/// the step `2ε`.
fn difference_noise(lp: f64, lm: f64, epsilon: f64) -> f64 {
    8.0 * f64::EPSILON * lp.abs().max(lm.abs()).max(1.0) / (2.0 * epsilon)
}

/// Compares [`backward`] against central differences of [`objective`] for
/// every parameter entry. Entries whose perturbation flips any routing
/// decision or any hidden ReLU are counted as unstable and left out of the
/// error.
pub fn grad_check(
    model: &Model,
    x_raw: &Matrix,
    labels: &[u8],
    balance: &BalanceConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Argument("epsilon must be positive".into()));
    }
    let tape = forward_with_tape(model, x_raw)?;
    let routes = tape.routes().expert_sets();
    let pattern = tape.relu_pattern();
    let grads = backward(model, &tape, labels, balance)?;
    let analytic: Vec<(String, Vec<f64>)> = grads.params().into_iter().map(|(n, p)| (n, p.to_vec())).collect();

    let eval = |m: &Model| -> Result<(f64, bool, bool)> {
        let t = forward_with_tape(m, x_raw)?;
        Ok((
            objective(&t, labels, balance)?,
            t.routes().expert_sets() == routes,
            t.relu_pattern() == pattern,
        ))
    };

    let mut work = model.clone();
    let mut params = Vec::with_capacity(analytic.len());
    for (p, (name, a)) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            route_unstable: 0,
            kink_unstable: 0,
            noise_limited: 0,
        };
        for (e, &ga) in a.iter().enumerate() {
            let orig = work.params_mut()[p][e];
            work.params_mut()[p][e] = orig + epsilon;
            let (lp, rp, kp) = eval(&work)?;
            work.params_mut()[p][e] = orig - epsilon;
            let (lm, rm, km) = eval(&work)?;
            work.params_mut()[p][e] = orig;
            if !(rp && rm) {
                check.route_unstable += 1;
                continue;
            }
            if !(kp && km) {
                check.kink_unstable += 1;
                continue;
            }
            let gn = (lp - lm) / (2.0 * epsilon);
            check.checked += 1;
            let noise = difference_noise(lp, lm, epsilon);
            // only entries too small to resolve to 1e-4 relative may hide in the noise
            if ga != gn && (ga - gn).abs() <= noise && ga.abs().max(gn.abs()) < 1e4 * noise {
                check.noise_limited += 1;
            } else {
                check.max_rel_error = check.max_rel_error.max(relative_error(ga, gn));
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { epsilon, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ModelConfig, ModelKind};
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn fill_zeros(model: &mut Model, rng: &mut Rng) {
        for p in model.params_mut() {
            for v in p.iter_mut() {
                if *v == 0.0 {
                    *v = 0.3 * rng.normal();
                }
            }
        }
    }

    fn labels(rng: &mut Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| (rng.next_u64() & 1) as u8).collect()
    }

    #[test]
    fn cross_entropy_cases() {
        let p = Matrix::row_vector(&[0.5, 0.5]);
        assert!((cross_entropy(&p, &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let p = Matrix::row_vector(&[1.0, 0.0]);
        assert_eq!(cross_entropy(&p, &[0]).unwrap(), 0.0);
        let p = Matrix::from_rows(&[[0.9, 0.1], [0.3, 0.7], [0.6, 0.4]]).unwrap();
        let want = (-(0.9f64).ln() - (0.7f64).ln() - (0.4f64).ln()) / 3.0;
        assert!((cross_entropy(&p, &[0, 1, 1]).unwrap() - want).abs() < 1e-15);
        assert!(cross_entropy(&p, &[0, 2, 1]).is_err());
        // clamped at 1e-12
        let p = Matrix::row_vector(&[1.0, 0.0]);
        assert!((cross_entropy(&p, &[1]).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn balance_loss_cases() {
        let cfg = BalanceConfig::enabled(0.3, Dispersion::Cv2);
        let uniform = Matrix::from_rows(&[[0.25; 4], [0.25; 4]]).unwrap();
        assert!(balance_loss(&uniform, &cfg).unwrap().abs() < 1e-15);
        let skew = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!((balance_loss(&skew, &cfg).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(balance_loss(&skew, &BalanceConfig::default()).unwrap(), 0.0);
        assert!(balance_loss(&Matrix::zeros(3, 0), &cfg).is_err());

        let mut rng = Rng::seed_from(4);
        let p = softmax_rows(&random(&mut rng, 9, 5));
        let u: Vec<f64> = (0..5).map(|j| (0..9).map(|r| p.get(r, j)).sum::<f64>() / 9.0).collect();
        let mean = u.iter().sum::<f64>() / 5.0;
        let var = u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 5.0;
        assert!((balance_loss(&p, &cfg).unwrap() - 0.3 * var / (mean * mean)).abs() < 1e-14);

        let gini = BalanceConfig::enabled(1.0, Dispersion::Gini);
        assert!((balance_loss(&skew, &gini).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fresh_lora_moe_first_step_touches_only_selected_b() {
        let mut rng = Rng::seed_from(21);
        let cfg = ModelConfig {
            depth: 2,
            n_experts: 4,
            rank: 2,
            ..ModelConfig::new(ModelKind::LoraMoe, 6, 5)
        };
        let model = Model::build(&cfg, &mut rng).unwrap();
        let x = random(&mut rng, 3, 6);
        let y = labels(&mut rng, 3);
        let tape = forward_with_tape(&model, &x).unwrap();
        let g = backward(&model, &tape, &y, &BalanceConfig::default()).unwrap();
        let trace = tape.routes();
        for (bi, block) in g.blocks.iter().enumerate() {
            let Block::LoraMoe(gl) = block else { panic!() };
            let Block::LoraMoe(ml) = &model.blocks[bi] else {
                panic!()
            };
            let used: Vec<usize> = trace.blocks[bi].as_ref().unwrap().iter().map(|s| s[0].0).collect();
            for (j, gad) in gl.adapters.iter().enumerate() {
                let nonzero = gad.b.data().iter().any(|&v| v != 0.0);
                assert_eq!(nonzero, used.contains(&j), "block {bi} adapter {j}");
                // B = 0 so A gets nothing yet
                assert!(gad.a.data().iter().all(|&v| v == 0.0));
            }
            // Aᵀ (∂L/∂Δ) structure: dB = (α/r) (xA)ᵀ (w ⊙ dY) for the selected adapter
            assert!(ml.adapters.iter().all(|a| a.b.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn perfect_predictions_have_tiny_gradients() {
        let mut rng = Rng::seed_from(22);
        let mut model = Model::build(&ModelConfig::new(ModelKind::Mlp, 3, 4), &mut rng).unwrap();
        // push the head bias so class 0 gets probability ~1
        if let Block::Dense(l) = model.blocks.last_mut().unwrap() {
            l.bias = vec![60.0, -60.0];
        }
        let x = random(&mut rng, 5, 3);
        let tape = forward_with_tape(&model, &x).unwrap();
        let g = backward(&model, &tape, &[0; 5], &BalanceConfig::default()).unwrap();
        assert!(g.max_abs() < 1e-40);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(23);
        let mut model = Model::build(
            &ModelConfig {
                depth: 3,
                ..ModelConfig::new(ModelKind::Mlp, 6, 4)
            },
            &mut rng,
        )
        .unwrap();
        // zero biases put dead rows exactly on the ReLU kink
        fill_zeros(&mut model, &mut rng);
        let x = random(&mut rng, 8, 6);
        let y = labels(&mut rng, 8);
        let rep = grad_check(&model, &x, &y, &BalanceConfig::default(), 1e-5).unwrap();
        assert_eq!(rep.route_unstable(), 0);
        assert!(rep.max_rel_error() < 1e-6, "{:?}", rep.worst());
    }

    #[test]
    fn lora_moe_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(24);
        let cfg = ModelConfig {
            depth: 2,
            n_experts: 3,
            rank: 1,
            top_k: 1,
            ..ModelConfig::new(ModelKind::LoraMoe, 6, 4)
        };
        let mut model = Model::build(&cfg, &mut rng).unwrap();
        // nonzero B so every adapter term is exercised
        fill_zeros(&mut model, &mut rng);
        let x = random(&mut rng, 10, 6);
        let y = labels(&mut rng, 10);
        let rep = grad_check(&model, &x, &y, &BalanceConfig::default(), 1e-5).unwrap();
        assert!(rep.checked() > 0);
        assert!(rep.max_rel_error() < 1e-4, "{:?}", rep.worst());
    }

    #[test]
    fn kink_crossings_are_excluded() {
        let mut rng = Rng::seed_from(27);
        let mut model = Model::build(&ModelConfig::new(ModelKind::Mlp, 2, 3), &mut rng).unwrap();
        fill_zeros(&mut model, &mut rng);
        if let Block::Dense(l) = &mut model.blocks[0] {
            l.bias[0] = 0.0;
        }
        // a zero row puts hidden unit 0 exactly on the kink
        let x = Matrix::new(3, 2, vec![0.0, 0.0, 0.4, -1.1, -0.7, 0.9]).unwrap();
        let rep = grad_check(&model, &x, &[1, 0, 1], &BalanceConfig::default(), 1e-5).unwrap();
        let bias = rep.params.iter().find(|p| p.name == "block0.bias").unwrap();
        assert_eq!(bias.kink_unstable, 1);
        assert_eq!(rep.kink_unstable(), 1);
        assert!(rep.max_rel_error() < 1e-6, "{:?}", rep.worst());
    }

    #[test]
    fn balance_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(25);
        for (kind, k, disp) in [
            (ModelKind::LoraMoe, 2, Dispersion::Cv2),
            (ModelKind::Moe, 1, Dispersion::Cv2),
            (ModelKind::Moe, 2, Dispersion::Gini),
        ] {
            let cfg = ModelConfig {
                depth: 2,
                n_experts: 3,
                rank: 2,
                top_k: k,
                ..ModelConfig::new(kind, 5, 4)
            };
            let model = Model::build(&cfg, &mut rng).unwrap();
            let x = random(&mut rng, 7, 5);
            let y = labels(&mut rng, 7);
            let bal = BalanceConfig::enabled(0.5, disp);
            let rep = grad_check(&model, &x, &y, &bal, 1e-5).unwrap();
            assert!(rep.max_rel_error() < 1e-4, "{kind:?} {:?}", rep.worst());
            let gate = rep.params.iter().find(|p| p.name == "block0.gate.weight").unwrap();
            assert!(gate.checked > 0);
        }
    }

    #[test]
    fn route_flips_are_excluded() {
        // two experts whose logits differ by less than epsilon for the only sample
        let mut rng = Rng::seed_from(26);
        let cfg = ModelConfig {
            depth: 2,
            n_experts: 2,
            top_k: 1,
            ..ModelConfig::new(ModelKind::Moe, 2, 3)
        };
        let mut model = Model::build(&cfg, &mut rng).unwrap();
        if let Block::Moe(l) = &mut model.blocks[0] {
            l.gate.weight = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
            l.gate.bias = vec![0.0, 0.0];
        }
        let x = Matrix::row_vector(&[1e-7, 0.5]);
        let rep = grad_check(&model, &x, &[1], &BalanceConfig::default(), 1e-5).unwrap();
        let gate = rep.params.iter().find(|p| p.name == "block0.gate.bias").unwrap();
        assert!(gate.route_unstable > 0);
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let mut rng = Rng::seed_from(27);
        let a = Model::build(&ModelConfig::new(ModelKind::Mlp, 3, 4), &mut rng).unwrap();
        let b = Model::build(
            &ModelConfig {
                depth: 3,
                ..ModelConfig::new(ModelKind::Mlp, 3, 4)
            },
            &mut rng,
        )
        .unwrap();
        let x = random(&mut rng, 2, 3);
        let tape = forward_with_tape(&a, &x).unwrap();
        assert!(matches!(
            backward(&b, &tape, &[0, 1], &BalanceConfig::default()),
            Err(Error::TapeMismatch(_))
        ));
    }
}
