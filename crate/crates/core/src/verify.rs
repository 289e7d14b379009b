//! Executable checks of routing geometry, zero-initialized adapters and
//! parameter accounting.

use serde::Serialize;

use crate::autograd::{grad_check, BalanceConfig, Dispersion};
use crate::error::{Error, Result};
use crate::experiments::built_in_specs;
use crate::layers::{
    gate_logits, model_forward, model_logits, param_report, reduction_ratio, Block, GatingNetwork, Model, ModelConfig,
    ModelKind,
};
use crate::numerics::{argmax_first, Matrix, Rng};
use crate::training::{train, TrainConfig};

/// Half-width of the sampling box.
pub const BOX: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GeometryReport {
    pub samples: usize,
    /// Pairs whose endpoints share an expert, so their midpoint was checked.
    pub same_region_pairs: usize,
    pub violations: usize,
    /// Endpoints routed to each expert.
    pub occupancy: Vec<usize>,
}

fn route1(gate: &GatingNetwork, x: &[f64]) -> Result<usize> {
    let logits = gate_logits(gate, &Matrix::row_vector(x))?;
    argmax_first(logits.row(0))
}

/// Samples `n_pairs` point pairs uniformly in `[-3, 3]^dim`. For every pair
/// routed to the same expert, the midpoint must route there too.
pub fn check_region_convexity(
    gate: &GatingNetwork,
    dim: usize,
    n_pairs: usize,
    rng: &mut Rng,
) -> Result<GeometryReport> {
    if gate.top_k != 1 {
        return Err(Error::Argument(format!(
            "convexity is checked for top-1 gates, got top_k = {}",
            gate.top_k
        )));
    }
    if dim != gate.input_dim() {
        return Err(Error::shape("convexity check", gate.input_dim(), dim));
    }
    let mut report = GeometryReport {
        samples: n_pairs,
        same_region_pairs: 0,
        violations: 0,
        occupancy: vec![0; gate.n_experts()],
    };
    for _ in 0..n_pairs {
        let p: Vec<f64> = (0..dim).map(|_| rng.uniform(-BOX, BOX)).collect();
        let q: Vec<f64> = (0..dim).map(|_| rng.uniform(-BOX, BOX)).collect();
        let (ep, eq) = (route1(gate, &p)?, route1(gate, &q)?);
        report.occupancy[ep] += 1;
        report.occupancy[eq] += 1;
        if ep == eq {
            report.same_region_pairs += 1;
            let mid: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            if route1(gate, &mid)? != ep {
                report.violations += 1;
            }
        }
    }
    Ok(report)
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Biases `b_j = −¼‖w_j‖²`, under which top-1 routing is the nearest-site
/// rule with sites `½ w_j`.
pub fn voronoi_biases(weight: &Matrix) -> Vec<f64> {
    (0..weight.rows()).map(|j| -0.25 * sq_norm(weight.row(j))).collect()
}

/// Index of the site nearest to `x`; ties go to the lowest index.
pub fn nearest_site(sites: &Matrix, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for j in 0..sites.rows() {
        let d: f64 = sites.row(j).iter().zip(x).map(|(s, a)| (a - s) * (a - s)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VoronoiReport {
    pub points: usize,
    pub agreements: usize,
}

impl VoronoiReport {
    pub fn exact(&self) -> bool {
        self.agreements == self.points
    }
}

/// Compares argmax routing with the nearest-site rule for sites `½ w_j`.
/// Requires `b_j + ¼‖w_j‖²` to be the same for every expert.
pub fn check_voronoi_sites(gate: &GatingNetwork, points: &Matrix) -> Result<VoronoiReport> {
    let w = &gate.weight;
    let c: Vec<f64> = (0..w.rows()).map(|j| gate.bias[j] + 0.25 * sq_norm(w.row(j))).collect();
    let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if c.iter().any(|v| (v - c[0]).abs() > 1e-12 * scale) {
        return Err(Error::Argument(
            "gate biases do not satisfy b_j + ||w_j||^2 / 4 = const".into(),
        ));
    }
    if points.cols() != gate.input_dim() {
        return Err(Error::shape("voronoi check", gate.input_dim(), points.cols()));
    }
    let sites = w.map(|v| 0.5 * v);
    let logits = gate_logits(gate, points)?;
    let mut agreements = 0;
    for r in 0..points.rows() {
        if argmax_first(logits.row(r))? == nearest_site(&sites, points.row(r)) {
            agreements += 1;
        }
    }
    Ok(VoronoiReport {
        points: points.rows(),
        agreements,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ZeroInitReport {
    /// Fresh output equals the adapter-free model bit for bit.
    pub output_bit_equal: bool,
    /// Every adapter that received a sample has a nonzero B after one step.
    pub selected_nonzero: bool,
    /// Adapters that received no sample kept B = 0.
    pub unselected_zero: bool,
    /// A zero-learning-rate step leaves every B at zero.
    pub zero_lr_keeps_zero: bool,
    /// `(block, expert)` pairs that received at least one sample.
    pub selected: Vec<(usize, usize)>,
}

impl ZeroInitReport {
    pub fn passed(&self) -> bool {
        self.output_bit_equal && self.selected_nonzero && self.unselected_zero && self.zero_lr_keeps_zero
    }
}

fn adapter_bs(model: &Model) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        if let Block::LoraMoe(l) = b {
            for (j, a) in l.adapters.iter().enumerate() {
                out.push((i, j, a.b.data().iter().any(|&v| v != 0.0)));
            }
        }
    }
    out
}

/// Checks a freshly initialized LoRA-MoE model on one batch: output equality
/// with the base network, then which B matrices one Adam step touches.
pub fn check_zero_init(model: &Model, x: &Matrix, labels: &[u8]) -> Result<ZeroInitReport> {
    let bs = adapter_bs(model);
    if bs.is_empty() {
        return Err(Error::Argument("model has no LoRA adapters".into()));
    }
    if bs.iter().any(|&(_, _, nz)| nz) {
        return Err(Error::Argument(
            "model is not freshly initialized: some B is nonzero".into(),
        ));
    }
    let (probs, trace) = model_forward(model, x)?;
    let (base, _) = model_forward(&model.without_adapters(), x)?;
    let output_bit_equal = probs
        .data()
        .iter()
        .zip(base.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut selected = Vec::new();
    for (i, sel) in trace.blocks.iter().enumerate() {
        if let Some(sel) = sel {
            let mut used: Vec<usize> = sel.iter().flat_map(|s| s.iter().map(|&(j, _)| j)).collect();
            used.sort_unstable();
            used.dedup();
            selected.extend(used.into_iter().map(|j| (i, j)));
        }
    }
    let step = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let after = adapter_bs(&train(model.clone(), x, labels, &step)?.model);
    let selected_nonzero = after
        .iter()
        .filter(|(i, j, _)| selected.contains(&(*i, *j)))
        .all(|&(_, _, nz)| nz);
    let unselected_zero = after
        .iter()
        .filter(|(i, j, _)| !selected.contains(&(*i, *j)))
        .all(|&(_, _, nz)| !nz);
    let frozen = TrainConfig {
        learning_rate: 0.0,
        ..step
    };
    let zero_lr_keeps_zero = adapter_bs(&train(model.clone(), x, labels, &frozen)?.model)
        .iter()
        .all(|&(_, _, nz)| !nz);
    Ok(ZeroInitReport {
        output_bit_equal,
        selected_nonzero,
        unselected_zero,
        zero_lr_keeps_zero,
        selected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamIdentityReport {
    /// Length of every parameter array, summed.
    pub brute_force: usize,
    pub reported: usize,
    /// Per LoRA-MoE block: reduction from the counted sizes and from the
    /// closed form.
    pub reductions: Vec<(usize, f64, f64)>,
}

impl ParamIdentityReport {
    pub fn passed(&self) -> bool {
        self.brute_force == self.reported && self.reductions.iter().all(|&(_, a, b)| (a - b).abs() <= 1e-12)
    }
}

pub fn check_param_identity(model: &Model) -> ParamIdentityReport {
    let brute_force = model.params().iter().map(|(_, p)| p.len()).sum();
    let report = param_report(model);
    let mut reductions = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        if let Block::LoraMoe(l) = b {
            let (n, r) = (l.adapters.len(), l.adapters[0].rank());
            let expert = (l.base.weight.rows() * l.base.weight.cols()) as f64;
            let lora: usize = l.adapters[0].a.data().len() + l.adapters[0].b.data().len();
            let counted = 1.0 - (expert + (n * lora) as f64) / (n as f64 * expert);
            reductions.push((i, counted, reduction_ratio(b.input_dim(), b.output_dim(), n, r)));
        }
    }
    ParamIdentityReport {
        brute_force,
        reported: report.total,
        reductions,
    }
}

/// Outcome of one named check in a suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// Finite-difference tolerance of the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn randomize_zeros(model: &mut Model, rng: &mut Rng) {
    // zero biases and zero B put ReLU inputs on the kink and hide adapter terms
    for p in model.params_mut() {
        for v in p.iter_mut() {
            if *v == 0.0 {
                *v = 0.3 * rng.normal();
            }
        }
    }
}

/// Scales the head's output path so that no row of `x` has a logit gap above
/// `max_gap`. Gates and adapter `A` matrices are left alone, which keeps the
/// routing and the mixture weights unchanged.
fn temper_head(model: &mut Model, x: &Matrix, max_gap: f64) -> Result<()> {
    let (logits, _) = model_logits(model, x)?;
    let gap = (0..logits.rows())
        .map(|i| (logits.get(i, 1) - logits.get(i, 0)).abs())
        .fold(0.0, f64::max);
    if gap <= max_gap {
        return Ok(());
    }
    let c = max_gap / gap;
    let head = format!("block{}.", model.depth() - 1);
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let scaled = name.starts_with(&head) && !name.contains(".gate.") && !name.ends_with(".a");
        if scaled {
            p.iter_mut().for_each(|v| *v *= c);
        }
    }
    Ok(())
}

/// Central-difference check over all three kinds, depths {2, 3, 5},
/// N in {3, 6}, r in {1, 4} and top_k in {1, 2}, plus the balance penalty on
/// the gated kinds.
pub fn gradient_suite(epsilon: f64, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut cases = Vec::new();
    for kind in [ModelKind::Mlp, ModelKind::Moe, ModelKind::LoraMoe] {
        for depth in [2, 3, 5] {
            if kind == ModelKind::Mlp {
                cases.push((kind, depth, 1, 1, 1, BalanceConfig::default()));
                continue;
            }
            for n in [3, 6] {
                for k in [1, 2] {
                    let ranks: &[usize] = if kind == ModelKind::LoraMoe { &[1, 4] } else { &[1] };
                    for &r in ranks {
                        cases.push((kind, depth, n, r, k, BalanceConfig::default()));
                    }
                }
            }
        }
        if kind != ModelKind::Mlp {
            for d in [Dispersion::Cv2, Dispersion::Gini] {
                cases.push((kind, 2, 3, 2, 2, BalanceConfig::enabled(0.5, d)));
            }
        }
    }
    let mut rng = Rng::seed_from(seed);
    let mut out = Vec::new();
    for (kind, depth, n, r, k, balance) in cases {
        let cfg = ModelConfig {
            depth,
            n_experts: n,
            rank: r,
            top_k: k,
            ..ModelConfig::new(kind, 6, 5)
        };
        let mut model = Model::build(&cfg, &mut rng)?;
        randomize_zeros(&mut model, &mut rng);
        let x = Matrix::new(8, 6, (0..48).map(|_| rng.normal()).collect())?;
        temper_head(&mut model, &x, 3.0)?;
        // the wrong class for every row keeps |p - y| >= 1/2, so no entry is
        // small enough to drown in difference noise
        let (probs, _) = model_forward(&model, &x)?;
        let labels: Vec<u8> = (0..8).map(|i| u8::from(probs.get(i, 1) < probs.get(i, 0))).collect();
        let rep = grad_check(&model, &x, &labels, &balance, epsilon)?;
        let worst = rep.worst().map(|w| w.name.clone()).unwrap_or_default();
        let name = format!(
            "{} depth={depth} N={n} r={r} k={k}{}",
            kind.label(),
            if balance.enabled {
                format!(" balance={:?}", balance.dispersion)
            } else {
                String::new()
            }
        );
        out.push(CheckOutcome::new(
            name,
            rep.max_rel_error() < GRAD_TOLERANCE && rep.checked() > 0,
            format!(
                "max rel err {:.2e} ({worst}), {} checked, {} at noise floor, {} route / {} kink unstable",
                rep.max_rel_error(),
                rep.checked(),
                rep.noise_limited(),
                rep.route_unstable(),
                rep.kink_unstable()
            ),
        ));
    }
    Ok(out)
}

/// Convexity of random linear gates in dims {2, 18, 450} and exact nearest-site
/// agreement under constructed biases.
pub fn routing_suite(pairs: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::seed_from(seed);
    let mut out = Vec::new();
    for dim in [2, 18, 450] {
        for n in [2, 5, 8] {
            let gate = GatingNetwork::init(&mut rng, dim, n, 1)?;
            let rep = check_region_convexity(&gate, dim, pairs, &mut rng)?;
            out.push(CheckOutcome::new(
                format!("convexity dim={dim} N={n}"),
                rep.violations == 0,
                format!(
                    "{} violations over {} same-region pairs, occupancy {:?}",
                    rep.violations, rep.same_region_pairs, rep.occupancy
                ),
            ));
        }
    }
    for (dim, n) in [(2, 2), (2, 5), (18, 5), (450, 5)] {
        let w = Matrix::new(n, dim, (0..n * dim).map(|_| rng.normal()).collect())?;
        let offset = rng.uniform(-1.0, 1.0);
        let b = voronoi_biases(&w).into_iter().map(|v| v + offset).collect();
        let gate = GatingNetwork::new(w, b, 1)?;
        let pts = Matrix::new(1000, dim, (0..1000 * dim).map(|_| rng.uniform(-BOX, BOX)).collect())?;
        let rep = check_voronoi_sites(&gate, &pts)?;
        out.push(CheckOutcome::new(
            format!("voronoi dim={dim} N={n}"),
            rep.exact(),
            format!("{}/{} points agree", rep.agreements, rep.points),
        ));
    }
    Ok(out)
}

/// Zero-init behaviour for depth {2, 3}, N {2, 5, 8}, r {1, 4}.
pub fn zero_init_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::seed_from(seed);
    let mut out = Vec::new();
    for depth in [2, 3] {
        for n in [2, 5, 8] {
            for r in [1, 4] {
                let cfg = ModelConfig {
                    depth,
                    n_experts: n,
                    rank: r,
                    ..ModelConfig::new(ModelKind::LoraMoe, 10, 8)
                };
                let model = Model::build(&cfg, &mut rng)?;
                let x = Matrix::new(6, 10, (0..60).map(|_| rng.normal()).collect())?;
                let rep = check_zero_init(&model, &x, &[1, 0, 1, 0, 1, 0])?;
                out.push(CheckOutcome::new(
                    format!("zero-init depth={depth} N={n} r={r}"),
                    rep.passed(),
                    format!(
                        "bit-equal {}, selected nonzero {}, unselected zero {}, lr=0 zero {}",
                        rep.output_bit_equal, rep.selected_nonzero, rep.unselected_zero, rep.zero_lr_keeps_zero
                    ),
                ));
            }
        }
    }
    Ok(out)
}

/// Parameter identities for every model the built-in catalog constructs.
pub fn param_identity_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::seed_from(seed);
    let mut out = Vec::new();
    for spec in built_in_specs() {
        for (label, cfg) in spec.catalog_models() {
            let rep = check_param_identity(&Model::build(&cfg, &mut rng)?);
            out.push(CheckOutcome::new(
                format!("{} {label}", spec.name),
                rep.passed(),
                format!("brute force {} vs report {}", rep.brute_force, rep.reported),
            ));
        }
    }
    Ok(out)
}
