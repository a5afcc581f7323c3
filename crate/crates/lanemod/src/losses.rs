//! Loss terms over a proposal bank, with values and analytic gradients.
//!
//! [`total_loss`] is the full dense objective
//!
//! ```text
//! J = l_reg * J_reg + l_seg * J_seg + l_ava * (l_shape * J_shape + l_loc * J_loc)
//!     + l_div * J_div + l_dis * J_dis
//! ```
//!
//! where `J_reg` is the mean L1 regression loss over matched positives,
//! `J_shape`/`J_loc` are the dense availability terms (mean straightness
//! ratio over all proposals, mean endpoint distance over active proposals),
//! `J_div` is the negated mean intra-cluster straightness spread, and
//! `J_dis` is binary cross-entropy against quality-aware soft labels.
//! `J_seg` is a weight slot only: it needs backbone feature maps, which do
//! not exist here, so it always evaluates to zero.
//!
//! [`baseline_loss`] is the sparse objective (regression + plain BCE) the
//! dense path collapses to when the dense terms are switched off; the two
//! are kept bit-identical in that configuration.
//!
//! Gradients land in control-point space (pulled back through the Bézier
//! sampling weights) and logit space. Matchings are treated as constant
//! during differentiation.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::assignment::{
    default_cap, dense_match, hungarian_assign, CostMatrix, DenseMatch, PositiveAssignment,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    lane_l1_distance, sign, straightness_ratio, EndpointGrad, LanePolyline, LinearSampler,
    Point, ProposalBank, Scene,
};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs so
/// the cross-entropy terms stay finite. Gradients are taken with respect to
/// the logit, so the clamp almost never binds.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(logit: f64) -> f64 {
    1.0 / (1.0 + (-logit).exp())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// How the classification term is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ClsMode {
    /// No classification term at all.
    Off,
    /// Plain binary cross-entropy with hard 0/1 labels from the matching.
    Plain,
    /// Quality-aware soft labels: positives get `gamma + (1-gamma) *
    /// exp(-beta * J_reg)`, everything else 0.
    QualityAware,
}

/// Cluster cap used by the dense matcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CapRule {
    /// `max(1, floor(4K/25))`.
    Auto,
    /// Every cluster member stays active.
    Unlimited,
    /// A fixed cap, must be >= 1.
    Fixed(usize),
}

impl CapRule {
    pub fn cap_for(&self, k_proposals: usize) -> usize {
        match *self {
            CapRule::Auto => default_cap(k_proposals),
            CapRule::Unlimited => k_proposals.max(1),
            CapRule::Fixed(u) => u,
        }
    }
}

/// Term weights, soft-label constants, and the per-term ablation toggles.
///
/// Defaults are the published operating point: outer weights
/// `(1, 0.1, 0.0005, 0.0001, 0.75)`, `beta = 10`, `gamma = 0.5`. The inner
/// availability split and the negative-sample weight have no published
/// values and default to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_seg: f64,
    pub lambda_ava: f64,
    pub lambda_div: f64,
    pub lambda_dis: f64,
    /// Inner weights of the availability term.
    pub lambda_shape: f64,
    pub lambda_loc: f64,
    /// Weight on negative samples inside the cross-entropy terms.
    pub w_neg: f64,
    /// Soft-label decay rate and floor.
    pub beta: f64,
    pub gamma: f64,
    pub enable_reg: bool,
    pub enable_shape: bool,
    pub enable_loc: bool,
    pub enable_div: bool,
    pub cls_mode: ClsMode,
    pub cap: CapRule,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: 1.0,
            lambda_seg: 0.1,
            lambda_ava: 0.0005,
            lambda_div: 0.0001,
            lambda_dis: 0.75,
            lambda_shape: 1.0,
            lambda_loc: 1.0,
            w_neg: 1.0,
            beta: 10.0,
            gamma: 0.5,
            enable_reg: true,
            enable_shape: true,
            enable_loc: true,
            enable_div: true,
            cls_mode: ClsMode::QualityAware,
            cap: CapRule::Auto,
        }
    }
}

impl LossWeights {
    /// The sparse baseline configuration: regression plus plain BCE, all
    /// dense terms off.
    pub fn baseline() -> Self {
        LossWeights {
            enable_shape: false,
            enable_loc: false,
            enable_div: false,
            cls_mode: ClsMode::Plain,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_reg,
            self.lambda_seg,
            self.lambda_ava,
            self.lambda_div,
            self.lambda_dis,
            self.lambda_shape,
            self.lambda_loc,
            self.w_neg,
            self.beta,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma must lie in [0, 1]"));
        }
        if let CapRule::Fixed(u) = self.cap {
            if u == 0 {
                return Err(invalid("fixed cluster cap must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Gradients for every differentiable parameter of a bank, in bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct BankGrads {
    pub control: Vec<[Point; 4]>,
    pub logit: Vec<f64>,
}

impl BankGrads {
    fn zeros(k: usize) -> Self {
        BankGrads {
            control: vec![[[0.0; 2]; 4]; k],
            logit: vec![0.0; k],
        }
    }

    /// Flatten to the parameter layout of [`ProposalBank::to_params`].
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.logit.len() * 9);
        for (ctrl, logit) in self.control.iter().zip(&self.logit) {
            for c in ctrl {
                out.push(c[0]);
                out.push(c[1]);
            }
            out.push(*logit);
        }
        out
    }
}

/// One evaluation of the full objective: per-term values, the labels used
/// by the classification term, parameter gradients, and the matchings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub j_reg: f64,
    pub j_cls_or_dis: f64,
    pub j_shape: f64,
    pub j_loc: f64,
    pub j_div: f64,
    pub j_total: f64,
    pub soft_labels: Vec<f64>,
    pub grads: BankGrads,
    pub positives: PositiveAssignment,
    pub dense: DenseMatch,
}

/// Mean per-point L1 regression loss between a proposal and its label,
/// with the per-point gradient `sign / 2N`.
pub fn reg_loss(p: &LanePolyline, g: &LanePolyline) -> Result<(f64, Vec<Point>)> {
    let value = lane_l1_distance(p, g)?;
    let inv = 1.0 / (2.0 * p.len() as f64);
    let grad = p
        .points()
        .iter()
        .zip(g.points())
        .map(|(pp, gp)| [sign(pp[0] - gp[0]) * inv, sign(pp[1] - gp[1]) * inv])
        .collect();
    Ok((value, grad))
}

/// Weighted binary cross-entropy with a hard 0/1 label. Returns the value
/// and its derivative with respect to the pre-activation logit.
pub fn cls_loss(prob: f64, label: bool, w_neg: f64) -> (f64, f64) {
    discrimination_loss(prob, if label { 1.0 } else { 0.0 }, w_neg)
}

/// Binary cross-entropy against a soft label in `[0, 1]`; reduces to
/// [`cls_loss`] at the extremes. The derivative is with respect to the
/// logit: `-l' * (1 - p) + w * (1 - l') * p`.
pub fn discrimination_loss(prob: f64, l_prime: f64, w_neg: f64) -> (f64, f64) {
    let p = clamp_prob(prob);
    let value = -(l_prime * p.ln() + w_neg * (1.0 - l_prime) * (1.0 - p).ln());
    let grad = -l_prime * (1.0 - prob) + w_neg * (1.0 - l_prime) * prob;
    (value, grad)
}

/// Quality-aware classification target: positives decay from 1 toward
/// `gamma` as their regression loss grows, negatives are 0. No gradient
/// flows through `j_reg_value`; it enters as a constant.
pub fn soft_label(j_reg_value: f64, is_positive: bool, beta: f64, gamma: f64) -> f64 {
    if is_positive {
        gamma + (1.0 - gamma) * (-beta * j_reg_value).exp()
    } else {
        0.0
    }
}

/// Mean straightness ratio over all `K` lanes, with the gradient of the
/// mean per lane point.
pub fn shape_loss(lanes: &[LanePolyline]) -> Result<(f64, Vec<Vec<Point>>)> {
    if lanes.is_empty() {
        return Err(invalid("shape loss needs at least one lane"));
    }
    let inv = 1.0 / lanes.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(lanes.len());
    for (index, lane) in lanes.iter().enumerate() {
        let (s, g) = straightness_ratio(lane).map_err(|e| match e {
            Error::DegenerateChord => Error::DegenerateProposal { index },
            other => other,
        })?;
        total += s;
        grads.push(g.into_iter().map(|p| [p[0] * inv, p[1] * inv]).collect());
    }
    Ok((total * inv, grads))
}

/// Mean endpoint distance over the active proposals, averaged over all `K`
/// (inactive proposals contribute zero). Returns one endpoint gradient per
/// proposal, already scaled by `1/K`.
pub fn location_loss(
    proposals: &[LanePolyline],
    scene: &Scene,
    dm: &DenseMatch,
) -> Result<(f64, Vec<EndpointGrad>)> {
    if dm.n_proposals() != proposals.len() {
        return Err(invalid("dense match does not cover this bank"));
    }
    let inv = 1.0 / proposals.len() as f64;
    let mut total = 0.0;
    let mut grads = vec![EndpointGrad::default(); proposals.len()];
    for (k, lane) in proposals.iter().enumerate() {
        if !dm.is_active(k) {
            continue;
        }
        let label = dm.target(k).expect("active proposals always have a target");
        let (d, g) = crate::geometry::endpoint_distance(lane, &scene.ground_truth()[label]);
        total += d;
        grads[k] = EndpointGrad {
            start: [g.start[0] * inv, g.start[1] * inv],
            end: [g.end[0] * inv, g.end[1] * inv],
        };
    }
    Ok((total * inv, grads))
}

/// Negated mean intra-cluster straightness difference over unordered
/// active pairs sharing a target. Returns the value (always <= 0) and its
/// gradient per straightness value.
pub fn diversity_loss(shape_values: &[f64], dm: &DenseMatch) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; shape_values.len()];
    let pairs = dm.active_pairs();
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for &(a, b) in &pairs {
        let diff = shape_values[a] - shape_values[b];
        total += diff.abs();
        let s = sign(diff);
        grad[a] -= s * inv;
        grad[b] += s * inv;
    }
    (-total * inv, grad)
}

// ---------------------------------------------------------------------------
// Aggregate objective

struct MatchedBank {
    proposals: Vec<LanePolyline>,
    positives: PositiveAssignment,
    dense: DenseMatch,
    /// Matched label per proposal, `usize::MAX` for negatives.
    positive_label: Vec<usize>,
}

fn validate_bank(bank: &ProposalBank) -> Result<()> {
    for lane in &bank.lanes {
        if lane.control.iter().flatten().any(|c| !c.is_finite()) || !lane.logit.is_finite() {
            return Err(invalid("proposal parameters must be finite"));
        }
    }
    Ok(())
}

fn match_bank(bank: &ProposalBank, scene: &Scene, cap: usize) -> Result<MatchedBank> {
    validate_bank(bank)?;
    if scene.n_lanes() > 0 && scene.n_points() != Some(bank.n_points) {
        return Err(invalid("scene N and bank n_points must agree"));
    }
    let sampler = LinearSampler::cubic_bernstein(bank.n_points)?;
    let proposals: Vec<LanePolyline> =
        bank.lanes.iter().map(|b| sampler.sample(&b.control)).collect();
    let costs = CostMatrix::from_lanes(scene.ground_truth(), &proposals)?;
    let positives = hungarian_assign(&costs)?;
    let dense = dense_match(&costs, cap)?;
    let mut positive_label = vec![usize::MAX; proposals.len()];
    for &(i, k) in positives.pairs() {
        positive_label[k] = i;
    }
    Ok(MatchedBank {
        proposals,
        positives,
        dense,
        positive_label,
    })
}

/// Regression term: mean over positive pairs, plus the per-proposal values
/// the soft labels consume. When `grad_scale` is set, scaled per-point
/// gradients are accumulated into `acc`.
fn accumulate_reg(
    matched: &MatchedBank,
    scene: &Scene,
    grad_scale: Option<f64>,
    acc: &mut [Vec<Point>],
) -> Result<(f64, Vec<f64>)> {
    let pairs = matched.positives.pairs();
    let mut per_proposal = vec![0.0; matched.proposals.len()];
    if pairs.is_empty() {
        return Ok((0.0, per_proposal));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for &(i, k) in pairs {
        let (v, g) = reg_loss(&matched.proposals[k], &scene.ground_truth()[i])?;
        per_proposal[k] = v;
        total += v;
        if let Some(scale) = grad_scale {
            for (dst, src) in acc[k].iter_mut().zip(&g) {
                dst[0] += scale * src[0];
                dst[1] += scale * src[1];
            }
        }
    }
    Ok((total * inv, per_proposal))
}

/// Classification term: mean per-proposal cross-entropy against `labels`.
/// When `grad_scale` is set, scaled logit gradients are accumulated.
fn accumulate_cls(
    bank: &ProposalBank,
    labels: &[f64],
    w_neg: f64,
    grad_scale: Option<f64>,
    acc_logit: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for (k, lane) in bank.lanes.iter().enumerate() {
        let (v, dz) = discrimination_loss(sigmoid(lane.logit), labels[k], w_neg);
        total += v;
        if let Some(scale) = grad_scale {
            acc_logit[k] += scale * dz;
        }
    }
    total / bank.lanes.len() as f64
}

fn classification_labels(
    mode: ClsMode,
    positive_label: &[usize],
    jreg_per_proposal: &[f64],
    beta: f64,
    gamma: f64,
) -> Vec<f64> {
    positive_label
        .iter()
        .enumerate()
        .map(|(k, &label)| {
            let is_positive = label != usize::MAX;
            match mode {
                ClsMode::QualityAware => {
                    soft_label(jreg_per_proposal[k], is_positive, beta, gamma)
                }
                // Hard labels; also reported as metadata when the term is off.
                ClsMode::Plain | ClsMode::Off => {
                    if is_positive {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect()
}

/// The segmentation slot: kept in the weighted sum so the weight layout
/// matches the published objective, but there is no backbone here, so it is
/// identically zero.
const J_SEG: f64 = 0.0;

/// Evaluate the full dense objective on a bank.
///
/// Runs the one-to-one matcher for positives and the dense capped matcher,
/// computes every enabled term, and pulls all point-space gradients back
/// through the Bézier sampling weights. Disabled terms contribute exactly
/// zero to the total and to every gradient.
pub fn total_loss(bank: &ProposalBank, scene: &Scene, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let k = bank.len();
    let matched = match_bank(bank, scene, w.cap.cap_for(k))?;
    let inv_k = 1.0 / k as f64;

    let mut acc_point: Vec<Vec<Point>> = vec![vec![[0.0; 2]; bank.n_points]; k];
    let mut acc_logit = vec![0.0; k];

    // Regression over positives. Values are needed whenever soft labels
    // are in play, even if the term itself is toggled off.
    let n_pairs = matched.positives.pairs().len();
    let reg_scale = (w.enable_reg && n_pairs > 0)
        .then(|| w.lambda_reg * (1.0 / n_pairs as f64));
    let (j_reg, jreg_per_proposal) =
        accumulate_reg(&matched, scene, reg_scale, &mut acc_point)?;

    // Straightness values and raw gradients back both the shape term and
    // the diversity chain.
    let need_shape = w.enable_shape || w.enable_div;
    let mut shape_values = vec![0.0; k];
    let mut shape_grads: Vec<Vec<Point>> = Vec::new();
    let mut j_shape = 0.0;
    if need_shape {
        shape_grads.reserve(k);
        let mut total = 0.0;
        for (index, lane) in matched.proposals.iter().enumerate() {
            let (s, g) = straightness_ratio(lane).map_err(|e| match e {
                Error::DegenerateChord => Error::DegenerateProposal { index },
                other => other,
            })?;
            shape_values[index] = s;
            total += s;
            shape_grads.push(g);
        }
        j_shape = total * inv_k;
        if w.enable_shape {
            let scale = w.lambda_ava * w.lambda_shape * inv_k;
            for (acc, grads) in acc_point.iter_mut().zip(&shape_grads) {
                for (dst, src) in acc.iter_mut().zip(grads) {
                    dst[0] += scale * src[0];
                    dst[1] += scale * src[1];
                }
            }
        }
    }

    // Location over active proposals (value and grads carry 1/K already).
    let mut j_loc = 0.0;
    if w.enable_loc {
        let (value, grads) = location_loss(&matched.proposals, scene, &matched.dense)?;
        j_loc = value;
        let scale = w.lambda_ava * w.lambda_loc;
        let last = bank.n_points - 1;
        for (k_idx, g) in grads.iter().enumerate() {
            acc_point[k_idx][0][0] += scale * g.start[0];
            acc_point[k_idx][0][1] += scale * g.start[1];
            acc_point[k_idx][last][0] += scale * g.end[0];
            acc_point[k_idx][last][1] += scale * g.end[1];
        }
    }

    // Diversity chains through the straightness gradients.
    let mut j_div = 0.0;
    if w.enable_div {
        let (value, dds) = diversity_loss(&shape_values, &matched.dense);
        j_div = value;
        for (k_idx, coeff) in dds.iter().enumerate() {
            if *coeff == 0.0 {
                continue;
            }
            let scale = w.lambda_div * coeff;
            for (dst, src) in acc_point[k_idx].iter_mut().zip(&shape_grads[k_idx]) {
                dst[0] += scale * src[0];
                dst[1] += scale * src[1];
            }
        }
    }

    // Classification (plain or quality-aware).
    let labels = classification_labels(
        w.cls_mode,
        &matched.positive_label,
        &jreg_per_proposal,
        w.beta,
        w.gamma,
    );
    let cls_scale = (w.cls_mode != ClsMode::Off).then_some(w.lambda_dis * inv_k);
    let j_cls_or_dis = accumulate_cls(bank, &labels, w.w_neg, cls_scale, &mut acc_logit);

    let mut j_total = 0.0;
    if w.enable_reg {
        j_total += w.lambda_reg * j_reg;
    }
    j_total += w.lambda_seg * J_SEG;
    if w.enable_shape {
        j_total += w.lambda_ava * (w.lambda_shape * j_shape);
    }
    if w.enable_loc {
        j_total += w.lambda_ava * (w.lambda_loc * j_loc);
    }
    if w.enable_div {
        j_total += w.lambda_div * j_div;
    }
    if w.cls_mode != ClsMode::Off {
        j_total += w.lambda_dis * j_cls_or_dis;
    }

    let sampler = LinearSampler::cubic_bernstein(bank.n_points)?;
    let mut grads = BankGrads::zeros(k);
    for (k_idx, points) in acc_point.iter().enumerate() {
        grads.control[k_idx] = sampler.backprop(points);
        grads.logit[k_idx] = acc_logit[k_idx];
    }

    Ok(LossReport {
        j_reg,
        j_cls_or_dis,
        j_shape,
        j_loc,
        j_div,
        j_total,
        soft_labels: labels,
        grads,
        positives: matched.positives,
        dense: matched.dense,
    })
}

/// The sparse baseline objective: mean regression over matched positives
/// plus plain hard-label BCE over all proposals (plus the zero
/// segmentation slot). No dense matching enters the value or the
/// gradients; the dense metadata in the report is diagnostic only.
///
/// [`total_loss`] with the dense terms disabled and `ClsMode::Plain` is
/// bit-identical to this path on the same inputs.
pub fn baseline_loss(bank: &ProposalBank, scene: &Scene, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let k = bank.len();
    let matched = match_bank(bank, scene, w.cap.cap_for(k))?;
    let inv_k = 1.0 / k as f64;

    let mut acc_point: Vec<Vec<Point>> = vec![vec![[0.0; 2]; bank.n_points]; k];
    let mut acc_logit = vec![0.0; k];

    let n_pairs = matched.positives.pairs().len();
    let reg_scale = (w.enable_reg && n_pairs > 0)
        .then(|| w.lambda_reg * (1.0 / n_pairs as f64));
    let (j_reg, jreg_per_proposal) =
        accumulate_reg(&matched, scene, reg_scale, &mut acc_point)?;

    let labels = classification_labels(
        ClsMode::Plain,
        &matched.positive_label,
        &jreg_per_proposal,
        w.beta,
        w.gamma,
    );
    let cls_scale = (w.cls_mode != ClsMode::Off).then_some(w.lambda_dis * inv_k);
    let j_cls = accumulate_cls(bank, &labels, w.w_neg, cls_scale, &mut acc_logit);

    let mut j_total = 0.0;
    if w.enable_reg {
        j_total += w.lambda_reg * j_reg;
    }
    j_total += w.lambda_seg * J_SEG;
    if w.cls_mode != ClsMode::Off {
        j_total += w.lambda_dis * j_cls;
    }

    let sampler = LinearSampler::cubic_bernstein(bank.n_points)?;
    let mut grads = BankGrads::zeros(k);
    for (k_idx, points) in acc_point.iter().enumerate() {
        grads.control[k_idx] = sampler.backprop(points);
        grads.logit[k_idx] = acc_logit[k_idx];
    }

    Ok(LossReport {
        j_reg,
        j_cls_or_dis: j_cls,
        j_shape: 0.0,
        j_loc: 0.0,
        j_div: 0.0,
        j_total,
        soft_labels: labels,
        grads,
        positives: matched.positives,
        dense: matched.dense,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference support

/// All signed arguments of the non-differentiable pieces of [`total_loss`]
/// at this point: L1 coordinate differences, endpoint differences,
/// intra-cluster straightness differences, plus segment and chord lengths
/// (kinks of the square roots). The finite-difference checker skips
/// coordinates whose stencil lands on or crosses a zero of any of these.
pub fn total_loss_kink_args(
    bank: &ProposalBank,
    scene: &Scene,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    w.validate()?;
    let matched = match_bank(bank, scene, w.cap.cap_for(bank.len()))?;
    let mut args = Vec::new();

    if w.enable_reg || w.cls_mode == ClsMode::QualityAware {
        for &(i, k) in matched.positives.pairs() {
            let g = &scene.ground_truth()[i];
            for (pp, gp) in matched.proposals[k].points().iter().zip(g.points()) {
                args.push(pp[0] - gp[0]);
                args.push(pp[1] - gp[1]);
            }
        }
    }

    if w.enable_loc {
        for (k, lane) in matched.proposals.iter().enumerate() {
            if !matched.dense.is_active(k) {
                continue;
            }
            let g = &scene.ground_truth()[matched.dense.target(k).unwrap()];
            args.push(lane.start()[0] - g.start()[0]);
            args.push(lane.start()[1] - g.start()[1]);
            args.push(lane.end()[0] - g.end()[0]);
            args.push(lane.end()[1] - g.end()[1]);
        }
    }

    if w.enable_shape || w.enable_div {
        for lane in &matched.proposals {
            let pts = lane.points();
            let n = pts.len();
            let chord =
                ((pts[n - 1][0] - pts[0][0]).powi(2) + (pts[n - 1][1] - pts[0][1]).powi(2)).sqrt();
            args.push(chord);
            for i in 0..n - 1 {
                let seg = ((pts[i + 1][0] - pts[i][0]).powi(2)
                    + (pts[i + 1][1] - pts[i][1]).powi(2))
                .sqrt();
                args.push(seg);
            }
        }
    }

    if w.enable_div {
        let mut shape_values = vec![0.0; matched.proposals.len()];
        for (k, lane) in matched.proposals.iter().enumerate() {
            shape_values[k] = straightness_ratio(lane)
                .map_err(|e| match e {
                    Error::DegenerateChord => Error::DegenerateProposal { index: k },
                    other => other,
                })?
                .0;
        }
        for (a, b) in matched.dense.active_pairs() {
            args.push(shape_values[a] - shape_values[b]);
        }
    }

    Ok(args)
}

/// The discrete matching decisions behind [`total_loss`]: dense targets,
/// active flags, and the positive label per proposal. Any change across a
/// finite-difference stencil means the objective switched branches there.
pub fn total_loss_decisions(
    bank: &ProposalBank,
    scene: &Scene,
    w: &LossWeights,
) -> Result<Vec<u32>> {
    w.validate()?;
    let matched = match_bank(bank, scene, w.cap.cap_for(bank.len()))?;
    let mut out = Vec::with_capacity(bank.len() * 3);
    for k in 0..bank.len() {
        out.push(matched.dense.target(k).map_or(u32::MAX, |t| t as u32));
        out.push(matched.dense.is_active(k) as u32);
        let label = matched.positive_label[k];
        out.push(if label == usize::MAX { u32::MAX } else { label as u32 });
    }
    Ok(out)
}

impl ProposalBank {
    /// Flatten to `[c0x, c0y, c1x, c1y, c2x, c2y, c3x, c3y, logit]` per
    /// proposal, bank order.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for lane in &self.lanes {
            for c in &lane.control {
                out.push(c[0]);
                out.push(c[1]);
            }
            out.push(lane.logit);
        }
        out
    }

    /// Inverse of [`ProposalBank::to_params`].
    pub fn from_params(params: &[f64], n_points: usize) -> Result<Self> {
        if params.is_empty() || params.len() % 9 != 0 {
            return Err(invalid("parameter vector length must be a positive multiple of 9"));
        }
        let lanes = params
            .chunks_exact(9)
            .map(|chunk| {
                let mut control = [[0.0; 2]; 4];
                for (j, c) in control.iter_mut().enumerate() {
                    c[0] = chunk[2 * j];
                    c[1] = chunk[2 * j + 1];
                }
                crate::geometry::BezierLane::new(control, chunk[8])
            })
            .collect();
        ProposalBank::new(lanes, n_points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BezierLane, Frame};

    fn lane(points: &[[f64; 2]]) -> LanePolyline {
        LanePolyline::new(points.to_vec()).unwrap()
    }

    fn straight_bezier(start: Point, end: Point, logit: f64) -> BezierLane {
        let third = [
            start[0] + (end[0] - start[0]) / 3.0,
            start[1] + (end[1] - start[1]) / 3.0,
        ];
        let two_thirds = [
            start[0] + 2.0 * (end[0] - start[0]) / 3.0,
            start[1] + 2.0 * (end[1] - start[1]) / 3.0,
        ];
        BezierLane::new([start, third, two_thirds, end], logit)
    }

    fn scene_with(lanes: Vec<LanePolyline>) -> Scene {
        Scene::new(Frame::new(800, 288).unwrap(), lanes).unwrap()
    }

    #[test]
    fn reg_loss_examples() {
        let g = lane(&[[0.1, 0.2], [0.3, 0.5], [0.5, 0.9]]);
        let same = reg_loss(&g, &g).unwrap();
        assert_eq!(same.0, 0.0);

        let shifted_x = lane(&[[0.2, 0.2], [0.4, 0.5], [0.6, 0.9]]);
        let (v, grad) = reg_loss(&shifted_x, &g).unwrap();
        assert!((v - 0.05).abs() < 1e-12);
        for p in &grad {
            assert!((p[0] - 1.0 / 6.0).abs() < 1e-12);
            assert_eq!(p[1], 0.0);
        }

        let shifted_xy = lane(&[[0.2, 0.3], [0.4, 0.6], [0.6, 1.0]]);
        assert!((reg_loss(&shifted_xy, &g).unwrap().0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_examples() {
        let (v, _) = cls_loss(0.5, true, 1.0);
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);

        let (near_zero, _) = cls_loss(1.0 - 1e-9, true, 1.0);
        assert!(near_zero < 1e-6);

        let (weighted, _) = cls_loss(0.5, false, 2.0);
        assert!((weighted - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_loss_examples() {
        let straight = lane(&[[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]);
        let right_angle = lane(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]);

        let (all_straight, _) = shape_loss(&[straight.clone(), straight.clone()]).unwrap();
        assert!((all_straight - 1.0).abs() < 1e-12);

        let (mixed, _) = shape_loss(&[straight, right_angle.clone()]).unwrap();
        assert!((mixed - (1.0 + core::f64::consts::SQRT_2) / 2.0).abs() < 1e-12);

        let (single, _) = shape_loss(&[right_angle]).unwrap();
        assert!((single - core::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn shape_loss_reports_offending_index() {
        let good = lane(&[[0.0, 0.0], [1.0, 1.0]]);
        let bad = lane(&[[0.4, 0.4], [0.4, 0.4]]);
        let err = shape_loss(&[good, bad]).unwrap_err();
        assert_eq!(err, Error::DegenerateProposal { index: 1 });
    }

    #[test]
    fn diversity_loss_examples() {
        // Two proposals in one cluster.
        let costs = CostMatrix::new(1, 2, vec![0.1, 0.2]).unwrap();
        let dm = dense_match(&costs, 5).unwrap();
        let (v, grad) = diversity_loss(&[1.2, 1.5], &dm);
        assert!((v + 0.3).abs() < 1e-12);
        assert_eq!(grad, vec![1.0, -1.0]);

        // Singleton clusters: no pairs.
        let costs = CostMatrix::new(2, 2, vec![0.1, 0.9, 0.9, 0.1]).unwrap();
        let dm = dense_match(&costs, 5).unwrap();
        assert_eq!(diversity_loss(&[1.3, 1.8], &dm).0, 0.0);

        // Three in one cluster: mean over the three pairs.
        let costs = CostMatrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let dm = dense_match(&costs, 5).unwrap();
        let (v, _) = diversity_loss(&[1.0, 1.2, 1.5], &dm);
        assert!((v + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn soft_label_examples() {
        assert_eq!(soft_label(0.0, true, 10.0, 0.5), 1.0);
        let decayed = soft_label(0.1, true, 10.0, 0.5);
        assert!((decayed - (0.5 + 0.5 * (-1.0_f64).exp())).abs() < 1e-12);
        assert_eq!(soft_label(3.0, false, 10.0, 0.5), 0.0);
    }

    #[test]
    fn discrimination_examples() {
        let (hard_pos, _) = discrimination_loss(0.5, 1.0, 1.0);
        assert!((hard_pos - core::f64::consts::LN_2).abs() < 1e-12);

        let (half, _) = discrimination_loss(0.5, 0.5, 1.0);
        assert!((half - core::f64::consts::LN_2).abs() < 1e-12);

        // Minimum over p sits at p = l' (zero logit-gradient there).
        let l_prime = 0.683940;
        let logit_at_min = (l_prime / (1.0 - l_prime)).ln();
        let (_, dz) = discrimination_loss(sigmoid(logit_at_min), l_prime, 1.0);
        assert!(dz.abs() < 1e-12);
    }

    #[test]
    fn total_loss_all_disabled_is_zero() {
        let bank = ProposalBank::new(
            vec![straight_bezier([0.2, 1.0], [0.5, 0.3], 0.3)],
            5,
        )
        .unwrap();
        let scene = scene_with(vec![lane(&[
            [0.3, 1.0],
            [0.35, 0.8],
            [0.4, 0.6],
            [0.45, 0.45],
            [0.5, 0.3],
        ])]);
        let w = LossWeights {
            enable_reg: false,
            enable_shape: false,
            enable_loc: false,
            enable_div: false,
            cls_mode: ClsMode::Off,
            ..LossWeights::default()
        };
        let report = total_loss(&bank, &scene, &w).unwrap();
        assert_eq!(report.j_total, 0.0);
        assert!(report.grads.logit.iter().all(|g| *g == 0.0));
        assert!(report
            .grads
            .control
            .iter()
            .flatten()
            .flatten()
            .all(|g| *g == 0.0));
    }

    #[test]
    fn total_loss_matches_hand_combined_terms() {
        let bank = ProposalBank::new(
            vec![
                straight_bezier([0.15, 0.95], [0.45, 0.35], 0.4),
                straight_bezier([0.6, 0.9], [0.5, 0.4], -0.2),
                BezierLane::new([[0.7, 0.9], [0.9, 0.6], [0.6, 0.5], [0.75, 0.3]], 0.1),
            ],
            6,
        )
        .unwrap();
        let gt1 = lane(&[
            [0.2, 1.0],
            [0.25, 0.86],
            [0.3, 0.72],
            [0.35, 0.58],
            [0.4, 0.44],
            [0.45, 0.3],
        ]);
        let gt2 = lane(&[
            [0.7, 1.0],
            [0.68, 0.86],
            [0.66, 0.72],
            [0.64, 0.58],
            [0.62, 0.44],
            [0.6, 0.3],
        ]);
        let scene = scene_with(vec![gt1.clone(), gt2.clone()]);
        let w = LossWeights::default();
        let report = total_loss(&bank, &scene, &w).unwrap();

        let expected = w.lambda_reg * report.j_reg
            + w.lambda_seg * 0.0
            + w.lambda_ava * (w.lambda_shape * report.j_shape)
            + w.lambda_ava * (w.lambda_loc * report.j_loc)
            + w.lambda_div * report.j_div
            + w.lambda_dis * report.j_cls_or_dis;
        assert!((report.j_total - expected).abs() < 1e-9);

        // Cross-check the individual terms against the standalone ops.
        let sampler = LinearSampler::cubic_bernstein(6).unwrap();
        let proposals: Vec<LanePolyline> =
            bank.lanes.iter().map(|b| sampler.sample(&b.control)).collect();
        let (shape_direct, _) = shape_loss(&proposals).unwrap();
        assert!((report.j_shape - shape_direct).abs() < 1e-12);
        let (loc_direct, _) = location_loss(&proposals, &scene, &report.dense).unwrap();
        assert!((report.j_loc - loc_direct).abs() < 1e-12);
    }

    #[test]
    fn total_loss_perfect_confident_single_proposal_leaves_shape_floor() {
        let gt_points: Vec<Point> = (0..8)
            .map(|i| {
                let t = i as f64 / 7.0;
                [0.3 + 0.2 * t, 1.0 - 0.7 * t]
            })
            .collect();
        let gt = lane(&gt_points);
        // A straight Bézier whose samples coincide with the straight GT.
        let bank = ProposalBank::new(
            vec![straight_bezier([0.3, 1.0], [0.5, 0.3], 40.0)],
            8,
        )
        .unwrap();
        let scene = scene_with(vec![gt]);
        let w = LossWeights::default();
        let report = total_loss(&bank, &scene, &w).unwrap();
        assert!(report.j_reg < 1e-12);
        assert!(report.j_loc < 1e-12);
        assert_eq!(report.j_div, 0.0);
        let floor = w.lambda_ava * w.lambda_shape * report.j_shape;
        assert!((report.j_total - floor).abs() < 1e-5);
    }

    #[test]
    fn dense_terms_disabled_is_bit_identical_to_baseline() {
        let bank = ProposalBank::new(
            vec![
                straight_bezier([0.2, 0.9], [0.4, 0.3], 0.7),
                BezierLane::new([[0.5, 0.95], [0.45, 0.7], [0.6, 0.5], [0.55, 0.25]], -0.4),
                straight_bezier([0.8, 1.0], [0.6, 0.4], 0.0),
            ],
            5,
        )
        .unwrap();
        let scene = scene_with(vec![
            lane(&[[0.25, 1.0], [0.3, 0.8], [0.35, 0.6], [0.4, 0.45], [0.45, 0.3]]),
            lane(&[[0.7, 1.0], [0.66, 0.8], [0.62, 0.62], [0.58, 0.45], [0.55, 0.3]]),
        ]);
        let sparse = LossWeights::baseline();
        let dense_path = total_loss(&bank, &scene, &sparse).unwrap();
        let sparse_path = baseline_loss(&bank, &scene, &sparse).unwrap();
        assert_eq!(dense_path.j_total.to_bits(), sparse_path.j_total.to_bits());
        for (a, b) in dense_path
            .grads
            .control
            .iter()
            .flatten()
            .flatten()
            .zip(sparse_path.grads.control.iter().flatten().flatten())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in dense_path.grads.logit.iter().zip(&sparse_path.grads.logit) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn term_contribution_scales_exactly_with_its_weight() {
        let bank = ProposalBank::new(
            vec![
                BezierLane::new([[0.2, 0.9], [0.35, 0.75], [0.3, 0.5], [0.45, 0.3]], 0.2),
                BezierLane::new([[0.6, 0.95], [0.5, 0.7], [0.7, 0.55], [0.6, 0.3]], -0.1),
            ],
            5,
        )
        .unwrap();
        let scene = scene_with(vec![lane(&[
            [0.3, 1.0],
            [0.35, 0.8],
            [0.4, 0.62],
            [0.45, 0.45],
            [0.5, 0.3],
        ])]);

        // Isolate the shape term and scale its weight by a power of two:
        // value and every gradient must scale bit-exactly.
        let only_shape = LossWeights {
            enable_reg: false,
            enable_loc: false,
            enable_div: false,
            cls_mode: ClsMode::Off,
            lambda_ava: 0.125,
            ..LossWeights::default()
        };
        let scaled = LossWeights {
            lambda_ava: 0.5,
            ..only_shape
        };
        let base = total_loss(&bank, &scene, &only_shape).unwrap();
        let quad = total_loss(&bank, &scene, &scaled).unwrap();
        assert_eq!((base.j_total * 4.0).to_bits(), quad.j_total.to_bits());
        for (a, b) in base
            .grads
            .control
            .iter()
            .flatten()
            .flatten()
            .zip(quad.grads.control.iter().flatten().flatten())
        {
            assert_eq!((a * 4.0).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn label_free_scene_keeps_shape_term_only() {
        let bank = ProposalBank::new(
            vec![BezierLane::new(
                [[0.2, 0.9], [0.4, 0.7], [0.3, 0.5], [0.5, 0.3]],
                0.0,
            )],
            5,
        )
        .unwrap();
        let scene = scene_with(vec![]);
        let report = total_loss(&bank, &scene, &LossWeights::default()).unwrap();
        assert_eq!(report.j_reg, 0.0);
        assert_eq!(report.j_loc, 0.0);
        assert_eq!(report.j_div, 0.0);
        assert!(report.j_shape > 1.0);
        assert_eq!(report.soft_labels, vec![0.0]);
        assert!(report.positives.pairs().is_empty());
    }

    #[test]
    fn params_round_trip() {
        let bank = ProposalBank::new(
            vec![
                BezierLane::new([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]], 0.9),
                BezierLane::new([[0.9, 0.8], [0.7, 0.6], [0.5, 0.4], [0.3, 0.2]], -0.1),
            ],
            7,
        )
        .unwrap();
        let params = bank.to_params();
        assert_eq!(params.len(), bank.parameter_count());
        let rebuilt = ProposalBank::from_params(&params, 7).unwrap();
        assert_eq!(rebuilt, bank);
    }
}
