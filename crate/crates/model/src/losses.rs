//! Training objectives.
//!
//! The value functions (`adversarial_loss`, `cycle_loss`, ...) accept any
//! [`BatchMap`], [`Critic`] or [`FeatureMap`], so closures can stand in for
//! networks. [`generator_grads`] and [`discriminator_grads`] evaluate the
//! same quantities on real networks together with their parameter
//! gradients.

use ndarray::{Array1, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::swap_batch_channels;
use crate::nets::{Discriminator, FeatureEncoder, Generator, GeneratorCache, NetError, Networks, Parameters};
use crate::real::Real;

/// Probability clamp before logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Stabilizer inside the feature-distance square root.
pub const FEATURE_DELTA: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error("unknown objective variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Cgan,
    CganId,
    #[default]
    Proposed,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cgan => "CGAN",
            Variant::CganId => "CGAN_ID",
            Variant::Proposed => "PROPOSED",
        }
    }

    pub fn parse(s: &str) -> Result<Self, LossError> {
        match s.to_ascii_uppercase().replace(['-', '+'], "_").as_str() {
            "CGAN" => Ok(Variant::Cgan),
            "CGAN_ID" => Ok(Variant::CganId),
            "PROPOSED" => Ok(Variant::Proposed),
            _ => Err(LossError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_int: f64,
    pub lambda_fea: f64,
    pub lambda_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_int: 25.0,
            lambda_fea: 1.0,
            lambda_id: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_int", self.lambda_int),
            ("lambda_fea", self.lambda_fea),
            ("lambda_id", self.lambda_id),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::BadWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Loss components of one evaluation. Terms a variant does not use are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_xy: f64,
    pub adv_yx: f64,
    pub cyc: f64,
    pub int: f64,
    pub fea: f64,
    pub id: f64,
    pub total: f64,
}

impl LossReport {
    /// Fills `total` from the components.
    pub fn combine(
        variant: Variant,
        weights: &LossWeights,
        adv_xy: f64,
        adv_yx: f64,
        cyc: f64,
        int: f64,
        fea: f64,
        id: f64,
    ) -> Self {
        let mut r = Self {
            adv_xy,
            adv_yx,
            cyc,
            int: 0.0,
            fea: 0.0,
            id: 0.0,
            total: 0.0,
        };
        match variant {
            Variant::Cgan => {}
            Variant::CganId => r.id = id,
            Variant::Proposed => {
                r.int = int;
                r.fea = fea;
            }
        }
        r.total = r.adv_xy + r.adv_yx + weights.lambda_cyc * r.cyc;
        r.total += match variant {
            Variant::Cgan => 0.0,
            Variant::CganId => weights.lambda_id * r.id,
            Variant::Proposed => weights.lambda_int * r.int + weights.lambda_fea * r.fea,
        };
        r
    }

    pub fn is_finite(&self) -> bool {
        [
            self.adv_xy,
            self.adv_yx,
            self.cyc,
            self.int,
            self.fea,
            self.id,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A batch-to-batch mapping, `(B, N, H, W)` in and out.
pub trait BatchMap<F> {
    fn map(&self, x: &Array4<F>) -> Result<Array4<F>, LossError>;
}

impl<F: Real> BatchMap<F> for Generator<F> {
    fn map(&self, x: &Array4<F>) -> Result<Array4<F>, LossError> {
        Ok(self.forward(x)?)
    }
}

impl<F, T: Fn(&Array4<F>) -> Array4<F>> BatchMap<F> for T {
    fn map(&self, x: &Array4<F>) -> Result<Array4<F>, LossError> {
        Ok(self(x))
    }
}

/// Probability that each window of a batch is real.
pub trait Critic<F> {
    fn prob(&self, x: &Array4<F>) -> Result<Array1<F>, LossError>;
}

impl<F: Real> Critic<F> for Discriminator<F> {
    fn prob(&self, x: &Array4<F>) -> Result<Array1<F>, LossError> {
        Ok(self.forward(x)?)
    }
}

/// Wraps a closure as a critic.
pub struct FnCritic<T>(pub T);

impl<F, T: Fn(&Array4<F>) -> Array1<F>> Critic<F> for FnCritic<T> {
    fn prob(&self, x: &Array4<F>) -> Result<Array1<F>, LossError> {
        Ok((self.0)(x))
    }
}

pub trait FeatureMap<F> {
    fn features(&self, x: &Array4<F>) -> Result<Array4<F>, LossError>;
}

impl<F: Real> FeatureMap<F> for FeatureEncoder<F> {
    fn features(&self, x: &Array4<F>) -> Result<Array4<F>, LossError> {
        Ok(self.forward(x)?)
    }
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn check_pair<F: Real>(a: &Array4<F>, b: &Array4<F>) -> Result<(), LossError> {
    if a.is_empty() || b.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

fn mean_abs_diff<F: Real>(a: &Array4<F>, b: &Array4<F>) -> f64 {
    let sum: f64 = Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &u, &v| acc + (u - v).abs().to_f64().unwrap());
    sum / a.len() as f64
}

fn mean_log<F: Real>(p: &Array1<F>, complement: bool) -> f64 {
    p.iter()
        .map(|&v| {
            let c = v.to_f64().unwrap().clamp(PROB_EPS, 1.0 - PROB_EPS);
            if complement {
                (1.0 - c).ln()
            } else {
                c.ln()
            }
        })
        .sum::<f64>()
        / p.len() as f64
}

/// Adversarial value from discriminator outputs on real targets and on
/// translated sources: `mean log D(t) + mean log(1 - D(G(s)))`.
pub fn adversarial_from_probs<F: Real>(p_real: &Array1<F>, p_fake: &Array1<F>) -> Result<f64, LossError> {
    if p_real.is_empty() || p_fake.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(mean_log(p_real, false) + mean_log(p_fake, true))
}

pub fn adversarial_loss<F: Real>(
    d: &impl Critic<F>,
    g: &impl BatchMap<F>,
    batch_src: &Array4<F>,
    batch_tgt: &Array4<F>,
) -> Result<f64, LossError> {
    if batch_src.is_empty() || batch_tgt.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    adversarial_from_probs(&d.prob(batch_tgt)?, &d.prob(&g.map(batch_src)?)?)
}

pub fn cycle_loss<F: Real>(
    g_x: &impl BatchMap<F>,
    g_y: &impl BatchMap<F>,
    batch_x: &Array4<F>,
    batch_y: &Array4<F>,
) -> Result<f64, LossError> {
    check_pair(batch_x, batch_y)?;
    let cx = g_x.map(&g_y.map(batch_x)?)?;
    let cy = g_y.map(&g_x.map(batch_y)?)?;
    Ok(mean_abs_diff(&cx, batch_x) + mean_abs_diff(&cy, batch_y))
}

pub fn intensity_loss<F: Real>(
    g_x: &impl BatchMap<F>,
    g_y: &impl BatchMap<F>,
    batch_x: &Array4<F>,
    batch_y: &Array4<F>,
) -> Result<f64, LossError> {
    check_pair(batch_x, batch_y)?;
    Ok(mean_abs_diff(&g_y.map(batch_x)?, batch_x) + mean_abs_diff(&g_x.map(batch_y)?, batch_y))
}

pub fn identity_loss<F: Real>(
    g_x: &impl BatchMap<F>,
    g_y: &impl BatchMap<F>,
    batch_x: &Array4<F>,
    batch_y: &Array4<F>,
) -> Result<f64, LossError> {
    check_pair(batch_x, batch_y)?;
    Ok(mean_abs_diff(&g_y.map(batch_y)?, batch_y) + mean_abs_diff(&g_x.map(batch_x)?, batch_x))
}

/// Per-sample feature distance `sqrt(mean(u^2) + delta) - sqrt(delta)`,
/// averaged over the batch. Inputs are `(B, ...)`.
pub fn feature_distance<F: Real>(fa: &Array4<F>, fb: &Array4<F>) -> f64 {
    let delta = FEATURE_DELTA;
    let b = fa.dim().0;
    let mut total = 0.0;
    for (sa, sb) in fa.axis_iter(Axis(0)).zip(fb.axis_iter(Axis(0))) {
        let ms: f64 = Zip::from(&sa)
            .and(&sb)
            .fold(0.0, |acc, &u, &v| acc + (u - v).to_f64().unwrap().powi(2))
            / sa.len() as f64;
        total += (ms + delta).sqrt() - delta.sqrt();
    }
    total / b as f64
}

pub fn feature_loss<F: Real>(
    f: &impl FeatureMap<F>,
    g_x: &impl BatchMap<F>,
    g_y: &impl BatchMap<F>,
    batch_x: &Array4<F>,
    batch_y: &Array4<F>,
) -> Result<f64, LossError> {
    check_pair(batch_x, batch_y)?;
    let a = g_y.map(batch_x)?;
    let b = g_x.map(batch_y)?;
    let cx = g_x.map(&a)?;
    let cy = g_y.map(&b)?;
    let t1 = feature_distance(&f.features(&(batch_x - &a))?, &f.features(&(&b - batch_y))?);
    let t2 = feature_distance(&f.features(&(&b - &cy))?, &f.features(&(&cx - &a))?);
    Ok(t1 + t2)
}

/// Evaluates every component the variant uses and combines them.
#[allow(clippy::too_many_arguments)]
pub fn full_objective<F: Real>(
    variant: Variant,
    weights: &LossWeights,
    g_x: &impl BatchMap<F>,
    g_y: &impl BatchMap<F>,
    d_x: &impl Critic<F>,
    d_y: &impl Critic<F>,
    f: &impl FeatureMap<F>,
    batch_x: &Array4<F>,
    batch_y: &Array4<F>,
) -> Result<LossReport, LossError> {
    weights.validate()?;
    check_pair(batch_x, batch_y)?;
    let adv_xy = adversarial_loss(d_y, g_y, batch_x, batch_y)?;
    let adv_yx = adversarial_loss(d_x, g_x, batch_y, batch_x)?;
    let cyc = cycle_loss(g_x, g_y, batch_x, batch_y)?;
    let (mut int, mut fea, mut id) = (0.0, 0.0, 0.0);
    match variant {
        Variant::Cgan => {}
        Variant::CganId => id = identity_loss(g_x, g_y, batch_x, batch_y)?,
        Variant::Proposed => {
            int = intensity_loss(g_x, g_y, batch_x, batch_y)?;
            fea = feature_loss(f, g_x, g_y, batch_x, batch_y)?;
        }
    }
    Ok(LossReport::combine(variant, weights, adv_xy, adv_yx, cyc, int, fea, id))
}

/// Coefficients of the generator objective minimized by gradient descent.
/// The adversarial part is the non-saturating `-mean log D(G(s))` for both
/// directions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratorTerms {
    pub adv: f64,
    pub cyc: f64,
    pub int: f64,
    pub fea: f64,
    pub id: f64,
}

impl GeneratorTerms {
    pub fn for_variant(variant: Variant, w: &LossWeights) -> Self {
        let mut t = Self {
            adv: 1.0,
            cyc: w.lambda_cyc,
            ..Self::default()
        };
        match variant {
            Variant::Cgan => {}
            Variant::CganId => t.id = w.lambda_id,
            Variant::Proposed => {
                t.int = w.lambda_int;
                t.fea = w.lambda_fea;
            }
        }
        t
    }
}

/// Gradient pieces for one direction of the generator objective.
pub struct GeneratorGrads<F> {
    pub g_x: Generator<F>,
    pub g_y: Generator<F>,
}

/// Result of [`generator_grads`].
pub struct GeneratorEval<F> {
    /// Value of the objective the gradients belong to.
    pub objective: f64,
    pub components: LossComponents,
    pub grads: GeneratorGrads<F>,
}

/// Raw component values of one generator evaluation (log-likelihood adversarial
/// values, not the non-saturating surrogate).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub adv_xy: f64,
    pub adv_yx: f64,
    pub adv_nonsat: f64,
    pub cyc: f64,
    pub int: f64,
    pub fea: f64,
    pub id: f64,
}

impl LossComponents {
    pub fn report(&self, variant: Variant, weights: &LossWeights) -> LossReport {
        LossReport::combine(
            variant,
            weights,
            self.adv_xy,
            self.adv_yx,
            self.cyc,
            self.int,
            self.fea,
            self.id,
        )
    }
}

fn sign_grad<F: Real>(a: &Array4<F>, b: &Array4<F>, scale: f64) -> Array4<F> {
    let s = F::lit(scale);
    Zip::from(a).and(b).map_collect(|&u, &v| {
        let d = u - v;
        if d > F::zero() {
            s
        } else if d < F::zero() {
            -s
        } else {
            F::zero()
        }
    })
}

/// Log-probability terms from logits with clamping, plus derivatives
/// w.r.t. the logits. `complement` selects `log(1 - D)`.
fn log_prob_terms<F: Real>(logits: &Array1<F>, complement: bool) -> (f64, Array1<F>) {
    let eps = PROB_EPS;
    let n = logits.len() as f64;
    let mut value = 0.0;
    let grads = logits.mapv(|z| {
        let p = sigmoid(z).to_f64().unwrap();
        let clamped = p < eps || p > 1.0 - eps;
        let pc = p.clamp(eps, 1.0 - eps);
        if complement {
            value += (1.0 - pc).ln();
            if clamped {
                F::zero()
            } else {
                F::lit(-p / n)
            }
        } else {
            value += pc.ln();
            if clamped {
                F::zero()
            } else {
                F::lit((1.0 - p) / n)
            }
        }
    });
    (value / n, grads)
}

/// Gradient of the per-sample feature distance w.r.t. `fa` (channel-major
/// features; the batch is axis 1).
fn feature_distance_cm<F: Real>(fa: &Array4<F>, fb: &Array4<F>, scale: f64) -> (f64, Array4<F>) {
    let (_, b, _, _) = fa.dim();
    let delta = FEATURE_DELTA;
    let mut grad = Array4::zeros(fa.dim());
    let mut total = 0.0;
    for bi in 0..b {
        let sa = fa.index_axis(Axis(1), bi);
        let sb = fb.index_axis(Axis(1), bi);
        let count = sa.len() as f64;
        let ms: f64 = Zip::from(&sa)
            .and(&sb)
            .fold(0.0, |acc, &u, &v| acc + (u - v).to_f64().unwrap().powi(2))
            / count;
        let root = (ms + delta).sqrt();
        total += root - delta.sqrt();
        let k = F::lit(scale / (b as f64 * count * root));
        let mut g = grad.index_axis_mut(Axis(1), bi);
        Zip::from(&mut g)
            .and(&sa)
            .and(&sb)
            .for_each(|g, &u, &v| *g = (u - v) * k);
    }
    (total / b as f64, grad)
}

fn to_cm<F: Real>(x: &Array4<F>, n: usize) -> Result<Array4<F>, LossError> {
    if x.dim().1 != n {
        return Err(NetError::ChannelMismatch {
            expected: n,
            actual: x.dim().1,
        }
        .into());
    }
    Ok(swap_batch_channels(x))
}

/// Generator objective `terms` on a batch, with gradients for both
/// generators. Discriminators and encoder are held fixed.
pub fn generator_grads<F: Real>(
    nets: &Networks<F>,
    batch_x: &Array4<F>,
    batch_y: &Array4<F>,
    terms: &GeneratorTerms,
) -> Result<GeneratorEval<F>, LossError> {
    check_pair(batch_x, batch_y)?;
    nets.g_y.check_input(batch_x)?;
    let n = nets.g_y.n_channels();
    let x = to_cm(batch_x, n)?;
    let y = to_cm(batch_y, n)?;
    let count = x.len() as f64;
    let (g_x, g_y) = (&nets.g_x, &nets.g_y);

    let (a, ca) = g_y.forward_cm(&x);
    let (b, cb) = g_x.forward_cm(&y);
    let (cx, ccx) = g_x.forward_cm(&a);
    let (cy, ccy) = g_y.forward_cm(&b);

    let mut comp = LossComponents::default();
    let mut da = Array4::zeros(a.dim());
    let mut db = Array4::zeros(b.dim());
    let mut gx_grad = g_x.zeros_like();
    let mut gy_grad = g_y.zeros_like();
    let mut objective = 0.0;

    // Adversarial: log-likelihood values for the report, non-saturating for descent.
    let (ly_fake, cdy) = nets.d_y.forward_cm(&a);
    let (lx_fake, cdx) = nets.d_x.forward_cm(&b);
    let ly_real = nets.d_y.forward_cm(&y).0;
    let lx_real = nets.d_x.forward_cm(&x).0;
    comp.adv_xy = log_prob_terms(&ly_real, false).0 + log_prob_terms(&ly_fake, true).0;
    comp.adv_yx = log_prob_terms(&lx_real, false).0 + log_prob_terms(&lx_fake, true).0;
    let (log_dy, dly) = log_prob_terms(&ly_fake, false);
    let (log_dx, dlx) = log_prob_terms(&lx_fake, false);
    comp.adv_nonsat = -log_dy - log_dx;
    if terms.adv != 0.0 {
        objective += terms.adv * comp.adv_nonsat;
        let s = F::lit(-terms.adv);
        da += &nets.d_y.backward_cm(&cdy, &dly.mapv(|v| v * s), None);
        db += &nets.d_x.backward_cm(&cdx, &dlx.mapv(|v| v * s), None);
    }

    comp.cyc = mean_abs_diff(&cx, &x) + mean_abs_diff(&cy, &y);
    let mut dcx = Array4::zeros(cx.dim());
    let mut dcy = Array4::zeros(cy.dim());
    if terms.cyc != 0.0 {
        objective += terms.cyc * comp.cyc;
        dcx += &sign_grad(&cx, &x, terms.cyc / count);
        dcy += &sign_grad(&cy, &y, terms.cyc / count);
    }

    if terms.int != 0.0 {
        comp.int = mean_abs_diff(&a, &x) + mean_abs_diff(&b, &y);
        objective += terms.int * comp.int;
        da += &sign_grad(&a, &x, terms.int / count);
        db += &sign_grad(&b, &y, terms.int / count);
    }

    if terms.fea != 0.0 {
        let enc = &nets.encoder;
        let r1 = &x - &a;
        let r2 = &b - &y;
        let r3 = &b - &cy;
        let r4 = &cx - &a;
        let (f1, c1) = enc.forward_cm(&r1);
        let (f2, c2) = enc.forward_cm(&r2);
        let (f3, c3) = enc.forward_cm(&r3);
        let (f4, c4) = enc.forward_cm(&r4);
        let (t1, g1) = feature_distance_cm(&f1, &f2, terms.fea);
        let (t2, g3) = feature_distance_cm(&f3, &f4, terms.fea);
        comp.fea = t1 + t2;
        objective += terms.fea * comp.fea;
        let dr1 = enc.backward_cm(&c1, &g1);
        let dr2 = enc.backward_cm(&c2, &g1.mapv(|v| -v));
        let dr3 = enc.backward_cm(&c3, &g3);
        let dr4 = enc.backward_cm(&c4, &g3.mapv(|v| -v));
        da -= &dr1;
        da -= &dr4;
        db += &dr2;
        db += &dr3;
        dcy -= &dr3;
        dcx += &dr4;
    }

    if terms.id != 0.0 {
        let (iy, ciy) = g_y.forward_cm(&y);
        let (ix, cix) = g_x.forward_cm(&x);
        comp.id = mean_abs_diff(&iy, &y) + mean_abs_diff(&ix, &x);
        objective += terms.id * comp.id;
        g_y.backward_cm(&ciy, &sign_grad(&iy, &y, terms.id / count), Some(&mut gy_grad));
        g_x.backward_cm(&cix, &sign_grad(&ix, &x, terms.id / count), Some(&mut gx_grad));
    }

    backprop_chain(g_x, &ccx, &dcx, &mut gx_grad, &mut da);
    backprop_chain(g_y, &ccy, &dcy, &mut gy_grad, &mut db);
    g_y.backward_cm(&ca, &da, Some(&mut gy_grad));
    g_x.backward_cm(&cb, &db, Some(&mut gx_grad));

    Ok(GeneratorEval {
        objective,
        components: comp,
        grads: GeneratorGrads {
            g_x: gx_grad,
            g_y: gy_grad,
        },
    })
}

fn backprop_chain<F: Real>(
    g: &Generator<F>,
    cache: &GeneratorCache<F>,
    dout: &Array4<F>,
    grad: &mut Generator<F>,
    dinput: &mut Array4<F>,
) {
    *dinput += &g.backward_cm(cache, dout, Some(grad));
}

pub struct DiscriminatorEval<F> {
    /// `-(adv_xy + adv_yx)`, the quantity the discriminators minimize.
    pub objective: f64,
    pub adv_xy: f64,
    pub adv_yx: f64,
    pub d_x: Discriminator<F>,
    pub d_y: Discriminator<F>,
}

/// Discriminator objective with gradients; translated batches are
/// computed with the current generators and treated as constants.
pub fn discriminator_grads<F: Real>(
    nets: &Networks<F>,
    batch_x: &Array4<F>,
    batch_y: &Array4<F>,
) -> Result<DiscriminatorEval<F>, LossError> {
    check_pair(batch_x, batch_y)?;
    nets.g_y.check_input(batch_x)?;
    let n = nets.g_y.n_channels();
    let x = to_cm(batch_x, n)?;
    let y = to_cm(batch_y, n)?;
    let fake_y = nets.g_y.forward_cm(&x).0;
    let fake_x = nets.g_x.forward_cm(&y).0;

    let side = |d: &Discriminator<F>, real: &Array4<F>, fake: &Array4<F>| {
        let mut grad = d.zeros_like();
        let (lr, cr) = d.forward_cm(real);
        let (lf, cf) = d.forward_cm(fake);
        let (vr, gr) = log_prob_terms(&lr, false);
        let (vf, gf) = log_prob_terms(&lf, true);
        d.backward_cm(&cr, &gr.mapv(|v| -v), Some(&mut grad));
        d.backward_cm(&cf, &gf.mapv(|v| -v), Some(&mut grad));
        (vr + vf, grad)
    };
    let (adv_xy, d_y) = side(&nets.d_y, &y, &fake_y);
    let (adv_yx, d_x) = side(&nets.d_x, &x, &fake_x);
    Ok(DiscriminatorEval {
        objective: -(adv_xy + adv_yx),
        adv_xy,
        adv_yx,
        d_x,
        d_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn batch(seed: usize) -> Array4<f64> {
        Array4::from_shape_fn((2, 1, 4, 4), |(b, _, y, x)| {
            (((b * 13 + y * 5 + x * 3 + seed) % 11) as f64 / 11.0 - 0.5) * 0.8
        })
    }

    fn identity(x: &Array4<f64>) -> Array4<f64> {
        x.clone()
    }

    #[test]
    fn adversarial_examples() {
        let half = FnCritic(|x: &Array4<f64>| Array1::from_elem(x.dim().0, 0.5));
        let v = adversarial_loss(&half, &identity, &batch(0), &batch(1)).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);

        let eps = PROB_EPS;
        let perfect = adversarial_from_probs(&array![1.0 - eps], &array![eps]).unwrap();
        assert!(perfect.abs() < 1e-6 && perfect <= 2.0 * (1.0 - eps).ln() + 1e-15);

        let v = adversarial_from_probs(&array![0.8, 0.6], &array![0.3, 0.1]).unwrap();
        let expected = (0.8f64.ln() + 0.6f64.ln()) / 2.0 + (0.7f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - (-0.5980)).abs() < 1e-4);

        let clamped = adversarial_from_probs(&array![0.0], &array![1.0]).unwrap();
        assert!((clamped - 2.0 * PROB_EPS.ln()).abs() < 1e-6);
        assert_eq!(
            adversarial_from_probs::<f64>(&array![], &array![0.5]),
            Err(LossError::EmptyBatch)
        );
    }

    #[test]
    fn cycle_examples() {
        let (x, y) = (batch(0), batch(3));
        assert_eq!(cycle_loss(&identity, &identity, &x, &y).unwrap(), 0.0);
        let plus = |v: &Array4<f64>| v + 0.25;
        let minus = |v: &Array4<f64>| v - 0.25;
        assert!(cycle_loss(&minus, &plus, &x, &y).unwrap() < 1e-12);

        let one = |v: f64| Array4::from_elem((1, 1, 1, 1), v);
        // G_X(G_Y(x)) = x + 0.3 for x = 1.0, G_Y(G_X(y)) = y - 0.1 for y = 0.2.
        let g_y = |v: &Array4<f64>| v + 0.3;
        let g_x = |v: &Array4<f64>| if v[[0, 0, 0, 0]] > 1.0 { v.clone() } else { v - 0.4 };
        let v = cycle_loss(&g_x, &g_y, &one(1.0), &one(0.2)).unwrap();
        assert!((v - 0.4).abs() < 1e-12, "{v}");
    }

    #[test]
    fn intensity_and_identity_examples() {
        let (x, y) = (batch(1), batch(2));
        assert_eq!(intensity_loss(&identity, &identity, &x, &y).unwrap(), 0.0);
        assert_eq!(identity_loss(&identity, &identity, &x, &y).unwrap(), 0.0);
        let shift = |v: &Array4<f64>| v + 0.2;
        assert!((intensity_loss(&identity, &shift, &x, &y).unwrap() - 0.2).abs() < 1e-12);

        // Sparse edit: 10% of voxels changed by 0.5.
        let big = Array4::from_shape_fn((1, 1, 10, 10), |(_, _, yy, xx)| (yy * 10 + xx) as f64 / 200.0);
        let sparse = |v: &Array4<f64>| {
            let mut o = v.clone();
            for xx in 0..10 {
                o[[0, 0, 0, xx]] += 0.5;
            }
            o
        };
        assert!((intensity_loss(&identity, &sparse, &big, &big).unwrap() - 0.05).abs() < 1e-12);

        let shift_y = |v: &Array4<f64>| v + 0.1;
        assert!((identity_loss(&identity, &shift_y, &x, &y).unwrap() - 0.1).abs() < 1e-12);

        // Edits X-domain inputs only (marked by a positive corner voxel).
        let x_only = |v: &Array4<f64>| if v[[0, 0, 0, 0]] > 0.0 { v + 0.3 } else { v.clone() };
        let xs = Array4::from_elem((1, 1, 2, 2), 0.4);
        let ys = Array4::from_elem((1, 1, 2, 2), -0.4);
        assert_eq!(identity_loss(&identity, &x_only, &xs, &ys).unwrap(), 0.0);
        assert!(intensity_loss(&identity, &x_only, &xs, &ys).unwrap() > 0.0);
    }

    #[test]
    fn feature_loss_fixed_points() {
        let enc = FeatureEncoder::<f64>::new(
            1,
            &crate::nets::EncoderConfig {
                widths: vec![2, 3],
                feature_block: 2,
                seed: 5,
            },
        );
        let (x, y) = (batch(4), batch(7));
        assert_eq!(feature_loss(&enc, &identity, &identity, &x, &y).unwrap(), 0.0);
        // G_Y subtracts c, G_X adds c: x - G_Y(x) = c = G_X(y) - y, and the
        // second-term residuals are both c as well.
        let g_y = |v: &Array4<f64>| v - 0.05;
        let g_x = |v: &Array4<f64>| v + 0.05;
        assert!(feature_loss(&enc, &g_x, &g_y, &x, &y).unwrap() < 1e-12);
    }

    #[test]
    fn feature_loss_hand_oracle() {
        // Single-channel bias-free 3x3 conv with a centre-only kernel, so
        // f(r) = lrelu(2 r) pointwise.
        let mut enc = FeatureEncoder::<f64>::new(
            1,
            &crate::nets::EncoderConfig {
                widths: vec![1],
                feature_block: 1,
                seed: 0,
            },
        );
        let mut k = Array4::zeros((1, 1, 3, 3));
        k[[0, 0, 1, 1]] = 2.0;
        enc.set_block_weight(0, k);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, -0.3]).unwrap();
        let y = Array4::from_shape_vec((1, 1, 1, 2), vec![0.1, 0.2]).unwrap();
        let g_y = |v: &Array4<f64>| v * 0.5;
        let g_x = |v: &Array4<f64>| v + 0.1;
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let f = |r: f64| lrelu(2.0 * r);
        let rho = |d: [f64; 2]| ((d[0] * d[0] + d[1] * d[1]) / 2.0 + FEATURE_DELTA).sqrt() - FEATURE_DELTA.sqrt();
        let mut t1 = [0.0; 2];
        let mut t2 = [0.0; 2];
        for i in 0..2 {
            let (xi, yi) = (x[[0, 0, 0, i]], y[[0, 0, 0, i]]);
            let a = 0.5 * xi;
            let b = yi + 0.1;
            let cx = a + 0.1;
            let cy = 0.5 * b;
            t1[i] = f(xi - a) - f(b - yi);
            t2[i] = f(b - cy) - f(cx - a);
        }
        let expected = rho(t1) + rho(t2);
        let got = feature_loss(&enc, &g_x, &g_y, &x, &y).unwrap();
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn full_objective_combination() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_cyc, w.lambda_int, w.lambda_fea), (10.0, 25.0, 1.0));
        let r = LossReport::combine(Variant::Proposed, &w, -1.0, -1.0, 0.1, 0.02, 0.05, 0.3);
        assert!((r.total - (-0.45)).abs() < 1e-12);
        assert_eq!(r.id, 0.0);
        let zero = LossWeights {
            lambda_int: 0.0,
            lambda_fea: 0.0,
            ..w.clone()
        };
        let p = LossReport::combine(Variant::Proposed, &zero, -1.0, -0.5, 0.1, 0.02, 0.05, 0.3);
        let c = LossReport::combine(Variant::Cgan, &zero, -1.0, -0.5, 0.1, 0.02, 0.05, 0.3);
        assert_eq!(p.total, c.total);
        let id = LossReport::combine(Variant::CganId, &w, -1.0, -0.5, 0.1, 0.02, 0.05, 0.3);
        assert!((id.total - (-1.5 + 1.0 + 1.5)).abs() < 1e-12);
        let doubled = LossReport::combine(
            Variant::Proposed,
            &LossWeights {
                lambda_int: 50.0,
                ..w.clone()
            },
            -1.0,
            -1.0,
            0.1,
            0.02,
            0.05,
            0.3,
        );
        assert!((doubled.total - r.total - 25.0 * 0.02).abs() < 1e-12);
        assert_eq!(Variant::parse("cgan+id").unwrap(), Variant::CganId);
        assert!(Variant::parse("ADN").is_err());
    }
}
