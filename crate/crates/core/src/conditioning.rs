//! Condition embedding for (action, time shift, diffusion step) and
//! navigation-action composition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::world::{wrap_angle, NavAction};

/// `[sin(w_j v) for j] ++ [cos(w_j v) for j]` with `w_j = base^(-j / F)`.
pub fn sincos_features(value: f64, num_frequencies: usize, base: f64) -> Vec<f64> {
    let f = num_frequencies as f64;
    let mut out = vec![0.0; 2 * num_frequencies];
    for j in 0..num_frequencies {
        let w = base.powf(-(j as f64) / f);
        let (s, c) = (w * value).sin_cos();
        out[j] = s;
        out[num_frequencies + j] = c;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub dim: usize,
    pub num_frequencies: usize,
    pub base: f64,
    pub diffusion_steps: usize,
    pub use_action: bool,
    pub use_time: bool,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        ConditionConfig { dim: 64, num_frequencies: 8, base: 1e4, diffusion_steps: 100, use_action: true, use_time: true }
    }
}

/// Conditioning input for one row: the time shift is always known; the
/// navigation part is absent for unlabeled data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub nav: Option<([f64; 2], f64)>,
    pub k: f64,
}

impl Condition {
    pub fn from_action(a: &NavAction) -> Self {
        Condition { nav: Some((a.u, a.phi)), k: a.k }
    }

    pub fn time_only(k: f64) -> Self {
        Condition { nav: None, k }
    }
}

impl From<NavAction> for Condition {
    fn from(a: NavAction) -> Self {
        Condition::from_action(&a)
    }
}

/// The four summed terms of the condition vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Translation,
    Yaw,
    TimeShift,
    DiffusionStep,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Translation, Term::Yaw, Term::TimeShift, Term::DiffusionStep];

    fn prefix(self) -> &'static str {
        match self {
            Term::Translation => "cond.g_u",
            Term::Yaw => "cond.g_phi",
            Term::TimeShift => "cond.g_k",
            Term::DiffusionStep => "cond.g_t",
        }
    }
}

/// Condition embedder: each term is `Linear -> SiLU -> Linear` over
/// sin-cos features. The translation MLP sees both components at once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionEmbedder {
    pub config: ConditionConfig,
}

impl ConditionEmbedder {
    pub fn new(config: ConditionConfig) -> Self {
        ConditionEmbedder { config }
    }

    fn input_width(&self, term: Term) -> usize {
        let f = 2 * self.config.num_frequencies;
        if term == Term::Translation {
            2 * f
        } else {
            f
        }
    }

    pub fn init_params<E: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<E>, rng: &mut R) -> Result<()> {
        let d = self.config.dim;
        for term in Term::ALL {
            store.insert_linear(&format!("{}.0", term.prefix()), self.input_width(term), d, rng)?;
            store.insert_linear(&format!("{}.1", term.prefix()), d, d, rng)?;
        }
        Ok(())
    }

    /// Whether `term` contributes given the flags and whether an action is present.
    pub fn term_active(&self, term: Term, has_action: bool) -> bool {
        match term {
            Term::Translation | Term::Yaw => self.config.use_action && has_action,
            Term::TimeShift => self.config.use_time,
            Term::DiffusionStep => true,
        }
    }

    /// Sin-cos features for one row of `term`.
    pub fn features(&self, term: Term, cond: &Condition, t: usize) -> Vec<f64> {
        let (f, b) = (self.config.num_frequencies, self.config.base);
        let (u, phi) = cond.nav.unwrap_or(([0.0, 0.0], 0.0));
        match term {
            Term::Translation => {
                let mut v = sincos_features(u[0], f, b);
                v.extend(sincos_features(u[1], f, b));
                v
            }
            Term::Yaw => sincos_features(phi, f, b),
            Term::TimeShift => sincos_features(cond.k, f, b),
            Term::DiffusionStep => sincos_features(t as f64, f, b),
        }
    }

    fn check_inputs(&self, conds: &[Condition], ts: &[usize]) -> Result<()> {
        if conds.len() != ts.len() || ts.is_empty() {
            return Err(Error::invalid("conditions and timesteps must be non-empty and equally long"));
        }
        if let Some(&t) = ts.iter().find(|&&t| t >= self.config.diffusion_steps) {
            return Err(Error::invalid(format!("diffusion step {t} outside [0, {})", self.config.diffusion_steps)));
        }
        Ok(())
    }

    /// One term for a batch, `[B, d]`. Rows whose term is inactive are zero.
    pub fn term<'t, E: Real>(
        &self,
        params: &Bound<'t, E>,
        tape: &'t Tape<E>,
        term: Term,
        conds: &[Condition],
        ts: &[usize],
    ) -> Result<Var<'t, E>> {
        self.check_inputs(conds, ts)?;
        let b = ts.len();
        let width = self.input_width(term);
        let mut feats = Vec::with_capacity(b * width);
        let mut mask = Vec::with_capacity(b);
        for (c, &t) in conds.iter().zip(ts) {
            let active = self.term_active(term, c.nav.is_some());
            feats.extend(self.features(term, c, t));
            mask.push(if active { 1.0 } else { 0.0 });
        }
        let x = tape.constant(Tensor::from_f64(&[b, width], &feats)?)?;
        let p = term.prefix();
        let h = params.linear(&format!("{p}.0"), &x)?.silu()?;
        let y = params.linear(&format!("{p}.1"), &h)?;
        if mask.iter().all(|&m| m == 1.0) {
            return Ok(y);
        }
        let d = self.config.dim;
        let m: Vec<f64> = mask.iter().flat_map(|&m| std::iter::repeat_n(m, d)).collect();
        y.mul(&tape.constant(Tensor::from_f64(&[b, d], &m)?)?)
    }

    /// Condition vectors `[B, d]`: the sum of all active terms.
    pub fn embed<'t, E: Real>(
        &self,
        params: &Bound<'t, E>,
        tape: &'t Tape<E>,
        conds: &[Condition],
        ts: &[usize],
    ) -> Result<Var<'t, E>> {
        let mut acc: Option<Var<'t, E>> = None;
        for term in Term::ALL {
            if !conds.iter().any(|c| self.term_active(term, c.nav.is_some())) {
                continue;
            }
            let v = self.term(params, tape, term, conds, ts)?;
            acc = Some(match acc {
                None => v,
                Some(a) => a.add(&v)?,
            });
        }
        acc.ok_or_else(|| Error::invalid("no active condition terms"))
    }
}

/// Literal summation composition: translations and time shifts add, yaw
/// adds and wraps. Ignores rotation between steps.
pub fn compose_actions(actions: &[NavAction]) -> Result<NavAction> {
    if actions.is_empty() {
        return Err(Error::invalid("cannot compose an empty action sequence"));
    }
    let mut u = [0.0, 0.0];
    let (mut phi, mut k) = (0.0, 0.0);
    for a in actions {
        u[0] += a.u[0];
        u[1] += a.u[1];
        phi += a.phi;
        k += a.k;
    }
    Ok(NavAction::new(u, wrap_angle(phi), k))
}

/// Exact planar composition: each step's translation is rotated into the
/// starting frame before summing.
pub fn compose_se2(actions: &[NavAction]) -> Result<NavAction> {
    if actions.is_empty() {
        return Err(Error::invalid("cannot compose an empty action sequence"));
    }
    let (mut x, mut y, mut yaw, mut k) = (0.0, 0.0, 0.0f64, 0.0);
    for a in actions {
        let (s, c) = yaw.sin_cos();
        x += c * a.u[0] - s * a.u[1];
        y += s * a.u[0] + c * a.u[1];
        yaw = wrap_angle(yaw + a.phi);
        k += a.k;
    }
    Ok(NavAction::new([x, y], yaw, k))
}

/// Negates an action sequence's effect: used for backward time shifts,
/// where the summed actions of the skipped steps are negated.
pub fn negate(a: &NavAction) -> NavAction {
    NavAction::new([-a.u[0], -a.u[1]], -a.phi, -a.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    #[test]
    fn features_at_zero() {
        let v = sincos_features(0.0, 8, 1e4);
        assert_eq!(v.len(), 16);
        assert!(v[..8].iter().all(|&s| s == 0.0));
        assert!(v[8..].iter().all(|&c| c == 1.0));
    }

    #[test]
    fn features_periodic_in_first_frequency() {
        // w_0 = 1, so a shift of 2 pi leaves the first sin/cos pair unchanged.
        let (a, b) = (sincos_features(0.7, 8, 1e4), sincos_features(0.7 + 2.0 * PI, 8, 1e4));
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[8] - b[8]).abs() < 1e-12);
        assert!((a[1] - b[1]).abs() > 1e-3);
    }

    proptest! {
        #[test]
        fn features_bounded(v in -1e3f64..1e3) {
            prop_assert!(sincos_features(v, 8, 1e4).iter().all(|x| (-1.0..=1.0).contains(x)));
        }

        #[test]
        fn composition_is_additive(raw in prop::collection::vec((-2.0f64..2.0, -1.0f64..1.0, -3.0f64..3.0), 2..12), split in 1usize..11) {
            let acts: Vec<_> = raw.iter().map(|&(x, y, p)| NavAction::new([x, y], p, 0.25)).collect();
            let split = split.min(acts.len() - 1);
            let whole = compose_actions(&acts).unwrap();
            let parts = compose_actions(&[compose_actions(&acts[..split]).unwrap(), compose_actions(&acts[split..]).unwrap()]).unwrap();
            prop_assert!((whole.u[0] - parts.u[0]).abs() < 1e-12 && (whole.u[1] - parts.u[1]).abs() < 1e-12);
            prop_assert!(wrap_angle(whole.phi - parts.phi).abs() < 1e-12);
            prop_assert!((whole.k - parts.k).abs() < 1e-12);
        }
    }

    fn embedder(use_action: bool, use_time: bool) -> (ConditionEmbedder, ParamStore<f64>) {
        let cfg = ConditionConfig { dim: 6, use_action, use_time, ..Default::default() };
        let e = ConditionEmbedder::new(cfg);
        let mut p = ParamStore::new();
        e.init_params(&mut p, &mut rng::from_seed(3)).unwrap();
        (e, p)
    }

    fn eval(e: &ConditionEmbedder, p: &ParamStore<f64>, c: Condition, t: usize) -> Vec<f64> {
        let tape = Tape::new();
        let b = p.bind_frozen(&tape).unwrap();
        e.embed(&b, &tape, &[c], &[t]).unwrap().value().data().to_vec()
    }

    /// Plain-loop MLP oracle for one term.
    fn mlp_oracle(p: &ParamStore<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
        let layer = |name: &str, x: &[f64]| {
            let w = p.get(&format!("{prefix}.{name}.w")).unwrap();
            let b = p.get(&format!("{prefix}.{name}.b")).unwrap();
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            (0..n_out).map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>()).collect::<Vec<_>>()
        };
        let h: Vec<f64> = layer("0", x).iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        layer("1", &h)
    }

    #[test]
    fn embedding_is_sum_of_terms() {
        let (e, p) = embedder(true, true);
        let mut r = rng::from_seed(8);
        let a = NavAction::new([r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)], r.random_range(-3.0..3.0), 1.5);
        let t = 37;
        let c = Condition::from_action(&a);
        let xi = eval(&e, &p, c, t);
        let mut expect = vec![0.0; 6];
        for term in Term::ALL {
            for (s, v) in expect.iter_mut().zip(mlp_oracle(&p, term.prefix(), &e.features(term, &c, t))) {
                *s += v;
            }
        }
        for (x, y) in xi.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn removing_a_term_subtracts_exactly_that_term() {
        let (e, p) = embedder(true, true);
        let a = NavAction::new([0.4, -0.2], 0.3, 2.0);
        let c = Condition::from_action(&a);
        let full = eval(&e, &p, c, 5);
        let (e_nt, _) = embedder(true, false);
        let no_time = eval(&e_nt, &p, c, 5);
        let k_term = mlp_oracle(&p, Term::TimeShift.prefix(), &e.features(Term::TimeShift, &c, 5));
        for ((f, n), k) in full.iter().zip(&no_time).zip(&k_term) {
            assert!((f - n - k).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_bias_sum() {
        let (e, mut p) = embedder(true, true);
        let mut bias_sum = vec![0.0; 6];
        for term in Term::ALL {
            for layer in ["0", "1"] {
                p.get_mut(&format!("{}.{layer}.w", term.prefix())).unwrap().data_mut().fill(0.0);
            }
            let b = p.get_mut(&format!("{}.1.b", term.prefix())).unwrap();
            b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1 + 0.05);
            bias_sum.iter_mut().zip(b.data()).for_each(|(s, v)| *s += v);
        }
        for (a, t) in [(NavAction::new([0.3, 0.0], 1.0, 0.25), 0), (NavAction::new([-2.0, 1.0], -0.5, 4.0), 99)] {
            let xi = eval(&e, &p, a.into(), t);
            assert!(xi.iter().zip(&bias_sum).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn missing_action_matches_disabled_action() {
        let (e, p) = embedder(true, true);
        let (e_off, _) = embedder(false, true);
        let a = NavAction::new([0.9, 0.1], 0.2, 0.75);
        let flag_off = eval(&e_off, &p, a.into(), 12);
        assert_eq!(eval(&e, &p, Condition::time_only(0.75), 12), flag_off);
        assert_ne!(eval(&e, &p, a.into(), 12), flag_off);
    }

    #[test]
    fn action_only_preset_drops_time_shift() {
        let (e, p) = embedder(true, false);
        let a = NavAction::new([0.9, 0.1], 0.2, 0.75);
        let b = NavAction { k: 3.0, ..a };
        assert_eq!(eval(&e, &p, a.into(), 4), eval(&e, &p, b.into(), 4));
    }

    #[test]
    fn diffusion_step_out_of_range() {
        let (e, p) = embedder(true, true);
        let tape = Tape::new();
        let b = p.bind_frozen(&tape).unwrap();
        assert!(e.embed(&b, &tape, &[Condition::time_only(0.25)], &[100]).is_err());
    }

    #[test]
    fn single_action_composes_to_itself() {
        let a = NavAction::new([0.3, -0.1], 0.4, 0.25);
        assert_eq!(compose_actions(&[a]).unwrap(), a);
        assert!(compose_actions(&[]).is_err());
    }

    #[test]
    fn three_half_turns_wrap() {
        let a = NavAction::new([0.0, 0.0], PI, 0.25);
        let c = compose_actions(&[a, a, a]).unwrap();
        // 3 pi is pi modulo 2 pi; the half-open range represents it as -pi.
        assert_eq!(c.phi, -PI);
        assert!((c.phi + 2.0 * PI - PI).abs() < 1e-12);
    }

    #[test]
    fn summation_vs_exact_composition() {
        let mut r = rng::from_seed(21);
        let acts: Vec<_> = (0..20)
            .map(|_| NavAction::new([r.random_range(0.0..1.0), r.random_range(-0.2..0.2)], r.random_range(-0.2..0.2), 0.25))
            .collect();
        let lit = compose_actions(&acts).unwrap();
        let exact = compose_se2(&acts).unwrap();
        // Pose-integration oracle in plain loops.
        let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
        for a in &acts {
            x += yaw.cos() * a.u[0] - yaw.sin() * a.u[1];
            y += yaw.sin() * a.u[0] + yaw.cos() * a.u[1];
            yaw += a.phi;
        }
        assert!((exact.u[0] - x).abs() < 1e-9 && (exact.u[1] - y).abs() < 1e-9);
        assert!(wrap_angle(lit.phi - yaw).abs() < 1e-9);
        assert!(wrap_angle(exact.phi - lit.phi).abs() < 1e-9);
        let sum_x: f64 = acts.iter().map(|a| a.u[0]).sum();
        assert!((lit.u[0] - sum_x).abs() < 1e-12);
        // The summation ignores intermediate heading, so translations differ.
        let gap = (lit.u[0] - x).hypot(lit.u[1] - y);
        assert!(gap > 1e-3, "gap {gap}");
    }
}
