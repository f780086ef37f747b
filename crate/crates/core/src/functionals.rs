//! Observables F on configuration space.
//!
//! Functionals are pure functions of the count vector; they may be evaluated
//! concurrently from any number of workers.

use crate::base_space::TestFunction;
use crate::error::{Error, Result};
use crate::poisson::{Configuration, CountBox};
use serde::Serialize;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    Linear,
    Cylindrical,
    Indicator,
    Clipped,
    Custom,
}

type Eval = Arc<dyn Fn(&[u32]) -> f64 + Send + Sync>;
/// A map R^m → R used by cylindrical functionals.
pub type Profile = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct Functional {
    label: String,
    kind: FunctionalKind,
    eval: Eval,
    sup_bound: Option<f64>,
    /// Gradient bound of the profile together with its test functions.
    cylinder: Option<(f64, Vec<TestFunction>)>,
    /// The test function of a linear functional.
    linear: Option<TestFunction>,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional")
            .field("label", &self.label)
            .field("kind", &self.kind)
            .field("sup_bound", &self.sup_bound)
            .finish()
    }
}

impl Functional {
    /// F(γ) = γ(f).
    pub fn linear(f: TestFunction) -> Self {
        let g = f.clone();
        Self {
            label: format!("linear{:?}", f.values()),
            kind: FunctionalKind::Linear,
            eval: Arc::new(move |k| g.pair(k)),
            sup_bound: None,
            cylinder: None,
            linear: Some(f),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            label: format!("constant({c})"),
            kind: FunctionalKind::Cylindrical,
            eval: Arc::new(move |_| c),
            sup_bound: Some(c.abs()),
            cylinder: None,
            linear: None,
        }
    }

    /// F(γ) = g(γ(h_1), …, γ(h_m)) with declared bounds on |g| and |∇g|.
    pub fn cylindrical(
        label: impl Into<String>,
        g: Profile,
        h_list: Vec<TestFunction>,
        sup_bound: Option<f64>,
        gradient_bound: Option<f64>,
    ) -> Result<Self> {
        let label = label.into();
        if h_list.is_empty() {
            return Err(Error::InvalidArgument(
                "cylindrical functional needs at least one test function".into(),
            ));
        }
        let atoms = h_list[0].len();
        if let Some(h) = h_list.iter().find(|h| h.len() != atoms) {
            return Err(Error::DimensionMismatch {
                expected: atoms,
                got: h.len(),
            });
        }
        let (Some(sup), Some(grad)) = (sup_bound, gradient_bound) else {
            return Err(Error::UnboundedFunctional(label));
        };
        if !(sup.is_finite() && sup >= 0.0 && grad.is_finite() && grad >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "declared bounds of `{label}` must be finite and nonnegative"
            )));
        }
        let hs = h_list.clone();
        let eval: Eval = Arc::new(move |k| {
            let u: Vec<f64> = hs.iter().map(|h| h.pair(k)).collect();
            g(&u)
        });
        Ok(Self {
            label,
            kind: FunctionalKind::Cylindrical,
            eval,
            sup_bound: Some(sup),
            cylinder: Some((grad, h_list)),
            linear: None,
        })
    }

    /// F(γ) = exp(−γ(h)) for h ≥ 0.
    pub fn exp_neg(h: TestFunction) -> Result<Self> {
        if !h.is_nonnegative() {
            return Err(Error::InvalidArgument(
                "exp(-γ(h)) is bounded by 1 only for h >= 0".into(),
            ));
        }
        let label = format!("exp_neg{:?}", h.values());
        Self::cylindrical(label, Arc::new(|u| (-u[0]).exp()), vec![h], Some(1.0), Some(1.0))
    }

    /// F(γ) = tanh(γ(h)).
    pub fn tanh(h: TestFunction) -> Result<Self> {
        let label = format!("tanh{:?}", h.values());
        Self::cylindrical(label, Arc::new(|u| u[0].tanh()), vec![h], Some(1.0), Some(1.0))
    }

    /// F(γ) = cos(γ(h)).
    pub fn cos(h: TestFunction) -> Result<Self> {
        let label = format!("cos{:?}", h.values());
        Self::cylindrical(label, Arc::new(|u| u[0].cos()), vec![h], Some(1.0), Some(1.0))
    }

    /// F(γ) = sin(γ(h_1)) cos(γ(h_2)).
    pub fn sin_cos(h1: TestFunction, h2: TestFunction) -> Result<Self> {
        let label = format!("sin_cos{:?}{:?}", h1.values(), h2.values());
        Self::cylindrical(
            label,
            Arc::new(|u| u[0].sin() * u[1].cos()),
            vec![h1, h2],
            Some(1.0),
            Some(std::f64::consts::SQRT_2),
        )
    }

    /// F(γ) = 1{γ(h) ≤ threshold}.
    pub fn indicator(h: TestFunction, threshold: f64) -> Self {
        let label = format!("indicator[γ{:?} <= {threshold}]", h.values());
        Self {
            label,
            kind: FunctionalKind::Indicator,
            eval: Arc::new(move |k| if h.pair(k) <= threshold { 1.0 } else { 0.0 }),
            sup_bound: Some(1.0),
            cylinder: None,
            linear: None,
        }
    }

    /// F(γ) = 1{γ(X) = 0}.
    pub fn indicator_empty() -> Self {
        Self {
            label: "indicator[γ(X) = 0]".into(),
            kind: FunctionalKind::Indicator,
            eval: Arc::new(|k| if k.iter().all(|c| *c == 0) { 1.0 } else { 0.0 }),
            sup_bound: Some(1.0),
            cylinder: None,
            linear: None,
        }
    }

    /// F(γ) = clamp(γ(f), lo, hi).
    pub fn clipped(f: TestFunction, lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "clip interval [{lo}, {hi}] is empty or not finite"
            )));
        }
        Ok(Self {
            label: format!("clipped{:?}[{lo}, {hi}]", f.values()),
            kind: FunctionalKind::Clipped,
            eval: Arc::new(move |k| f.pair(k).clamp(lo, hi)),
            sup_bound: Some(lo.abs().max(hi.abs())),
            cylinder: None,
            linear: None,
        })
    }

    pub fn custom(
        label: impl Into<String>,
        eval: impl Fn(&[u32]) -> f64 + Send + Sync + 'static,
        sup_bound: Option<f64>,
    ) -> Self {
        Self {
            label: label.into(),
            kind: FunctionalKind::Custom,
            eval: Arc::new(eval),
            sup_bound,
            cylinder: None,
            linear: None,
        }
    }

    /// a·F + b·G.
    pub fn combine(a: f64, f: &Functional, b: f64, g: &Functional) -> Self {
        let (fe, ge) = (f.eval.clone(), g.eval.clone());
        let sup = match (f.sup_bound, g.sup_bound) {
            (Some(x), Some(y)) => Some(a.abs() * x + b.abs() * y),
            _ => None,
        };
        Self::custom(
            format!("{a}*{} + {b}*{}", f.label, g.label),
            move |k| a * fe(k) + b * ge(k),
            sup,
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kind(&self) -> FunctionalKind {
        self.kind
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    pub fn linear_part(&self) -> Option<&TestFunction> {
        self.linear.as_ref()
    }

    /// Mean-value bound on |F(γ+e_i) − F(γ)| for cylindrical functionals.
    pub fn increment_bound(&self, atom: usize) -> Option<f64> {
        self.cylinder.as_ref().map(|(grad, hs)| {
            grad * hs.iter().map(|h| h.get(atom).powi(2)).sum::<f64>().sqrt()
        })
    }

    #[inline]
    pub fn eval_counts(&self, k: &[u32]) -> f64 {
        (self.eval)(k)
    }

    pub fn eval(&self, gamma: &Configuration) -> f64 {
        (self.eval)(&gamma.counts)
    }

    /// F(k + e_i), evaluated on a scratch copy.
    #[inline]
    pub fn eval_up(&self, k: &[u32], atom: usize, scratch: &mut Vec<u32>) -> f64 {
        scratch.clear();
        scratch.extend_from_slice(k);
        scratch[atom] += 1;
        (self.eval)(scratch)
    }

    /// F(k − e_i), absent on an empty coordinate.
    #[inline]
    pub fn eval_down(&self, k: &[u32], atom: usize, scratch: &mut Vec<u32>) -> Option<f64> {
        if k[atom] == 0 {
            return None;
        }
        scratch.clear();
        scratch.extend_from_slice(k);
        scratch[atom] -= 1;
        Some((self.eval)(scratch))
    }

    /// (F(γ + δ_{x_i}), F(γ − δ_{x_i})).
    pub fn shift_eval(&self, gamma: &Configuration, atom: usize) -> Result<(f64, Option<f64>)> {
        if atom >= gamma.counts.len() {
            return Err(Error::UnknownAtom {
                index: atom,
                len: gamma.counts.len(),
            });
        }
        let mut scratch = Vec::with_capacity(gamma.counts.len());
        let up = self.eval_up(&gamma.counts, atom, &mut scratch);
        let down = self.eval_down(&gamma.counts, atom, &mut scratch);
        Ok((up, down))
    }

    /// Exhaustive check of the declared sup bound on a box and its upper shell.
    pub fn verify_sup_bound(&self, count_box: &CountBox) -> Result<()> {
        let Some(sup) = self.sup_bound else {
            return Ok(());
        };
        let shell = CountBox::new(count_box.caps().iter().map(|c| c + 1).collect())?;
        let mut worst = 0.0f64;
        shell.for_each_in(0, shell.len(), |_, k| {
            worst = worst.max(self.eval_counts(k).abs());
        });
        if worst > sup * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "`{}` reaches {worst} but declares sup bound {sup}",
                self.label
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tf(v: &[f64]) -> TestFunction {
        TestFunction::new(v.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let c = Configuration::new(vec![2, 3]);
        assert_eq!(Functional::linear(tf(&[0.0, 0.0])).eval(&c), 0.0);
        assert_eq!(Functional::linear(tf(&[1.0, 1.0])).eval(&c), 5.0);
        assert_eq!(Functional::linear(tf(&[1.0, -1.0])).eval(&c), -1.0);
        assert!(Functional::linear(tf(&[1.0, 1.0])).sup_bound().is_none());
    }

    #[test]
    fn cylindrical_examples() {
        let ones = tf(&[1.0, 1.0]);
        let c = Functional::cylindrical("c", Arc::new(|_| 2.5), vec![ones.clone()], Some(2.5), Some(0.0))
            .unwrap();
        assert_eq!(c.eval(&Configuration::new(vec![4, 1])), 2.5);
        let e = Functional::exp_neg(ones.clone()).unwrap();
        assert_eq!(e.eval(&Configuration::empty(2)), 1.0);
        assert!((e.eval(&Configuration::new(vec![1, 2])) - (-3.0f64).exp()).abs() < 1e-15);
        let t = Functional::tanh(tf(&[1.0, -2.0])).unwrap();
        t.verify_sup_bound(&CountBox::new(vec![10, 10]).unwrap()).unwrap();
        assert!(matches!(
            Functional::cylindrical("u", Arc::new(|u| u[0]), vec![ones.clone()], None, Some(1.0)),
            Err(Error::UnboundedFunctional(_))
        ));
        assert!(Functional::exp_neg(tf(&[-1.0, 0.0])).is_err());
    }

    #[test]
    fn shift_examples() {
        let f = tf(&[0.5, -2.0]);
        let lin = Functional::linear(f.clone());
        let c = Configuration::new(vec![0, 3]);
        for atom in 0..2 {
            let (up, _) = lin.shift_eval(&c, atom).unwrap();
            assert_eq!(up - lin.eval(&c), f.get(atom));
        }
        assert_eq!(lin.shift_eval(&c, 0).unwrap().1, None);
        assert_eq!(lin.shift_eval(&c, 1).unwrap().1, Some(-4.0));
        let k = Functional::constant(3.0);
        assert_eq!(k.shift_eval(&c, 1).unwrap(), (3.0, Some(3.0)));
        let e = Functional::exp_neg(tf(&[1.0, 1.0])).unwrap();
        let (up, _) = e.shift_eval(&c, 0).unwrap();
        assert!((up - (-1.0f64).exp() * e.eval(&c)).abs() < 1e-16);
        assert!(e.shift_eval(&c, 2).is_err());
    }

    #[test]
    fn declared_bound_violation_is_caught() {
        let liar = Functional::custom("liar", |k| k[0] as f64, Some(3.0));
        assert!(liar.verify_sup_bound(&CountBox::new(vec![5]).unwrap()).is_err());
        assert!(Functional::indicator_empty()
            .verify_sup_bound(&CountBox::new(vec![5, 2]).unwrap())
            .is_ok());
        let clip = Functional::clipped(tf(&[1.0]), -1.0, 4.0).unwrap();
        assert_eq!(clip.sup_bound(), Some(4.0));
        assert_eq!(clip.eval_counts(&[9]), 4.0);
        assert!(Functional::clipped(tf(&[1.0]), 2.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn linear_increments_are_configuration_free(k in prop::collection::vec(0u32..20, 3), f in prop::collection::vec(-3.0f64..3.0, 3)) {
            let lin = Functional::linear(tf(&f));
            let c = Configuration::new(k);
            for atom in 0..3 {
                let (up, _) = lin.shift_eval(&c, atom).unwrap();
                prop_assert!((up - lin.eval(&c) - f[atom]).abs() <= 1e-12 * (1.0 + lin.eval(&c).abs()));
            }
        }

        #[test]
        fn cylindrical_increments_obey_mean_value_bound(
            k in prop::collection::vec(0u32..15, 2),
            h1 in prop::collection::vec(-1.0f64..1.0, 2),
            h2 in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let f = Functional::sin_cos(tf(&h1), tf(&h2)).unwrap();
            let c = Configuration::new(k);
            for atom in 0..2 {
                let (up, _) = f.shift_eval(&c, atom).unwrap();
                let bound = f.increment_bound(atom).unwrap();
                prop_assert!((up - f.eval(&c)).abs() <= bound + 1e-12);
            }
        }
    }
}
