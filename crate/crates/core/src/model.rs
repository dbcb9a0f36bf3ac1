//! Nonlinearities of `y_t + f(y)_x = y_xx + r(y)` and their derivatives.
//!
//! Derivatives are supplied explicitly alongside each map. The canonical
//! instances are the heat equation, viscous Burgers and a bounded reaction
//! `r(y) = c y^2 / (1 + y^2)`.

use std::fmt;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Flux `f`, reaction `r` and their first two derivatives.
///
/// Immutable once built; cloning only bumps reference counts.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub f: ScalarMap,
    pub df: ScalarMap,
    pub d2f: ScalarMap,
    pub r: ScalarMap,
    pub dr: ScalarMap,
    pub d2r: ScalarMap,
    pub globally_well_posed: bool,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("globally_well_posed", &self.globally_well_posed)
            .finish_non_exhaustive()
    }
}

/// The six maps of a user-defined model. All of them are required.
#[derive(Clone, Default)]
pub struct CustomMaps {
    pub name: Option<String>,
    pub f: Option<ScalarMap>,
    pub df: Option<ScalarMap>,
    pub d2f: Option<ScalarMap>,
    pub r: Option<ScalarMap>,
    pub dr: Option<ScalarMap>,
    pub d2r: Option<ScalarMap>,
    pub globally_well_posed: Option<bool>,
}

impl CustomMaps {
    pub fn flux(mut self, f: ScalarMap, df: ScalarMap, d2f: ScalarMap) -> Self {
        self.f = Some(f);
        self.df = Some(df);
        self.d2f = Some(d2f);
        self
    }

    pub fn reaction(mut self, r: ScalarMap, dr: ScalarMap, d2r: ScalarMap) -> Self {
        self.r = Some(r);
        self.dr = Some(dr);
        self.d2r = Some(d2r);
        self
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    /// Declares global well-posedness explicitly instead of running the growth screen.
    pub fn well_posed(mut self, flag: bool) -> Self {
        self.globally_well_posed = Some(flag);
        self
    }
}

pub enum ModelKind {
    Heat,
    Burgers,
    BoundedReaction { c: f64 },
    /// `f(y) = a y`, `r(y) = b y`: constant coefficients, vanishing second derivatives.
    Linear { advection: f64, reaction: f64 },
    Custom(CustomMaps),
}

/// Serializable description of the built-in kinds, as read from experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Heat,
    Burgers,
    BoundedReaction {
        #[serde(default = "default_reaction_scale")]
        c: f64,
    },
    Linear {
        #[serde(default)]
        advection: f64,
        #[serde(default)]
        reaction: f64,
    },
}

fn default_reaction_scale() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let kind = match *self {
            ModelConfig::Heat => ModelKind::Heat,
            ModelConfig::Burgers => ModelKind::Burgers,
            ModelConfig::BoundedReaction { c } => ModelKind::BoundedReaction { c },
            ModelConfig::Linear {
                advection,
                reaction,
            } => ModelKind::Linear {
                advection,
                reaction,
            },
        };
        make_model(kind)
    }
}

fn constant(c: f64) -> ScalarMap {
    Arc::new(move |_| c)
}

pub fn make_model(kind: ModelKind) -> Result<ModelSpec> {
    let spec = match kind {
        ModelKind::Heat => ModelSpec {
            name: "heat".into(),
            f: constant(0.0),
            df: constant(0.0),
            d2f: constant(0.0),
            r: constant(0.0),
            dr: constant(0.0),
            d2r: constant(0.0),
            globally_well_posed: true,
        },
        ModelKind::Burgers => ModelSpec {
            name: "burgers".into(),
            f: Arc::new(|y| 0.5 * y * y),
            df: Arc::new(|y| y),
            d2f: constant(1.0),
            r: constant(0.0),
            dr: constant(0.0),
            d2r: constant(0.0),
            globally_well_posed: true,
        },
        ModelKind::BoundedReaction { c } => {
            if !c.is_finite() {
                return Err(Error::InvalidModel(format!("reaction scale c = {c}")));
            }
            ModelSpec {
                name: format!("bounded_reaction(c={c})"),
                f: constant(0.0),
                df: constant(0.0),
                d2f: constant(0.0),
                r: Arc::new(move |y| {
                    let y2 = y * y;
                    c * y2 / (1.0 + y2)
                }),
                dr: Arc::new(move |y| {
                    let d = 1.0 + y * y;
                    2.0 * c * y / (d * d)
                }),
                d2r: Arc::new(move |y| {
                    let y2 = y * y;
                    let d = 1.0 + y2;
                    2.0 * c * (1.0 - 3.0 * y2) / (d * d * d)
                }),
                globally_well_posed: true,
            }
        }
        ModelKind::Linear {
            advection,
            reaction,
        } => {
            if !advection.is_finite() || !reaction.is_finite() {
                return Err(Error::InvalidModel("non-finite linear coefficients".into()));
            }
            ModelSpec {
                name: format!("linear(a={advection},b={reaction})"),
                f: Arc::new(move |y| advection * y),
                df: constant(advection),
                d2f: constant(0.0),
                r: Arc::new(move |y| reaction * y),
                dr: constant(reaction),
                d2r: constant(0.0),
                globally_well_posed: true,
            }
        }
        ModelKind::Custom(maps) => {
            let missing: Vec<&str> = [
                ("f", maps.f.is_none()),
                ("df", maps.df.is_none()),
                ("d2f", maps.d2f.is_none()),
                ("r", maps.r.is_none()),
                ("dr", maps.dr.is_none()),
                ("d2r", maps.d2r.is_none()),
            ]
            .iter()
            .filter(|(_, m)| *m)
            .map(|(n, _)| *n)
            .collect();
            if !missing.is_empty() {
                return Err(Error::InvalidModel(format!(
                    "custom model is missing maps: {}",
                    missing.join(", ")
                )));
            }
            let mut spec = ModelSpec {
                name: maps.name.unwrap_or_else(|| "custom".into()),
                f: maps.f.unwrap(),
                df: maps.df.unwrap(),
                d2f: maps.d2f.unwrap(),
                r: maps.r.unwrap(),
                dr: maps.dr.unwrap(),
                d2r: maps.d2r.unwrap(),
                globally_well_posed: false,
            };
            spec.globally_well_posed = match maps.globally_well_posed {
                Some(flag) => flag,
                None => check_global_existence(&spec, 1.0).well_posed,
            };
            spec
        }
    };
    Ok(spec)
}

impl ModelSpec {
    /// True when `f'' = r'' = 0` on the sample set, i.e. the forward map is affine.
    pub fn is_linear_on(&self, samples: &[f64]) -> bool {
        samples
            .iter()
            .all(|&y| (self.d2f)(y) == 0.0 && (self.d2r)(y) == 0.0)
    }

    /// Largest central-difference mismatch of (df, d2f, dr, d2r) over `samples` at step `h`.
    pub fn derivative_residuals(&self, samples: &[f64], h: f64) -> [f64; 4] {
        let cd = |g: &ScalarMap, y: f64| (g(y + h) - g(y - h)) / (2.0 * h);
        let mut out = [0.0f64; 4];
        for &y in samples {
            let res = [
                ((self.df)(y) - cd(&self.f, y)).abs(),
                ((self.d2f)(y) - cd(&self.df, y)).abs(),
                ((self.dr)(y) - cd(&self.r, y)).abs(),
                ((self.d2r)(y) - cd(&self.dr, y)).abs(),
            ];
            for (o, r) in out.iter_mut().zip(res) {
                *o = o.max(r);
            }
        }
        out
    }

    pub fn all_finite_on(&self, samples: &[f64]) -> bool {
        samples.iter().all(|&y| {
            [
                (self.f)(y),
                (self.df)(y),
                (self.d2f)(y),
                (self.r)(y),
                (self.dr)(y),
                (self.d2r)(y),
            ]
            .iter()
            .all(|v| v.is_finite())
        })
    }
}

/// Outcome of the growth-condition screen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthCheck {
    pub well_posed: bool,
    /// Set when the increments neither clearly shrink nor clearly persist.
    pub indeterminate: bool,
    /// Ratio of the last two doubling increments, per half-line (positive, negative).
    pub increment_ratios: (f64, f64),
    /// Cumulative integrals at the largest probed `Y`, per half-line.
    pub integrals: (f64, f64),
}

const GROWTH_DOUBLINGS: usize = 16;
const SIMPSON_PANELS: usize = 512;

fn simpson(g: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut s = g(a) + g(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * g(a + k as f64 * h);
    }
    s * h / 3.0
}

/// Heuristic screen for `int 1/(|r|+1) = infinity` on both half-lines.
///
/// Integrates over `[0, Y_k]` with `Y_k = y_max 2^k` and inspects how the
/// increments between consecutive doublings behave. Persisting increments
/// (ratio >= 0.9) read as divergence; halving ones (ratio <= 0.6) as a finite
/// integral; anything in between is reported as not well posed with
/// `indeterminate` set.
pub fn check_global_existence(m: &ModelSpec, y_max: f64) -> GrowthCheck {
    let y_max = if y_max > 0.0 && y_max.is_finite() {
        y_max
    } else {
        1.0
    };
    let half_line = |sign: f64| -> (f64, f64) {
        let g = |y: f64| 1.0 / ((m.r)(sign * y).abs() + 1.0);
        let mut increments = Vec::with_capacity(GROWTH_DOUBLINGS + 1);
        let mut lo = 0.0;
        let mut hi = y_max;
        for _ in 0..=GROWTH_DOUBLINGS {
            increments.push(simpson(g, lo, hi, SIMPSON_PANELS));
            lo = hi;
            hi *= 2.0;
        }
        let total: f64 = increments.iter().sum();
        let n = increments.len();
        let ratio = increments[n - 1] / increments[n - 2].max(f64::MIN_POSITIVE);
        (ratio, total)
    };
    let (rp, ip) = half_line(1.0);
    let (rn, in_) = half_line(-1.0);
    let classify = |ratio: f64| -> Option<bool> {
        if !ratio.is_finite() {
            None
        } else if ratio >= 0.9 {
            Some(true)
        } else if ratio <= 0.6 {
            Some(false)
        } else {
            None
        }
    };
    let (well_posed, indeterminate) = match (classify(rp), classify(rn)) {
        (Some(a), Some(b)) => (a && b, false),
        (Some(false), None) | (None, Some(false)) => (false, false),
        _ => (false, true),
    };
    if indeterminate {
        warn!(
            "growth screen for model '{}' is indeterminate (ratios {:.3}, {:.3})",
            m.name, rp, rn
        );
    }
    GrowthCheck {
        well_posed,
        indeterminate,
        increment_ratios: (rp, rn),
        integrals: (ip, in_),
    }
}

impl ModelSpec {
    /// Runs the growth screen and stores its verdict in `globally_well_posed`.
    pub fn with_growth_check(mut self, y_max: f64) -> (Self, GrowthCheck) {
        let check = check_global_existence(&self, y_max);
        self.globally_well_posed = check.well_posed;
        (self, check)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_reaction() -> ModelSpec {
        make_model(ModelKind::Custom(
            CustomMaps::default()
                .named("r=y^2")
                .flux(constant(0.0), constant(0.0), constant(0.0))
                .reaction(Arc::new(|y| y * y), Arc::new(|y| 2.0 * y), constant(2.0))
                .well_posed(false),
        ))
        .unwrap()
    }

    #[test]
    fn burgers_derivatives() {
        let m = make_model(ModelKind::Burgers).unwrap();
        assert_eq!((m.df)(2.0), 2.0);
        assert_eq!((m.d2f)(2.0), 1.0);
        assert_eq!((m.r)(3.0), 0.0);
    }

    #[test]
    fn bounded_reaction_taylor_coefficients() {
        let m = make_model(ModelKind::BoundedReaction { c: 1.0 }).unwrap();
        assert_eq!((m.r)(0.0), 0.0);
        assert_eq!((m.dr)(0.0), 0.0);
        assert_eq!((m.d2r)(0.0), 2.0);
        assert!((m.r)(1e6) < 1.0);
    }

    #[test]
    fn heat_is_identically_zero() {
        let m = make_model(ModelKind::Heat).unwrap();
        for y in [-5.0, -0.3, 0.0, 1.0, 7.5] {
            assert_eq!((m.f)(y), 0.0);
            assert_eq!((m.r)(y), 0.0);
        }
    }

    #[test]
    fn custom_requires_all_maps() {
        let maps = CustomMaps::default().reaction(constant(0.0), constant(0.0), constant(0.0));
        let err = make_model(ModelKind::Custom(maps)).unwrap_err();
        assert!(err.to_string().contains("f, df, d2f"));
    }

    #[test]
    fn growth_screen_examples() {
        let heat = make_model(ModelKind::Heat).unwrap();
        assert!(check_global_existence(&heat, 1.0).well_posed);
        let br = make_model(ModelKind::BoundedReaction { c: 1.0 }).unwrap();
        assert!(check_global_existence(&br, 1.0).well_posed);
        let q = check_global_existence(&quadratic_reaction(), 1.0);
        assert!(!q.well_posed);
        assert!(!q.indeterminate);
        // int_0^inf dy/(y^2+1) = pi/2
        assert!((q.integrals.0 - std::f64::consts::FRAC_PI_2).abs() < 1e-3);
    }

    #[test]
    fn growth_check_sets_flag() {
        let (m, check) = quadratic_reaction().with_growth_check(2.0);
        assert!(!check.well_posed);
        assert!(!m.globally_well_posed);
    }

    #[test]
    fn linear_reaction_diverges_logarithmically() {
        let m = make_model(ModelKind::Linear {
            advection: 0.0,
            reaction: 1.0,
        })
        .unwrap();
        let check = check_global_existence(&m, 1.0);
        assert!(check.well_posed, "{check:?}");
    }
}
