//! The closed set of coordinatewise nonlinearities a program may use.

use std::fmt;
use std::sync::Arc;

/// `clip(t, C) = max(−C, min(t, C))`.
#[inline]
pub fn clip(t: f64, c: f64) -> f64 {
    t.min(c).max(-c)
}

type MapFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A user-registered elementwise map.
///
/// `breakpoints` lists the points (in the argument of a unary map) where the
/// map is not smooth; Gaussian moment quadrature splits its panels there.
/// Maps are assumed pseudo-Lipschitz; this is not checked.
#[derive(Clone)]
pub struct CustomMap {
    name: String,
    arity: usize,
    map: Arc<MapFn>,
    breakpoints: Vec<f64>,
}

impl fmt::Debug for CustomMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomMap")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .field("breakpoints", &self.breakpoints)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum Nonlinearity {
    Identity,
    Clip { c: f64 },
    Custom(CustomMap),
}

impl Nonlinearity {
    pub fn clip(c: f64) -> Self {
        Nonlinearity::Clip { c }
    }

    /// Registers a unary map with its non-smooth points.
    pub fn scalar<F>(name: impl Into<String>, f: F, breakpoints: Vec<f64>) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let mut breakpoints = breakpoints;
        breakpoints.sort_by(f64::total_cmp);
        Nonlinearity::Custom(CustomMap {
            name: name.into(),
            arity: 1,
            map: Arc::new(move |args: &[f64]| f(args[0])),
            breakpoints,
        })
    }

    /// Registers a map of `arity` arguments.
    pub fn multi<F>(name: impl Into<String>, arity: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Nonlinearity::Custom(CustomMap {
            name: name.into(),
            arity,
            map: Arc::new(f),
            breakpoints: Vec::new(),
        })
    }

    pub fn arity(&self) -> usize {
        match self {
            Nonlinearity::Identity | Nonlinearity::Clip { .. } => 1,
            Nonlinearity::Custom(m) => m.arity,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Nonlinearity::Identity => "identity".to_string(),
            Nonlinearity::Clip { c } => format!("clip({c})"),
            Nonlinearity::Custom(m) => m.name.clone(),
        }
    }

    #[inline]
    pub fn apply(&self, args: &[f64]) -> f64 {
        match self {
            Nonlinearity::Identity => args[0],
            Nonlinearity::Clip { c } => clip(args[0], *c),
            Nonlinearity::Custom(m) => (m.map)(args),
        }
    }

    /// Evaluates a unary map.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Clip { c } => clip(x, *c),
            Nonlinearity::Custom(m) => (m.map)(std::slice::from_ref(&x)),
        }
    }

    /// Points where a unary map has a kink or jump, sorted ascending.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Nonlinearity::Identity => Vec::new(),
            Nonlinearity::Clip { c } if *c > 0.0 => vec![-c, *c],
            Nonlinearity::Clip { .. } => vec![0.0],
            Nonlinearity::Custom(m) => m.breakpoints.clone(),
        }
    }
}
