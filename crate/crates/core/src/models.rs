//! The `Z_{alpha,beta}` family with a sliding Shilnikov orbit through the
//! origin, plus closed-form oracles for its `X` flow.
//!
//! ```text
//! X = (-a, x - b, y - c)        (z > 0)
//! Y = ( a, 3a/b y + b, c)       (z < 0)      c = 3 b^2 / (8 a),  h = z
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PiecewiseSystem;
use crate::poly::{Monomial, Poly, PolyField, MAX_DEGREE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShilnikovParams {
    pub alpha: f64,
    pub beta: f64,
}

impl ShilnikovParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter { name: "alpha", value: alpha });
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter { name: "beta", value: beta });
        }
        Ok(ShilnikovParams { alpha, beta })
    }

    /// `c = 3 beta^2 / (8 alpha)`, the height of the fold line `y = c`.
    pub fn c(&self) -> f64 {
        3.0 * self.beta * self.beta / (8.0 * self.alpha)
    }

    /// Flight time from `q0` to `p0` along `X`.
    pub fn t0(&self) -> f64 {
        3.0 * self.beta / (2.0 * self.alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownPoints {
    pub p0: [f64; 3],
    pub q0: [f64; 3],
    pub c: f64,
    pub t0: f64,
}

pub fn build_model(params: ShilnikovParams) -> PiecewiseSystem {
    let ShilnikovParams { alpha: a, beta: b } = params;
    let c = params.c();
    let mono = |coeff, powers| Monomial { coeff, powers };
    let x = PolyField::new([
        Poly::constant(-a),
        Poly::new(vec![mono(1.0, [1, 0, 0]), mono(-b, [0, 0, 0])]),
        Poly::new(vec![mono(1.0, [0, 1, 0]), mono(-c, [0, 0, 0])]),
    ]);
    let y = PolyField::new([
        Poly::constant(a),
        Poly::new(vec![mono(3.0 * a / b, [0, 1, 0]), mono(b, [0, 0, 0])]),
        Poly::constant(c),
    ]);
    PiecewiseSystem::new(x, y, Poly::linear(2, 1.0))
}

/// Closed-form `X` flow from `p0 = (x0, y0, 0)` after time `t`.
pub fn oracle_x_flow(params: ShilnikovParams, p0: [f64; 3], t: f64) -> [f64; 3] {
    let ShilnikovParams { alpha: a, beta: b } = params;
    let c = params.c();
    let [x0, y0, z0] = p0;
    [x0 - a * t, y0 + (x0 - b) * t - 0.5 * a * t * t, z0 + (y0 - c) * t + 0.5 * (x0 - b) * t * t - a * t * t * t / 6.0]
}

pub fn oracle_known_points(params: ShilnikovParams) -> KnownPoints {
    KnownPoints { p0: [0.0, 0.0, 0.0], q0: [1.5 * params.beta, params.c(), 0.0], c: params.c(), t0: params.t0() }
}

/// System definition file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", deny_unknown_fields)]
pub enum SystemSpec {
    #[serde(rename = "builtin:shilnikov")]
    Shilnikov { alpha: f64, beta: f64 },
    #[serde(rename = "custom")]
    Custom {
        #[serde(rename = "X")]
        x: [Poly; 3],
        #[serde(rename = "Y")]
        y: [Poly; 3],
        h: Poly,
    },
}

impl SystemSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build(&self) -> Result<PiecewiseSystem> {
        match self {
            SystemSpec::Shilnikov { alpha, beta } => {
                Ok(build_model(ShilnikovParams::new(*alpha, *beta).map_err(|e| Error::Config(e.to_string()))?))
            }
            SystemSpec::Custom { x, y, h } => {
                let polys = x.iter().chain(y.iter()).chain(std::iter::once(h));
                for p in polys {
                    if p.degree() > MAX_DEGREE {
                        return Err(Error::Config(format!("polynomial degree {} exceeds {MAX_DEGREE}", p.degree())));
                    }
                    if p.terms.iter().any(|t| !t.coeff.is_finite()) {
                        return Err(Error::Config("non-finite coefficient".into()));
                    }
                }
                if h.terms.is_empty() {
                    return Err(Error::Config("h is identically zero".into()));
                }
                let simplify = |f: &[Poly; 3]| PolyField::new(f.clone().map(Poly::simplified));
                Ok(PiecewiseSystem::new(simplify(x), simplify(y), h.clone().simplified()))
            }
        }
    }

    /// Builtin parameters, when the spec names the builtin family.
    pub fn params(&self) -> Option<ShilnikovParams> {
        match self {
            SystemSpec::Shilnikov { alpha, beta } => ShilnikovParams::new(*alpha, *beta).ok(),
            SystemSpec::Custom { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{classify, Dynamics, RegionTag, Tolerances};
    use crate::real::Vec3;

    #[test]
    fn rejects_non_positive_parameters() {
        assert!(ShilnikovParams::new(0.0, 1.0).is_err());
        assert_eq!(ShilnikovParams::new(1.0, -2.0).unwrap_err().kind(), "non-positive-parameter");
    }

    #[test]
    fn fields_at_origin() {
        let sys = build_model(ShilnikovParams::new(1.0, 1.0).unwrap());
        let o = Vec3::<f64>::zero();
        assert_eq!(sys.x_field(&o).0, [-1.0, -1.0, -0.375]);
        assert_eq!(sys.y_field(&o).0, [1.0, 1.0, 0.375]);
        assert_eq!(ShilnikovParams::new(2.0, 3.0).unwrap().c(), 27.0 / 16.0);
    }

    #[test]
    fn oracle_flow_hits_origin_at_t0() {
        for (a, b) in [(1.0, 1.0), (2.0, 3.0)] {
            let prm = ShilnikovParams::new(a, b).unwrap();
            let k = oracle_known_points(prm);
            let end = oracle_x_flow(prm, k.q0, k.t0);
            for v in end {
                assert!(v.abs() < 1e-14, "{end:?}");
            }
            assert_eq!(oracle_x_flow(prm, k.q0, 0.0), k.q0);
        }
        let k = oracle_known_points(ShilnikovParams::new(2.0, 3.0).unwrap());
        assert_eq!(k.q0, [4.5, 1.6875, 0.0]);
        assert_eq!(oracle_known_points(ShilnikovParams::new(1.0, 1.0).unwrap()).t0, 1.5);
    }

    #[test]
    fn oracle_flow_satisfies_the_ode() {
        let prm = ShilnikovParams::new(0.5, 2.0).unwrap();
        let sys = build_model(prm);
        let p0 = [0.3, -0.2, 0.0];
        let e = 1e-5;
        for t in [0.1, 0.8, 2.0] {
            let a = oracle_x_flow(prm, p0, t + e);
            let b = oracle_x_flow(prm, p0, t - e);
            let here: Vec3<f64> = Vec3::from_f64(oracle_x_flow(prm, p0, t));
            let f = sys.x_field(&here);
            for i in 0..3 {
                assert!(((a[i] - b[i]) / (2.0 * e) - f[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn no_escaping_region_and_fold_line_split() {
        let prm = ShilnikovParams::new(1.0, 1.0).unwrap();
        let sys = build_model(prm);
        let tol = Tolerances::default();
        let c = prm.c();
        for i in 0..100 {
            for j in 0..100 {
                let x = -3.0 + 6.0 * i as f64 / 99.0;
                let y = -3.0 + 6.0 * j as f64 / 99.0;
                let cls = classify(&sys, &Vec3::new(x, y, 0.0), &tol).unwrap();
                assert_ne!(cls.tag, RegionTag::Escaping);
                if y > c + tol.tol {
                    assert_eq!(cls.tag, RegionTag::Crossing);
                } else if y < c - tol.tol {
                    assert_eq!(cls.tag, RegionTag::Sliding);
                }
            }
        }
    }
    #[test]
    fn loads_builtin_and_custom_specs() {
        let b = SystemSpec::from_json(r#"{"model":"builtin:shilnikov","alpha":2,"beta":3}"#).unwrap();
        assert_eq!(b.build().unwrap(), build_model(ShilnikovParams::new(2.0, 3.0).unwrap()));
        let c = SystemSpec::from_json(
            r#"{"model":"custom",
                "X":[[{"coeff":-1,"powers":[0,0,0]}],[{"coeff":1,"powers":[1,0,0]},{"coeff":-1,"powers":[0,0,0]}],[{"coeff":1,"powers":[0,1,0]},{"coeff":-0.375,"powers":[0,0,0]}]],
                "Y":[[{"coeff":1,"powers":[0,0,0]}],[{"coeff":3,"powers":[0,1,0]},{"coeff":1,"powers":[0,0,0]}],[{"coeff":0.375,"powers":[0,0,0]}]],
                "h":[{"coeff":1,"powers":[0,0,1]}]}"#,
        )
        .unwrap();
        assert_eq!(c.build().unwrap(), build_model(ShilnikovParams::new(1.0, 1.0).unwrap()));
        assert!(c.params().is_none());
    }

    #[test]
    fn rejects_bad_specs() {
        for text in [
            r#"{"model":"builtin:shilnikov","alpha":-1,"beta":1}"#,
            r#"{"model":"other"}"#,
            r#"{"model":"custom","X":[[],[],[]],"Y":[[],[],[]],"h":[{"coeff":1,"powers":[7,0,0]}]}"#,
            r#"{"model":"custom","X":[[],[],[]],"Y":[[],[],[]],"h":[]}"#,
            "not json",
        ] {
            let err = SystemSpec::from_json(text).and_then(|s| s.build()).unwrap_err();
            assert_eq!(err.kind(), "config", "{text}");
        }
    }
}
