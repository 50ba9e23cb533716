//! Polynomials in three variables with exact differentiation.
//!
//! User systems are described term by term as `{"coeff": c, "powers": [i, j, k]}`
//! meaning `c * x^i * y^j * z^k`.

use serde::{Deserialize, Serialize};

use crate::real::{Mat3, Real, Vec3};

pub const MAX_DEGREE: u32 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: [u32; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly {
    pub terms: Vec<Monomial>,
}

#[inline]
fn powi<R: Real>(x: R, n: u32) -> R {
    let mut acc = R::one();
    for _ in 0..n {
        acc = acc * x;
    }
    acc
}

impl Poly {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Poly { terms }.simplified()
    }

    pub fn constant(c: f64) -> Self {
        Poly::new(vec![Monomial { coeff: c, powers: [0, 0, 0] }])
    }

    /// `c * var`, var in {0,1,2}.
    pub fn linear(var: usize, c: f64) -> Self {
        let mut powers = [0; 3];
        powers[var] = 1;
        Poly::new(vec![Monomial { coeff: c, powers }])
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.powers.iter().sum()).max().unwrap_or(0)
    }

    /// Merge equal monomials and drop zero coefficients; terms sorted by powers.
    pub fn simplified(mut self) -> Self {
        self.terms.sort_by(|a, b| a.powers.cmp(&b.powers));
        let mut out: Vec<Monomial> = Vec::with_capacity(self.terms.len());
        for t in self.terms {
            match out.last_mut() {
                Some(last) if last.powers == t.powers => last.coeff += t.coeff,
                _ => out.push(t),
            }
        }
        out.retain(|t| t.coeff != 0.0);
        Poly { terms: out }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Poly::new(terms)
    }

    pub fn eval<R: Real>(&self, p: &Vec3<R>) -> R {
        let mut acc = R::zero();
        for t in &self.terms {
            let [i, j, k] = t.powers;
            acc = acc + R::lit(t.coeff) * powi(p[0], i) * powi(p[1], j) * powi(p[2], k);
        }
        acc
    }

    pub fn derivative(&self, var: usize) -> Poly {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.powers[var] > 0)
            .map(|t| {
                let mut powers = t.powers;
                let n = powers[var];
                powers[var] -= 1;
                Monomial { coeff: t.coeff * n as f64, powers }
            })
            .collect();
        Poly::new(terms)
    }

    pub fn gradient(&self) -> [Poly; 3] {
        [self.derivative(0), self.derivative(1), self.derivative(2)]
    }
}

/// Vector field with polynomial components and precomputed Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyField {
    pub components: [Poly; 3],
    jacobian: [[Poly; 3]; 3],
}

impl PolyField {
    pub fn new(components: [Poly; 3]) -> Self {
        let jacobian = [components[0].gradient(), components[1].gradient(), components[2].gradient()];
        PolyField { components, jacobian }
    }

    pub fn degree(&self) -> u32 {
        self.components.iter().map(Poly::degree).max().unwrap_or(0)
    }

    pub fn eval<R: Real>(&self, p: &Vec3<R>) -> Vec3<R> {
        Vec3([self.components[0].eval(p), self.components[1].eval(p), self.components[2].eval(p)])
    }

    pub fn jacobian<R: Real>(&self, p: &Vec3<R>) -> Mat3<R> {
        let mut m = Mat3::zero();
        for (i, row) in self.jacobian.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                m.0[i][j] = d.eval(p);
            }
        }
        m
    }

    /// Add a constant vector to the field.
    pub fn shifted(&self, by: [f64; 3]) -> PolyField {
        let comps = [
            self.components[0].add(&Poly::constant(by[0])),
            self.components[1].add(&Poly::constant(by[1])),
            self.components[2].add(&Poly::constant(by[2])),
        ];
        PolyField::new(comps)
    }
}
