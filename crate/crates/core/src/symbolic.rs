//! One-sided shift spaces over finite alphabets, the two-track shift on
//! halves × counts, its metric, cylinders and Bernoulli measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shilnikov::ItineraryWord;

/// Inclusive symbol range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Alphabet {
    pub lo: u32,
    pub hi: u32,
}

impl Alphabet {
    /// `{0, 1}`.
    pub fn halves() -> Self {
        Alphabet { lo: 0, hi: 1 }
    }

    /// `{1, ..., k}`.
    pub fn counts(k: u32) -> Self {
        Alphabet { lo: 1, hi: k.max(1) }
    }

    pub fn size(&self) -> u32 {
        self.hi - self.lo + 1
    }

    pub fn contains(&self, a: u32) -> bool {
        (self.lo..=self.hi).contains(&a)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Repr {
    /// The word repeated forever.
    Periodic(Vec<u32>),
    /// A known prefix; later entries are not yet determined.
    Finite(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolSequence {
    pub repr: Repr,
    pub alphabet: Alphabet,
}

fn check(word: &[u32], alphabet: Alphabet) -> Result<()> {
    match word.iter().find(|a| !alphabet.contains(**a)) {
        Some(a) => Err(Error::InvalidArgument(format!("symbol {a} outside {}..={}", alphabet.lo, alphabet.hi))),
        None => Ok(()),
    }
}

impl SymbolSequence {
    pub fn periodic(word: Vec<u32>, alphabet: Alphabet) -> Result<Self> {
        if word.is_empty() {
            return Err(Error::InvalidArgument("periodic word must be non-empty".into()));
        }
        check(&word, alphabet)?;
        Ok(SymbolSequence { repr: Repr::Periodic(word), alphabet })
    }

    pub fn finite(prefix: Vec<u32>, alphabet: Alphabet) -> Result<Self> {
        check(&prefix, alphabet)?;
        Ok(SymbolSequence { repr: Repr::Finite(prefix), alphabet })
    }

    pub fn constant(a: u32, alphabet: Alphabet) -> Result<Self> {
        Self::periodic(vec![a], alphabet)
    }

    pub fn get(&self, i: usize) -> Option<u32> {
        match &self.repr {
            Repr::Periodic(w) => Some(w[i % w.len()]),
            Repr::Finite(w) => w.get(i).copied(),
        }
    }

    /// Number of known entries; `None` for periodic sequences.
    pub fn depth(&self) -> Option<usize> {
        match &self.repr {
            Repr::Periodic(_) => None,
            Repr::Finite(w) => Some(w.len()),
        }
    }

    /// Append further entries to a finite prefix.
    pub fn extend(&mut self, more: &[u32]) -> Result<()> {
        check(more, self.alphabet)?;
        match &mut self.repr {
            Repr::Finite(w) => {
                w.extend_from_slice(more);
                Ok(())
            }
            Repr::Periodic(_) => Err(Error::InvalidArgument("cannot extend a periodic sequence".into())),
        }
    }

    pub fn prefix(&self, m: usize) -> Vec<u32> {
        (0..m).map_while(|i| self.get(i)).collect()
    }

    pub fn shift(&self) -> Self {
        let repr = match &self.repr {
            Repr::Periodic(w) => {
                let mut w = w.clone();
                w.rotate_left(1);
                Repr::Periodic(w)
            }
            Repr::Finite(w) => Repr::Finite(w.get(1..).unwrap_or_default().to_vec()),
        };
        SymbolSequence { repr, alphabet: self.alphabet }
    }

    pub fn shift_by(&self, n: usize) -> Self {
        match &self.repr {
            Repr::Periodic(w) => {
                let mut w = w.clone();
                let len = w.len();
                w.rotate_left(n % len);
                SymbolSequence { repr: Repr::Periodic(w), alphabet: self.alphabet }
            }
            Repr::Finite(w) => SymbolSequence {
                repr: Repr::Finite(w.get(n.min(w.len())..).unwrap_or_default().to_vec()),
                alphabet: self.alphabet,
            },
        }
    }

    /// First index where the two sequences differ, comparing only entries
    /// known on both sides. `Ok(None)`: no difference; `Err(l)`: the known
    /// parts agree up to length `l` but one of them ends there.
    fn first_difference(&self, other: &Self) -> std::result::Result<Option<usize>, usize> {
        let span = match (&self.repr, &other.repr) {
            // Two periodic sequences agreeing on p + q entries are equal.
            (Repr::Periodic(a), Repr::Periodic(b)) => a.len() + b.len(),
            (Repr::Finite(a), Repr::Finite(b)) => a.len().max(b.len()),
            (Repr::Finite(a), _) | (_, Repr::Finite(a)) => a.len(),
        };
        for i in 0..span {
            match (self.get(i), other.get(i)) {
                (Some(x), Some(y)) if x != y => return Ok(Some(i)),
                (Some(_), Some(_)) => {}
                _ => return Err(i),
            }
        }
        match (&self.repr, &other.repr) {
            (Repr::Periodic(_), Repr::Periodic(_)) => Ok(None),
            (Repr::Finite(a), Repr::Finite(b)) if a.len() == b.len() => Ok(None),
            _ => Err(span),
        }
    }

    /// Same sequence, whatever the representation.
    pub fn equivalent(&self, other: &Self) -> bool {
        matches!(self.first_difference(other), Ok(None))
    }
}

/// `d(a, b) = (1/2)^n` with `n` the largest index such that `a(i) = b(i)`
/// for `0 <= i <= n`; `1` when they already differ at index 0 and `0` when
/// equal. For finite prefixes agreeing on all `l` shared entries the result
/// is the bound `(1/2)^(l-1)`.
pub fn distance(a: &SymbolSequence, b: &SymbolSequence) -> f64 {
    let agree_through = |first_diff: usize| first_diff.saturating_sub(1) as i32;
    match a.first_difference(b) {
        Ok(None) => 0.0,
        Ok(Some(i)) => 0.5f64.powi(agree_through(i)),
        Err(l) => 0.5f64.powi(agree_through(l)),
    }
}

/// A point of the two-track space: halves over `{0,1}`, counts over `{1..k}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TwoTrack {
    pub x: SymbolSequence,
    pub n: SymbolSequence,
}

impl TwoTrack {
    pub fn shift(&self) -> Self {
        TwoTrack { x: self.x.shift(), n: self.n.shift() }
    }

    pub fn equivalent(&self, other: &Self) -> bool {
        self.x.equivalent(&other.x) && self.n.equivalent(&other.n)
    }

    /// Finite two-track prefix of an itinerary. Zero counts are not in any
    /// `{1..k}` and are rejected.
    pub fn from_itinerary(w: &ItineraryWord) -> Result<Self> {
        let k = w.counts.iter().copied().max().unwrap_or(1);
        Ok(TwoTrack {
            x: SymbolSequence::finite(w.halves.iter().map(|&h| h as u32).collect(), Alphabet::halves())?,
            n: SymbolSequence::finite(w.counts.clone(), Alphabet::counts(k))?,
        })
    }
}

/// Maximum of the two track distances.
pub fn distance2(a: &TwoTrack, b: &TwoTrack) -> f64 {
    distance(&a.x, &b.x).max(distance(&a.n, &b.n))
}

/// `C(start; x, n)`: sequences with `x` on the halves track and `n` on the
/// counts track from index `start` on. Either track may be left free.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cylinder {
    pub start: usize,
    pub x: Vec<u32>,
    pub n: Vec<u32>,
}

impl Cylinder {
    pub fn new(start: usize, x: Vec<u32>, n: Vec<u32>) -> Result<Self> {
        if x.is_empty() && n.is_empty() {
            return Err(Error::InvalidArgument("cylinder needs at least one fixed entry".into()));
        }
        Ok(Cylinder { start, x, n })
    }

    pub fn contains(&self, p: &TwoTrack) -> bool {
        let on = |s: &SymbolSequence, w: &[u32]| w.iter().enumerate().all(|(i, a)| s.get(self.start + i) == Some(*a));
        on(&p.x, &self.x) && on(&p.n, &self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernoulliMeasure {
    /// Probabilities of `0` and `1` on the halves track.
    pub px: Vec<f64>,
    /// Probabilities of `1..=k` on the counts track.
    pub pn: Vec<f64>,
}

impl BernoulliMeasure {
    pub fn new(px: Vec<f64>, pn: Vec<f64>) -> Result<Self> {
        if px.len() != 2 || pn.is_empty() {
            return Err(Error::InvalidArgument(
                "need 2 halves probabilities and at least one count probability".into(),
            ));
        }
        for p in [&px, &pn] {
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("not a probability vector: {p:?}")));
            }
        }
        Ok(BernoulliMeasure { px, pn })
    }

    pub fn uniform(k: usize) -> Self {
        BernoulliMeasure { px: vec![0.5; 2], pn: vec![1.0 / k.max(1) as f64; k.max(1)] }
    }

    pub fn k(&self) -> usize {
        self.pn.len()
    }
}

/// `mu(C) = prod p_{a_i}` over both tracks.
pub fn cylinder_measure(mu: &BernoulliMeasure, c: &Cylinder) -> Result<f64> {
    let mut m = 1.0;
    for &a in &c.x {
        m *= *mu.px.get(a as usize).ok_or_else(|| Error::InvalidArgument(format!("halves symbol {a}")))?;
    }
    for &a in &c.n {
        let p = (a as usize).checked_sub(1).and_then(|i| mu.pn.get(i));
        m *= *p.ok_or_else(|| Error::InvalidArgument(format!("count symbol {a} outside 1..={}", mu.k())))?;
    }
    Ok(m)
}

/// Points of period dividing `n` of the two-track shift with `k` count
/// symbols: `(2k)^n`. The flag is set when the value saturated.
pub fn count_periodic(k: u64, n: u32) -> (u128, bool) {
    match (2 * k as u128).checked_pow(n) {
        Some(v) => (v, false),
        None => (u128::MAX, true),
    }
}

/// Topological entropy of the two-track shift, `log(2k)`.
pub fn shift_entropy(k: u64) -> f64 {
    (2.0 * k as f64).ln()
}

/// All two-track points fixed by `shift^n`, found by testing every pair of
/// length-`n` words.
pub fn enumerate_periodic(k: u32, n: usize) -> Vec<TwoTrack> {
    let mut out = Vec::new();
    let total = (2u64 * k as u64).pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut x = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        for _ in 0..n {
            let sym = c % (2 * k as u64);
            c /= 2 * k as u64;
            x.push((sym % 2) as u32);
            m.push((sym / 2) as u32 + 1);
        }
        let p = TwoTrack {
            x: SymbolSequence::periodic(x, Alphabet::halves()).unwrap(),
            n: SymbolSequence::periodic(m, Alphabet::counts(k)).unwrap(),
        };
        let mut q = p.clone();
        for _ in 0..n {
            q = q.shift();
        }
        if q.equivalent(&p) {
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn halves(w: &[u32]) -> SymbolSequence {
        SymbolSequence::periodic(w.to_vec(), Alphabet::halves()).unwrap()
    }

    #[test]
    fn shift_rotates_periodic_words() {
        let p = TwoTrack { x: halves(&[0, 1]), n: SymbolSequence::periodic(vec![2, 1], Alphabet::counts(2)).unwrap() };
        let q = p.shift();
        assert_eq!(q.x.repr, Repr::Periodic(vec![1, 0]));
        assert_eq!(q.n.repr, Repr::Periodic(vec![1, 2]));
        assert_eq!(q.shift(), p);
        let c = halves(&[1]);
        assert_eq!(c.shift(), c);
        let f = SymbolSequence::finite(vec![0, 1, 1], Alphabet::halves()).unwrap();
        assert_eq!(f.shift().depth(), Some(2));
    }

    #[test]
    fn metric_values() {
        let a = halves(&[0, 1]);
        assert_eq!(distance(&a, &a), 0.0);
        assert_eq!(distance(&a, &halves(&[0, 1, 0, 1])), 0.0);
        assert_eq!(distance(&halves(&[0]), &halves(&[1])), 1.0);
        let b = SymbolSequence::finite(vec![0, 1, 1, 0, 1, 1], Alphabet::halves()).unwrap();
        let c = SymbolSequence::finite(vec![0, 1, 1, 0, 0, 1], Alphabet::halves()).unwrap();
        assert_eq!(distance(&b, &c), 0.125);
    }

    #[test]
    fn rejects_bad_symbols() {
        assert!(SymbolSequence::periodic(vec![], Alphabet::halves()).is_err());
        assert!(SymbolSequence::finite(vec![0, 2], Alphabet::halves()).is_err());
        assert!(SymbolSequence::finite(vec![0], Alphabet::counts(3)).is_err());
        assert!(BernoulliMeasure::new(vec![0.5, 0.6], vec![1.0]).is_err());
        assert!(Cylinder::new(0, vec![], vec![]).is_err());
    }

    #[test]
    fn measure_of_cylinders() {
        let mu = BernoulliMeasure::uniform(1);
        let c = Cylinder::new(0, vec![0, 1, 1], vec![]).unwrap();
        assert_eq!(cylinder_measure(&mu, &c).unwrap(), 0.125);
        let mu = BernoulliMeasure::new(vec![0.3, 0.7], vec![0.2, 0.8]).unwrap();
        assert_eq!(cylinder_measure(&mu, &Cylinder::new(4, vec![1], vec![]).unwrap()).unwrap(), 0.7);
        let c5 = Cylinder::new(5, vec![0, 1], vec![2, 1]).unwrap();
        let c0 = Cylinder { start: 0, ..c5.clone() };
        assert_eq!(cylinder_measure(&mu, &c5).unwrap(), cylinder_measure(&mu, &c0).unwrap());
        assert!(cylinder_measure(&mu, &Cylinder::new(0, vec![], vec![3]).unwrap()).is_err());
    }

    #[test]
    fn periodic_counts() {
        assert_eq!(count_periodic(1, 1), (2, false));
        assert_eq!(count_periodic(2, 1), (4, false));
        assert_eq!(count_periodic(2, 3), (64, false));
        assert!(count_periodic(1 << 40, 10).1);
        for k in 1..=2 {
            for n in 1..=3 {
                assert_eq!(enumerate_periodic(k, n).len() as u128, count_periodic(k as u64, n as u32).0);
            }
        }
        assert!(((count_periodic(3, 12).0 as f64).ln() / 12.0 - 6f64.ln()).abs() < 1e-12);
    }

    fn seq() -> impl Strategy<Value = SymbolSequence> {
        prop_oneof![
            prop::collection::vec(0u32..2, 1..5).prop_map(|w| halves(&w)),
            prop::collection::vec(0u32..2, 0..12).prop_map(|w| SymbolSequence::finite(w, Alphabet::halves()).unwrap()),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn ultrametric(a in seq(), b in seq(), c in seq()) {
            let (ab, bc, ac) = (distance(&a, &b), distance(&b, &c), distance(&a, &c));
            prop_assert!(ac <= ab.max(bc));
            prop_assert_eq!(distance(&a, &b), distance(&b, &a));
        }

        #[test]
        fn period_m_words_return_under_shift(w in prop::collection::vec(0u32..2, 1..7)) {
            let s = halves(&w);
            prop_assert_eq!(s.shift_by(w.len()), s.clone());
            let mut t = s.clone();
            for _ in 0..w.len() { t = t.shift(); }
            prop_assert_eq!(t, s);
        }

        #[test]
        fn measure_multiplicative(x in prop::collection::vec(0u32..2, 1..6), y in prop::collection::vec(0u32..2, 1..6),
                                  n in prop::collection::vec(1u32..4, 0..6), start in 0usize..9) {
            let mu = BernoulliMeasure::new(vec![0.25, 0.75], vec![0.5, 0.3, 0.2]).unwrap();
            let whole = Cylinder::new(start, [x.clone(), y.clone()].concat(), n.clone()).unwrap();
            let a = Cylinder::new(start, x.clone(), n.clone()).unwrap();
            let b = Cylinder::new(start + x.len(), y, vec![]).unwrap();
            let lhs = cylinder_measure(&mu, &whole).unwrap();
            let rhs = cylinder_measure(&mu, &a).unwrap() * cylinder_measure(&mu, &b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-15);
        }
    }
}
