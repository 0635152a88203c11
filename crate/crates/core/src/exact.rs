//! Exact floating-point summation.
//!
//! [`ExactSum`] holds a sum as a list of non-overlapping partials (Shewchuk
//! expansions), so adding and merging never round. The value is rounded once,
//! correctly, when read. This makes accumulator merges exactly associative and
//! commutative regardless of how a stream is sharded.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExactSum {
    partials: Vec<f64>,
}

const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1

#[inline]
fn split(a: f64) -> (f64, f64) {
    let c = SPLITTER * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

/// `a * b == hi + lo` exactly (Dekker), barring overflow.
#[inline]
pub(crate) fn two_product(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    let err = ((ah * bh - p) + ah * bl + al * bh) + al * bl;
    (p, err)
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        if x != 0.0 || self.partials.is_empty() {
            self.partials.push(x);
        }
    }

    /// Adds `x * x` without rounding the product.
    #[inline]
    pub fn add_square(&mut self, x: f64) {
        let (hi, lo) = two_product(x, x);
        self.add(hi);
        if lo != 0.0 {
            self.add(lo);
        }
    }

    pub fn add_sum(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    /// Exact `self * factor`.
    pub fn scaled(&self, factor: f64) -> ExactSum {
        let mut out = ExactSum::new();
        for &p in &self.partials {
            let (hi, lo) = two_product(p, factor);
            out.add(hi);
            out.add(lo);
        }
        out
    }

    /// Exact `self * self`.
    pub fn squared(&self) -> ExactSum {
        let mut out = ExactSum::new();
        for &a in &self.partials {
            for &b in &self.partials {
                let (hi, lo) = two_product(a, b);
                out.add(hi);
                out.add(lo);
            }
        }
        out
    }

    pub fn negated(&self) -> ExactSum {
        ExactSum {
            partials: self.partials.iter().map(|p| -p).collect(),
        }
    }

    /// The correctly rounded (half-even) value of the sum.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(&top) = p.last() else {
            return 0.0;
        };
        let mut hi = top;
        let mut lo = 0.0;
        let mut n = p.len() - 1;
        while n > 0 {
            n -= 1;
            let x = hi;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}
