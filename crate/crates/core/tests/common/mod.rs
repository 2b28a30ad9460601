//! Test-only reference arithmetic (double-double floats, exact rationals)
//! and a small fitted benchmark fixture.
#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

use hyperedit::bench::BenchConfig;
use hyperedit::config::RunConfig;
use hyperedit::gnn::GnnParams;
use hyperedit::kg::HyperbolicGraph;
use hyperedit::model::{FitConfig, ToyModel};
use hyperedit::pipeline::{build_graph, fit_model, new_gnn, BenchData};

/// Unevaluated sum `hi + lo`, roughly 106 bits of mantissa.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 { -self } else { self }
    }

    pub fn sqrt(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        // one Newton step from the f64 root doubles the precision
        let x = Dd::new(self.hi.sqrt());
        (x + self / x) * Dd::new(0.5)
    }

    pub fn exp(self) -> Dd {
        // halve until small, sum the series, square back
        let mut k = 0;
        let mut r = self;
        while r.hi.abs() > 1e-3 {
            r = r * Dd::new(0.5);
            k += 1;
        }
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..30 {
            term = term * r / Dd::new(n as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-40 {
                break;
            }
        }
        for _ in 0..k {
            sum = sum * sum;
        }
        sum
    }

    pub fn ln(self) -> Dd {
        // Newton on exp(y) = x
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..3 {
            y = y + self / y.exp() - Dd::ONE;
        }
        y
    }

    pub fn tanh(self) -> Dd {
        let e = (self + self).exp();
        (e - Dd::ONE) / (e + Dd::ONE)
    }

    pub fn atanh(self) -> Dd {
        ((Dd::ONE + self) / (Dd::ONE - self)).ln() * Dd::new(0.5)
    }

    pub fn acosh(self) -> Dd {
        (self + (self * self - Dd::ONE).sqrt()).ln()
    }

    pub fn sigmoid(self) -> Dd {
        Dd::ONE / (Dd::ONE + (-self).exp())
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

pub fn dd_vec(v: &[f64]) -> Vec<Dd> {
    v.iter().copied().map(Dd::new).collect()
}

pub fn dd_dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |acc, (x, y)| acc + *x * *y)
}

/// Möbius addition evaluated in double-double.
pub fn dd_mobius_add(w: &[f64], d: &[f64], c: f64) -> Vec<f64> {
    let (w, d, c) = (dd_vec(w), dd_vec(d), Dd::new(c));
    let wd = dd_dot(&w, &d);
    let w2 = dd_dot(&w, &w);
    let d2 = dd_dot(&d, &d);
    let two = Dd::new(2.0);
    let denom = Dd::ONE + two * c * wd + c * c * w2 * d2;
    let cw = (Dd::ONE + two * c * wd + c * d2) / denom;
    let cd = (Dd::ONE - c * w2) / denom;
    w.iter().zip(&d).map(|(a, b)| (cw * *a + cd * *b).to_f64()).collect()
}

/// Exponential map at the origin evaluated in double-double.
pub fn dd_exp_map(v: &[f64], c: f64) -> Vec<f64> {
    let v = dd_vec(v);
    let n = dd_dot(&v, &v).sqrt();
    if n.hi == 0.0 {
        return vec![0.0; v.len()];
    }
    let sc = Dd::new(c).sqrt() * n;
    let f = sc.tanh() / sc;
    v.iter().map(|x| (*x * f).to_f64()).collect()
}

/// Poincaré distance evaluated in double-double.
pub fn dd_distance(a: &[f64], b: &[f64], c: f64) -> f64 {
    let (a, b, cc) = (dd_vec(a), dd_vec(b), Dd::new(c));
    let diff: Vec<Dd> = a.iter().zip(&b).map(|(x, y)| *x - *y).collect();
    let num = Dd::new(2.0) * cc * dd_dot(&diff, &diff);
    let den = (Dd::ONE - cc * dd_dot(&a, &a)) * (Dd::ONE - cc * dd_dot(&b, &b));
    ((Dd::ONE + num / den).acosh() / cc.sqrt()).to_f64()
}

/// Exact rational with i128 parts, always reduced, positive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: i128,
    pub den: i128,
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl Ratio {
    pub fn new(num: i128, den: i128) -> Ratio {
        assert!(den != 0);
        let g = gcd(num, den) * den.signum();
        Ratio { num: num / g, den: den / g }
    }

    pub fn int(n: i128) -> Ratio {
        Ratio::new(n, 1)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Add for Ratio {
    type Output = Ratio;
    fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
}

impl Sub for Ratio {
    type Output = Ratio;
    fn sub(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den - o.num * self.den, self.den * o.den)
    }
}

impl Mul for Ratio {
    type Output = Ratio;
    fn mul(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.num, self.den * o.den)
    }
}

impl Div for Ratio {
    type Output = Ratio;
    fn div(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den, self.den * o.num)
    }
}

pub fn rat_dot(a: &[Ratio], b: &[Ratio]) -> Ratio {
    a.iter().zip(b).fold(Ratio::int(0), |acc, (x, y)| acc + *x * *y)
}

/// Möbius addition in exact rational arithmetic.
pub fn rat_mobius_add(w: &[Ratio], d: &[Ratio], c: Ratio) -> Vec<Ratio> {
    let one = Ratio::int(1);
    let two = Ratio::int(2);
    let wd = rat_dot(w, d);
    let w2 = rat_dot(w, w);
    let d2 = rat_dot(d, d);
    let denom = one + two * c * wd + c * c * w2 * d2;
    let cw = (one + two * c * wd + c * d2) / denom;
    let cd = (one - c * w2) / denom;
    w.iter().zip(d).map(|(a, b)| cw * *a + cd * *b).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A fitted model on a small benchmark, shared by the tests of one binary.
pub struct Fixture {
    pub cfg: RunConfig,
    pub data: BenchData,
    pub model: ToyModel,
    pub graph: HyperbolicGraph,
}

impl Fixture {
    pub fn gnn(&self) -> GnnParams {
        new_gnn(&self.cfg, &self.graph, &self.model).unwrap()
    }
}

pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.bench = BenchConfig {
        entities: 48,
        clusters: 4,
        relations: 4,
        facts_per_entity: 2,
        requests: 8,
        ..BenchConfig::default()
    };
    cfg.model.hidden = 16;
    cfg.model.key_dim = 48;
    cfg.model.embed_dim = 32;
    cfg.fit = FitConfig { steps: 1000, lr: 0.15, row_radius: 0.3 };
    cfg.graph.dim = 8;
    cfg.gnn.hidden_dim = 16;
    cfg
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        let data = BenchData::generate(&cfg).unwrap();
        let (model, _) = fit_model(&cfg, &data.triples).unwrap();
        let graph = build_graph(&cfg, &data.triples).unwrap();
        Fixture { cfg, data, model, graph }
    })
}
