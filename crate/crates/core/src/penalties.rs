//! Scalar penalty zoo.
//!
//! Every family here is a piecewise linear-quadratic function of a scalar
//! residual, with a closed-form value and derivative plus an explicit
//! conjugate representation (`to_plq`) over a residual block of any length.
//!
//! [`Loss`] adds Moreau envelopes of the zoo members, and [`Misfit`] assigns
//! losses to row ranges of a residual vector.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plq::{ClosedForm, PlqRep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    L2,
    L1,
    Huber,
    Quantile,
    QuantileHuber,
    Vapnik,
    SmoothInsensitive,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::L2,
        Family::L1,
        Family::Huber,
        Family::Quantile,
        Family::QuantileHuber,
        Family::Vapnik,
        Family::SmoothInsensitive,
    ];
}

/// A named scalar penalty with its parameters.
///
/// `kappa` is the Huber threshold (and the quantile-Huber smoothing scale),
/// `tau` the quantile level, `eps` the insensitivity half-width and `gamma`
/// the curvature scale of the smooth insensitive loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PenaltySpec {
    L2,
    L1,
    Huber { kappa: f64 },
    Quantile { tau: f64 },
    QuantileHuber { tau: f64, kappa: f64 },
    Vapnik { eps: f64 },
    SmoothInsensitive { eps: f64, gamma: f64 },
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa.is_finite() && kappa > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("kappa must be > 0, got {kappa}")))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("tau must lie in (0,1), got {tau}")))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_finite() && eps >= 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("eps must be >= 0, got {eps}")))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("gamma must be > 0, got {gamma}")))
    }
}

/// One term `sup_{u in [lo,hi]} u*(shift + sign*r) - curvature/2 * u^2` of a
/// scalar conjugate representation. Every zoo family is a sum of one or two.
#[derive(Debug, Clone, Copy)]
struct Side {
    curvature: f64,
    lo: f64,
    hi: f64,
    shift: f64,
    sign: f64,
}

impl Side {
    /// Value and maximizer with the curvature raised by `extra`.
    fn conj(&self, r: f64, extra: f64) -> (f64, f64) {
        let z = self.shift + self.sign * r;
        let m = self.curvature + extra;
        let u = if m > 0.0 {
            (z / m).clamp(self.lo, self.hi)
        } else if z > 0.0 {
            self.hi
        } else if z < 0.0 {
            self.lo
        } else {
            0.0f64.clamp(self.lo, self.hi)
        };
        if u == 0.0 {
            return (0.0, 0.0);
        }
        (u * z - 0.5 * m * u * u, u)
    }
}

impl PenaltySpec {
    pub fn huber(kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        Ok(PenaltySpec::Huber { kappa })
    }

    pub fn quantile(tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(PenaltySpec::Quantile { tau })
    }

    pub fn quantile_huber(tau: f64, kappa: f64) -> Result<Self> {
        check_tau(tau)?;
        check_kappa(kappa)?;
        Ok(PenaltySpec::QuantileHuber { tau, kappa })
    }

    pub fn vapnik(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        Ok(PenaltySpec::Vapnik { eps })
    }

    pub fn smooth_insensitive(eps: f64, gamma: f64) -> Result<Self> {
        check_eps(eps)?;
        check_gamma(gamma)?;
        Ok(PenaltySpec::SmoothInsensitive { eps, gamma })
    }

    pub fn family(&self) -> Family {
        match self {
            PenaltySpec::L2 => Family::L2,
            PenaltySpec::L1 => Family::L1,
            PenaltySpec::Huber { .. } => Family::Huber,
            PenaltySpec::Quantile { .. } => Family::Quantile,
            PenaltySpec::QuantileHuber { .. } => Family::QuantileHuber,
            PenaltySpec::Vapnik { .. } => Family::Vapnik,
            PenaltySpec::SmoothInsensitive { .. } => Family::SmoothInsensitive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltySpec::L2 | PenaltySpec::L1 => Ok(()),
            PenaltySpec::Huber { kappa } => check_kappa(kappa),
            PenaltySpec::Quantile { tau } => check_tau(tau),
            PenaltySpec::QuantileHuber { tau, kappa } => check_tau(tau).and(check_kappa(kappa)),
            PenaltySpec::Vapnik { eps } => check_eps(eps),
            PenaltySpec::SmoothInsensitive { eps, gamma } => check_eps(eps).and(check_gamma(gamma)),
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(
            self,
            PenaltySpec::L2
                | PenaltySpec::Huber { .. }
                | PenaltySpec::QuantileHuber { .. }
                | PenaltySpec::SmoothInsensitive { .. }
        )
    }

    /// Points where a nonsmooth family has no derivative.
    pub fn kinks(&self) -> Vec<f64> {
        match *self {
            PenaltySpec::L1 | PenaltySpec::Quantile { .. } => vec![0.0],
            PenaltySpec::Vapnik { eps } => vec![-eps, eps],
            _ => Vec::new(),
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        match *self {
            PenaltySpec::L2 => 0.5 * r * r,
            PenaltySpec::L1 => r.abs(),
            PenaltySpec::Huber { kappa } => {
                if r.abs() <= kappa {
                    0.5 * r * r
                } else {
                    kappa * r.abs() - 0.5 * kappa * kappa
                }
            }
            PenaltySpec::Quantile { tau } => tau * r.max(0.0) + (1.0 - tau) * (-r).max(0.0),
            PenaltySpec::QuantileHuber { tau, kappa } => {
                if r > tau * kappa {
                    tau * r - 0.5 * kappa * tau * tau
                } else if r < -(1.0 - tau) * kappa {
                    -(1.0 - tau) * r - 0.5 * kappa * (1.0 - tau) * (1.0 - tau)
                } else {
                    0.5 * r * r / kappa
                }
            }
            PenaltySpec::Vapnik { eps } => (r.abs() - eps).max(0.0),
            PenaltySpec::SmoothInsensitive { eps, gamma } => {
                let z = (r.abs() - eps).max(0.0);
                0.5 * z * z / gamma
            }
        }
    }

    /// Exact derivative; fails at the kinks of the nonsmooth families.
    pub fn derivative(&self, r: f64) -> Result<f64> {
        if self.kinks().contains(&r) {
            return Err(Error::Nonsmooth);
        }
        Ok(match *self {
            PenaltySpec::L2 => r,
            PenaltySpec::L1 => r.signum(),
            PenaltySpec::Huber { kappa } => r.clamp(-kappa, kappa),
            PenaltySpec::Quantile { tau } => {
                if r > 0.0 {
                    tau
                } else {
                    tau - 1.0
                }
            }
            PenaltySpec::QuantileHuber { tau, kappa } => (r / kappa).clamp(tau - 1.0, tau),
            PenaltySpec::Vapnik { eps } => {
                if r.abs() > eps {
                    r.signum()
                } else {
                    0.0
                }
            }
            PenaltySpec::SmoothInsensitive { eps, gamma } => r.signum() * (r.abs() - eps).max(0.0) / gamma,
        })
    }

    fn sides(&self) -> Vec<Side> {
        let inf = f64::INFINITY;
        let single = |curvature, lo, hi| {
            vec![Side {
                curvature,
                lo,
                hi,
                shift: 0.0,
                sign: 1.0,
            }]
        };
        let pair = |curvature, hi, eps: f64| {
            [1.0, -1.0]
                .into_iter()
                .map(|sign| Side {
                    curvature,
                    lo: 0.0,
                    hi,
                    shift: -eps,
                    sign,
                })
                .collect()
        };
        match *self {
            PenaltySpec::L2 => single(1.0, -inf, inf),
            PenaltySpec::L1 => single(0.0, -1.0, 1.0),
            PenaltySpec::Huber { kappa } => single(1.0, -kappa, kappa),
            PenaltySpec::Quantile { tau } => single(0.0, tau - 1.0, tau),
            PenaltySpec::QuantileHuber { tau, kappa } => single(kappa, tau - 1.0, tau),
            PenaltySpec::Vapnik { eps } => pair(0.0, 1.0, eps),
            PenaltySpec::SmoothInsensitive { eps, gamma } => pair(gamma, inf, eps),
        }
    }

    /// Value of the Moreau envelope with parameter `gamma` (0 gives the
    /// penalty itself), computed from the conjugate representation.
    pub fn envelope_value(&self, gamma: f64, r: f64) -> f64 {
        self.sides().iter().map(|s| s.conj(r, gamma).0).sum()
    }

    /// Derivative of the Moreau envelope (`gamma > 0`).
    pub fn envelope_derivative(&self, gamma: f64, r: f64) -> f64 {
        self.sides().iter().map(|s| s.sign * s.conj(r, gamma).1).sum()
    }

    /// Conjugate representation of `sum_i value(r_i)` over a block of `len`
    /// residuals.
    pub fn to_plq(&self, len: usize) -> Result<PlqRep> {
        self.validate()?;
        if len < 1 {
            return Err(Error::param("block length must be >= 1"));
        }
        let eye = DMatrix::<f64>::identity(len, len);
        let box_cons = |k: usize| {
            let mut c = DMatrix::zeros(2 * k, k);
            for i in 0..k {
                c[(i, i)] = 1.0;
                c[(k + i, i)] = -1.0;
            }
            c
        };
        let box_bounds = |k: usize, lo: f64, hi: f64| {
            DVector::from_fn(2 * k, |i, _| if i < k { hi } else { -lo })
        };
        let zero_offset = DVector::zeros(len);
        let (cons, bounds, curvature, offset, linear) = match *self {
            PenaltySpec::L2 => (DMatrix::zeros(0, len), DVector::zeros(0), eye.clone(), zero_offset, eye),
            PenaltySpec::L1 => (box_cons(len), box_bounds(len, -1.0, 1.0), DMatrix::zeros(len, len), zero_offset, eye),
            PenaltySpec::Huber { kappa } => (box_cons(len), box_bounds(len, -kappa, kappa), eye.clone(), zero_offset, eye),
            PenaltySpec::Quantile { tau } => (
                box_cons(len),
                box_bounds(len, tau - 1.0, tau),
                DMatrix::zeros(len, len),
                zero_offset,
                eye,
            ),
            PenaltySpec::QuantileHuber { tau, kappa } => (
                box_cons(len),
                box_bounds(len, tau - 1.0, tau),
                eye.clone() * kappa,
                zero_offset,
                eye,
            ),
            PenaltySpec::Vapnik { eps } | PenaltySpec::SmoothInsensitive { eps, .. } => {
                let m = 2 * len;
                let mut linear = DMatrix::zeros(m, len);
                for i in 0..len {
                    linear[(i, i)] = 1.0;
                    linear[(len + i, i)] = -1.0;
                }
                let offset = DVector::from_element(m, -eps);
                match *self {
                    PenaltySpec::Vapnik { .. } => {
                        (box_cons(m), box_bounds(m, 0.0, 1.0), DMatrix::zeros(m, m), offset, linear)
                    }
                    PenaltySpec::SmoothInsensitive { gamma, .. } => (
                        -DMatrix::<f64>::identity(m, m),
                        DVector::zeros(m),
                        DMatrix::<f64>::identity(m, m) * gamma,
                        offset,
                        linear,
                    ),
                    _ => unreachable!(),
                }
            }
        };
        Ok(PlqRep::from_parts_unchecked(
            cons,
            bounds,
            curvature,
            offset,
            linear,
            Some(ClosedForm::separable(Loss::Plain(*self), len)),
        ))
    }
}

impl fmt::Display for PenaltySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PenaltySpec::L2 => write!(f, "l2"),
            PenaltySpec::L1 => write!(f, "l1"),
            PenaltySpec::Huber { kappa } => write!(f, "huber:kappa={kappa}"),
            PenaltySpec::Quantile { tau } => write!(f, "quantile:tau={tau}"),
            PenaltySpec::QuantileHuber { tau, kappa } => write!(f, "qhuber:tau={tau},kappa={kappa}"),
            PenaltySpec::Vapnik { eps } => write!(f, "vapnik:eps={eps}"),
            PenaltySpec::SmoothInsensitive { eps, gamma } => write!(f, "sil:eps={eps},gamma={gamma}"),
        }
    }
}

fn parse_err(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

/// Parses one penalty spec; `base` is the offset of `s` inside a larger
/// string, used for error positions.
fn parse_penalty_at(s: &str, base: usize) -> Result<PenaltySpec> {
    let (name, params) = match s.find(':') {
        Some(i) => (&s[..i], Some((&s[i + 1..], base + i + 1))),
        None => (s, None),
    };
    let name_trim = name.trim();
    let mut kv: Vec<(String, f64, usize)> = Vec::new();
    if let Some((list, offset)) = params {
        let mut pos = offset;
        for item in list.split(',') {
            let eq = item
                .find('=')
                .ok_or_else(|| parse_err(pos, format!("expected key=value, found '{item}'")))?;
            let key = item[..eq].trim().to_string();
            let raw = item[eq + 1..].trim();
            let value: f64 = raw
                .parse()
                .map_err(|_| parse_err(pos + eq + 1, format!("'{raw}' is not a number")))?;
            if kv.iter().any(|(k, _, _)| *k == key) {
                return Err(parse_err(pos, format!("duplicate parameter '{key}'")));
            }
            kv.push((key, value, pos));
            pos += item.len() + 1;
        }
    }
    let allowed: &[&str] = match name_trim {
        "l2" | "l1" => &[],
        "huber" => &["kappa"],
        "quantile" => &["tau"],
        "qhuber" => &["tau", "kappa"],
        "vapnik" => &["eps"],
        "sil" => &["eps", "gamma"],
        other => return Err(parse_err(base, format!("unknown penalty family '{other}'"))),
    };
    for (key, _, pos) in &kv {
        if !allowed.contains(&key.as_str()) {
            return Err(parse_err(*pos, format!("unknown parameter '{key}' for '{name_trim}'")));
        }
    }
    let end = base + s.len();
    let get = |key: &str| -> Result<f64> {
        kv.iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| *v)
            .ok_or_else(|| parse_err(end, format!("'{name_trim}' requires parameter '{key}'")))
    };
    let at = |key: &str| kv.iter().find(|(k, _, _)| k == key).map(|(_, _, p)| *p).unwrap_or(end);
    let wrap = |key: &str, r: Result<PenaltySpec>| r.map_err(|e| parse_err(at(key), e.to_string()));
    match name_trim {
        "l2" => Ok(PenaltySpec::L2),
        "l1" => Ok(PenaltySpec::L1),
        "huber" => wrap("kappa", PenaltySpec::huber(get("kappa")?)),
        "quantile" => wrap("tau", PenaltySpec::quantile(get("tau")?)),
        "qhuber" => {
            let tau = get("tau")?;
            let kappa = get("kappa")?;
            wrap("tau", check_tau(tau).map(|_| PenaltySpec::L2))?;
            wrap("kappa", PenaltySpec::quantile_huber(tau, kappa))
        }
        "vapnik" => wrap("eps", PenaltySpec::vapnik(get("eps")?)),
        "sil" => {
            let eps = get("eps")?;
            let gamma = kv.iter().find(|(k, _, _)| k == "gamma").map(|(_, v, _)| *v).unwrap_or(1.0);
            wrap("eps", check_eps(eps).map(|_| PenaltySpec::L2))?;
            wrap("gamma", PenaltySpec::smooth_insensitive(eps, gamma))
        }
        _ => unreachable!(),
    }
}

impl FromStr for PenaltySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_penalty_at(s, 0)
    }
}

/// A scalar loss: a zoo penalty or its Moreau envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Plain(PenaltySpec),
    Envelope { base: PenaltySpec, gamma: f64 },
}

impl Loss {
    pub fn envelope(base: PenaltySpec, gamma: f64) -> Result<Self> {
        base.validate()?;
        check_gamma(gamma)?;
        Ok(Loss::Envelope { base, gamma })
    }

    pub fn is_smooth(&self) -> bool {
        match self {
            Loss::Plain(p) => p.is_smooth(),
            Loss::Envelope { .. } => true,
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        match *self {
            Loss::Plain(p) => p.value(r),
            Loss::Envelope { base, gamma } => base.envelope_value(gamma, r),
        }
    }

    pub fn derivative(&self, r: f64) -> Result<f64> {
        match *self {
            Loss::Plain(p) => p.derivative(r),
            Loss::Envelope { base, gamma } => Ok(base.envelope_derivative(gamma, r)),
        }
    }

    /// Smooths a nonsmooth penalty by its Moreau envelope; smooth losses are
    /// returned unchanged.
    pub fn smoothed(&self, gamma: f64) -> Result<Self> {
        match *self {
            Loss::Plain(p) if !p.is_smooth() => Loss::envelope(p, gamma),
            other => Ok(other),
        }
    }

    pub fn to_plq(&self, len: usize) -> Result<PlqRep> {
        match *self {
            Loss::Plain(p) => p.to_plq(len),
            Loss::Envelope { base, gamma } => {
                let rep = base.to_plq(len)?.moreau(gamma)?;
                Ok(rep.with_closed_form(ClosedForm::separable(*self, len)))
            }
        }
    }
}

impl From<PenaltySpec> for Loss {
    fn from(p: PenaltySpec) -> Self {
        Loss::Plain(p)
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loss::Plain(p) => write!(f, "{p}"),
            Loss::Envelope { base, gamma } => write!(f, "moreau({base};gamma={gamma})"),
        }
    }
}

/// A contiguous row range `start..end` of the residual with its own loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisfitBlock {
    pub start: usize,
    pub end: usize,
    pub loss: Loss,
}

/// Misfit penalty on a residual vector: one loss for every entry, or
/// different losses on disjoint row ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misfit {
    Uniform(Loss),
    Blocks(Vec<MisfitBlock>),
}

impl From<PenaltySpec> for Misfit {
    fn from(p: PenaltySpec) -> Self {
        Misfit::Uniform(Loss::Plain(p))
    }
}

impl From<Loss> for Misfit {
    fn from(l: Loss) -> Self {
        Misfit::Uniform(l)
    }
}

impl Misfit {
    /// Builds a block misfit; blocks are sorted and must not overlap.
    pub fn blocks(mut blocks: Vec<MisfitBlock>) -> Result<Self> {
        blocks.sort_by_key(|b| b.start);
        for b in &blocks {
            if b.start >= b.end {
                return Err(Error::param(format!("empty block {}..{}", b.start, b.end)));
            }
        }
        for w in blocks.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::param(format!(
                    "overlapping blocks {}..{} and {}..{}",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        Ok(Misfit::Blocks(blocks))
    }

    /// Checks that the misfit covers exactly `len` residual rows.
    pub fn check_len(&self, len: usize) -> Result<()> {
        match self {
            Misfit::Uniform(_) => Ok(()),
            Misfit::Blocks(blocks) => {
                let mut next = 0;
                for b in blocks {
                    if b.start != next {
                        return Err(Error::dim(format!("misfit blocks leave rows {next}..{} uncovered", b.start)));
                    }
                    next = b.end;
                }
                if next != len {
                    return Err(Error::dim(format!("misfit blocks cover {next} rows, residual has {len}")));
                }
                Ok(())
            }
        }
    }

    pub fn loss_for_row(&self, row: usize) -> Option<&Loss> {
        match self {
            Misfit::Uniform(l) => Some(l),
            Misfit::Blocks(blocks) => blocks.iter().find(|b| b.start <= row && row < b.end).map(|b| &b.loss),
        }
    }

    pub fn losses(&self) -> Vec<Loss> {
        match self {
            Misfit::Uniform(l) => vec![*l],
            Misfit::Blocks(blocks) => blocks.iter().map(|b| b.loss).collect(),
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.losses().iter().all(Loss::is_smooth)
    }

    pub fn smoothed(&self, gamma: f64) -> Result<Self> {
        match self {
            Misfit::Uniform(l) => Ok(Misfit::Uniform(l.smoothed(gamma)?)),
            Misfit::Blocks(blocks) => blocks
                .iter()
                .map(|b| {
                    Ok(MisfitBlock {
                        loss: b.loss.smoothed(gamma)?,
                        ..b.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Misfit::Blocks),
        }
    }

    /// Sum of the row losses over a residual vector.
    pub fn value(&self, residual: &[f64]) -> f64 {
        match self {
            Misfit::Uniform(l) => residual.iter().map(|&r| l.value(r)).sum(),
            Misfit::Blocks(blocks) => blocks
                .iter()
                .map(|b| residual[b.start..b.end].iter().map(|&r| b.loss.value(r)).sum::<f64>())
                .sum(),
        }
    }

    pub fn to_plq(&self, len: usize) -> Result<PlqRep> {
        self.check_len(len)?;
        match self {
            Misfit::Uniform(l) => l.to_plq(len),
            Misfit::Blocks(blocks) => {
                let parts = blocks
                    .iter()
                    .map(|b| Ok((b.loss.to_plq(b.end - b.start)?, (b.start..b.end).collect())))
                    .collect::<Result<Vec<(PlqRep, Vec<usize>)>>>()?;
                PlqRep::block_sum(len, &parts)
            }
        }
    }
}

impl fmt::Display for Misfit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Misfit::Uniform(l) => write!(f, "{l}"),
            Misfit::Blocks(blocks) => {
                write!(f, "blocks:")?;
                for (i, b) in blocks.iter().enumerate() {
                    if i > 0 {
                        write!(f, ";")?;
                    }
                    write!(f, "{}-{}={}", b.start, b.end - 1, b.loss)?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Misfit {
    type Err = Error;

    /// Accepts a single penalty spec or `blocks:a-b=spec;c-d=spec` with
    /// inclusive row ranges.
    fn from_str(s: &str) -> Result<Self> {
        let Some(body) = s.strip_prefix("blocks:") else {
            return parse_penalty_at(s, 0).map(Misfit::from);
        };
        let mut pos = "blocks:".len();
        let mut blocks = Vec::new();
        for item in body.split(';') {
            let eq = item
                .find('=')
                .ok_or_else(|| parse_err(pos, format!("expected range=penalty, found '{item}'")))?;
            let range = &item[..eq];
            let dash = range
                .find('-')
                .ok_or_else(|| parse_err(pos, format!("expected a-b row range, found '{range}'")))?;
            let lo: usize = range[..dash]
                .trim()
                .parse()
                .map_err(|_| parse_err(pos, format!("bad row index '{}'", &range[..dash])))?;
            let hi: usize = range[dash + 1..]
                .trim()
                .parse()
                .map_err(|_| parse_err(pos + dash + 1, format!("bad row index '{}'", &range[dash + 1..])))?;
            if hi < lo {
                return Err(parse_err(pos, format!("range {lo}-{hi} is reversed")));
            }
            let spec = parse_penalty_at(&item[eq + 1..], pos + eq + 1)?;
            blocks.push(MisfitBlock {
                start: lo,
                end: hi + 1,
                loss: Loss::Plain(spec),
            });
            pos += item.len() + 1;
        }
        Misfit::blocks(blocks).map_err(|e| parse_err(0, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn zoo() -> Vec<PenaltySpec> {
        vec![
            PenaltySpec::L2,
            PenaltySpec::L1,
            PenaltySpec::huber(1.0).unwrap(),
            PenaltySpec::quantile(0.3).unwrap(),
            PenaltySpec::quantile_huber(0.3, 1.0).unwrap(),
            PenaltySpec::vapnik(0.5).unwrap(),
            PenaltySpec::smooth_insensitive(0.5, 1.0).unwrap(),
        ]
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(PenaltySpec::huber(1.0).unwrap().value(2.0), 1.5);
        let q = PenaltySpec::quantile(0.3).unwrap();
        assert_abs_diff_eq!(q.value(-1.0), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(q.value(1.0), 0.3, epsilon = 1e-15);
        let v = PenaltySpec::vapnik(0.5).unwrap();
        assert_eq!(v.value(0.3), 0.0);
        assert_eq!(v.value(2.0), 1.5);
        assert_eq!(PenaltySpec::smooth_insensitive(0.5, 1.0).unwrap().value(2.0), 1.125);
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(PenaltySpec::huber(1.0).unwrap().derivative(0.5).unwrap(), 0.5);
        let qh = PenaltySpec::quantile_huber(0.3, 1.0).unwrap();
        assert_abs_diff_eq!(qh.derivative(-2.0).unwrap(), -0.7, epsilon = 1e-15);
        let sil = PenaltySpec::smooth_insensitive(0.5, 1.0).unwrap();
        assert_eq!(sil.derivative(2.0).unwrap(), 1.5);
    }

    #[test]
    fn derivative_rejects_kinks() {
        assert!(matches!(PenaltySpec::L1.derivative(0.0), Err(Error::Nonsmooth)));
        assert!(matches!(
            PenaltySpec::vapnik(0.5).unwrap().derivative(0.5),
            Err(Error::Nonsmooth)
        ));
        assert_eq!(PenaltySpec::L1.derivative(-3.0).unwrap(), -1.0);
    }

    #[test]
    fn invalid_parameters() {
        assert!(PenaltySpec::huber(0.0).is_err());
        assert!(PenaltySpec::quantile(1.0).is_err());
        assert!(PenaltySpec::quantile_huber(0.0, 1.0).is_err());
        assert!(PenaltySpec::vapnik(-0.1).is_err());
        assert!(PenaltySpec::smooth_insensitive(0.1, 0.0).is_err());
    }

    #[test]
    fn side_formula_matches_closed_form() {
        for p in zoo() {
            for i in -400..=400 {
                let r = i as f64 * 0.0125;
                assert_abs_diff_eq!(p.envelope_value(0.0, r), p.value(r), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn l1_envelope_is_scaled_huber() {
        for &g in &[0.1, 0.5, 1.0, 2.0] {
            let h = PenaltySpec::huber(g).unwrap();
            for i in -500..=500 {
                let x = i as f64 * 0.01;
                assert_abs_diff_eq!(PenaltySpec::L1.envelope_value(g, x), h.value(x) / g, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn quantile_envelope_is_quantile_huber() {
        let q = PenaltySpec::quantile(0.25).unwrap();
        let qh = PenaltySpec::quantile_huber(0.25, 0.7).unwrap();
        for i in -300..=300 {
            let x = i as f64 * 0.01;
            assert_abs_diff_eq!(q.envelope_value(0.7, x), qh.value(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn parse_examples() {
        assert_eq!("huber:kappa=1.0".parse::<PenaltySpec>().unwrap(), PenaltySpec::Huber { kappa: 1.0 });
        assert_eq!(
            "qhuber:tau=0.25,kappa=0.5".parse::<PenaltySpec>().unwrap(),
            PenaltySpec::QuantileHuber { tau: 0.25, kappa: 0.5 }
        );
        assert_eq!(
            "sil:eps=0.5".parse::<PenaltySpec>().unwrap(),
            PenaltySpec::SmoothInsensitive { eps: 0.5, gamma: 1.0 }
        );
        let err = "huber".parse::<PenaltySpec>().unwrap_err().to_string();
        assert!(err.contains("kappa"), "{err}");
        let err = "quantile:tau=1.5".parse::<PenaltySpec>().unwrap_err().to_string();
        assert!(err.contains("tau"), "{err}");
        assert!("cauchy".parse::<PenaltySpec>().is_err());
        assert!("huber:kappa=1,tau=0.2".parse::<PenaltySpec>().is_err());
        assert!("huber:kappa=abc".parse::<PenaltySpec>().is_err());
    }

    #[test]
    fn display_round_trips() {
        for p in zoo() {
            assert_eq!(p.to_string().parse::<PenaltySpec>().unwrap(), p);
        }
    }

    #[test]
    fn parse_blocks() {
        let m: Misfit = "blocks:0-63=l2;64-99=huber:kappa=1".parse().unwrap();
        m.check_len(100).unwrap();
        assert!(m.check_len(101).is_err());
        assert_eq!(m.loss_for_row(70), Some(&Loss::Plain(PenaltySpec::Huber { kappa: 1.0 })));
        assert_eq!(m.to_string(), "blocks:0-63=l2;64-99=huber:kappa=1");
        let err = "blocks:0-10=l2;5-20=l1".parse::<Misfit>().unwrap_err().to_string();
        assert!(err.contains("overlapping"), "{err}");
        assert!("blocks:0-10=l2;11-20=huber".parse::<Misfit>().is_err());
    }

    #[test]
    fn smoothing_only_touches_nonsmooth_losses() {
        let m: Misfit = "blocks:0-1=l2;2-3=quantile:tau=0.2".parse().unwrap();
        assert!(!m.is_smooth());
        let s = m.smoothed(0.5).unwrap();
        assert!(s.is_smooth());
        assert_eq!(s.loss_for_row(0), Some(&Loss::Plain(PenaltySpec::L2)));
        assert!(matches!(s.loss_for_row(3), Some(Loss::Envelope { gamma, .. }) if *gamma == 0.5));
    }
}
