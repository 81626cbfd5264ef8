use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::num_like::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::{Result, SharingError};

/// Std of the additive branch's `A` factor at initialisation.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    /// `αΘ + AB`
    G0,
    /// `αΘCᵀD + AB`
    G1,
    /// `αEFᵀΘ + AB`
    G2,
    /// `α[(UV) ⊙ Θ] + AB`
    G3,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [TransformKind::G0, TransformKind::G1, TransformKind::G2, TransformKind::G3];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::G0 => "g0",
            TransformKind::G1 => "g1",
            TransformKind::G2 => "g2",
            TransformKind::G3 => "g3",
        }
    }

    /// Names of the kind-specific factor pair, if any.
    pub fn extra_names(self) -> Option<(&'static str, &'static str)> {
        match self {
            TransformKind::G0 => None,
            TransformKind::G1 => Some(("c", "d")),
            TransformKind::G2 => Some(("e", "f")),
            TransformKind::G3 => Some(("u", "v")),
        }
    }

    /// Shapes of the extra pair for a `rows × cols` projection at rank `r`.
    pub fn extra_shapes(self, rows: usize, cols: usize, r: usize) -> Option<([usize; 2], [usize; 2])> {
        match self {
            TransformKind::G0 => None,
            TransformKind::G1 => Some(([r, cols], [r, cols])),
            TransformKind::G2 => Some(([rows, r], [rows, r])),
            TransformKind::G3 => Some(([rows, r], [r, cols])),
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = SharingError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "g0" => Ok(TransformKind::G0),
            "g1" => Ok(TransformKind::G1),
            "g2" => Ok(TransformKind::G2),
            "g3" => Ok(TransformKind::G3),
            other => Err(SharingError::UnknownKind(other.to_string())),
        }
    }
}

/// Recovery factors of one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors<T: Scalar = f32> {
    /// Shape `[1]`.
    pub alpha: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub extra: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Factors<T> {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// `alpha, a, b` then the extra pair.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.alpha, &self.a, &self.b];
        if let Some((x, y)) = &self.extra {
            v.push(x);
            v.push(y);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.alpha, &mut self.a, &mut self.b];
        if let Some((x, y)) = &mut self.extra {
            v.push(x);
            v.push(y);
        }
        v
    }

    /// Names matching [`tensors`](Self::tensors).
    pub fn names(&self, kind: TransformKind) -> Vec<&'static str> {
        let mut v = vec!["alpha", "a", "b"];
        if let Some((x, y)) = kind.extra_names() {
            v.push(x);
            v.push(y);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn bit_eq(&self, other: &Self) -> bool
    where
        T: crate::tensor::BitRepr,
    {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }

    pub fn cast<U: Scalar>(&self) -> Factors<U> {
        Factors {
            alpha: self.alpha.cast(),
            a: self.a.cast(),
            b: self.b.cast(),
            extra: self.extra.as_ref().map(|(x, y)| (x.cast(), y.cast())),
        }
    }

    /// Check every factor against a `rows × cols` projection.
    pub fn check(&self, kind: TransformKind, rows: usize, cols: usize) -> Result<()> {
        let r = self.a.shape().get(1).copied().unwrap_or(0);
        if r == 0 {
            return Err(SharingError::ZeroRank);
        }
        let expect = |name: &'static str, t: &Tensor<T>, shape: &[usize]| {
            if t.shape() != shape {
                Err(SharingError::FactorShape {
                    factor: name,
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                })
            } else {
                Ok(())
            }
        };
        expect("alpha", &self.alpha, &[1])?;
        expect("a", &self.a, &[rows, r])?;
        expect("b", &self.b, &[r, cols])?;
        match (kind.extra_shapes(rows, cols, r), &self.extra, kind.extra_names()) {
            (None, None, _) => Ok(()),
            (Some((sx, sy)), Some((x, y)), Some((nx, ny))) => {
                expect(nx, x, &sx)?;
                expect(ny, y, &sy)
            }
            (Some(_), None, Some((nx, _))) => Err(SharingError::MissingFactor(nx)),
            _ => Err(SharingError::FactorShape {
                factor: "extra",
                expected: Vec::new(),
                found: self.extra.as_ref().map(|(x, _)| x.shape().to_vec()).unwrap_or_default(),
            }),
        }
    }
}

/// Factors recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FactorVars {
    pub alpha: Var,
    pub a: Var,
    pub b: Var,
    pub extra: Option<(Var, Var)>,
}

impl FactorVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, f: &Factors<T>, trainable: bool, alpha_trainable: bool) -> Self {
        let mut put = |t: &Tensor<T>, train: bool| {
            if train {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        FactorVars {
            alpha: put(&f.alpha, trainable && alpha_trainable),
            a: put(&f.a, trainable),
            b: put(&f.b, trainable),
            extra: f.extra.as_ref().map(|(x, y)| (put(x, trainable), put(y, trainable))),
        }
    }

    /// In [`Factors::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.alpha, self.a, self.b];
        if let Some((x, y)) = self.extra {
            v.push(x);
            v.push(y);
        }
        v
    }
}

/// Predicted weight on a tape.
pub fn transform_on_tape<T: Scalar>(tape: &mut Tape<T>, kind: TransformKind, theta: Var, f: &FactorVars) -> Result<Var> {
    let mult = match (kind, f.extra) {
        (TransformKind::G0, _) => theta,
        (TransformKind::G1, Some((c, d))) => {
            let tc = tape.matmul_nt(theta, c)?;
            tape.matmul(tc, d)?
        }
        (TransformKind::G2, Some((e, ff))) => {
            let ft = tape.transpose(ff)?;
            let ftt = tape.matmul(ft, theta)?;
            tape.matmul(e, ftt)?
        }
        (TransformKind::G3, Some((u, v))) => {
            let mask = tape.matmul(u, v)?;
            tape.mul(mask, theta)?
        }
        (k, None) => {
            return Err(SharingError::MissingFactor(
                k.extra_names().map_or("extra", |(n, _)| n),
            ))
        }
    };
    let scaled = tape.scale_by(mult, f.alpha)?;
    let ab = tape.matmul(f.a, f.b)?;
    Ok(tape.add(scaled, ab)?)
}

/// `g(Θ_j, ΔΘ)` evaluated directly. Runs the same kernels in the same
/// order as [`transform_on_tape`], so both agree bitwise.
pub fn apply_transform<T: Scalar>(kind: TransformKind, theta: &Tensor<T>, f: &Factors<T>) -> Result<Tensor<T>> {
    if theta.shape().len() != 2 {
        return Err(SharingError::FactorShape {
            factor: "theta",
            expected: vec![0, 0],
            found: theta.shape().to_vec(),
        });
    }
    f.check(kind, theta.shape()[0], theta.shape()[1])?;
    let mut tape = Tape::new();
    let t = tape.constant(theta.clone());
    let vars = FactorVars::bind(&mut tape, f, false, false);
    let out = transform_on_tape(&mut tape, kind, t, &vars)?;
    Ok(tape.value(out).clone())
}

/// Start point for a `rows × cols` projection: `α = 1`, `A ~ N(0, 0.02)`,
/// `B = 0`, multiplicative pairs scaled so the product has roughly `Θ`'s
/// magnitude.
pub fn init_factors<R: Rng + ?Sized>(kind: TransformKind, rows: usize, cols: usize, r: usize, rng: &mut R) -> Result<Factors> {
    if r == 0 {
        return Err(SharingError::ZeroRank);
    }
    let a = Tensor::randn(&[rows, r], A_INIT_STD, rng);
    let b = Tensor::zeros(&[r, cols]);
    let rf = r as f64;
    let extra = match kind {
        TransformKind::G0 => None,
        // (ΘCᵀD)_ij sums cols·r products of three unit-scale terms.
        TransformKind::G1 => {
            let s = (cols as f64 * rf).powf(-0.25);
            Some((Tensor::randn(&[r, cols], s, rng), Tensor::randn(&[r, cols], s, rng)))
        }
        TransformKind::G2 => {
            let s = (rows as f64 * rf).powf(-0.25);
            Some((Tensor::randn(&[rows, r], s, rng), Tensor::randn(&[rows, r], s, rng)))
        }
        TransformKind::G3 => {
            let s = rf.powf(-0.25);
            Some((Tensor::randn(&[rows, r], s, rng), Tensor::randn(&[r, cols], s, rng)))
        }
    };
    Ok(Factors {
        alpha: Tensor::ones(&[1]),
        a,
        b,
        extra,
    })
}
