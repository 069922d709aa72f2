//! Distance functions between projected embeddings and their gradients.
//!
//! All three kinds are used as "distances" by the order probe: items are
//! decoded by ascending value, so `Dot` is used as-is without a sign flip.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm product below which cosine distance is considered undefined.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    SquaredL2,
    Cosine,
    Dot,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 3] = [DistanceKind::SquaredL2, DistanceKind::Cosine, DistanceKind::Dot];

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::SquaredL2 => "squared_l2",
            DistanceKind::Cosine => "cosine",
            DistanceKind::Dot => "dot",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_l2" | "l2" => Ok(DistanceKind::SquaredL2),
            "cosine" | "cos" => Ok(DistanceKind::Cosine),
            "dot" => Ok(DistanceKind::Dot),
            other => Err(Error::InvalidConfig(format!("unknown distance kind '{other}'"))),
        }
    }
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(())
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Evaluates `kind` on `(u, v)`.
pub fn distance(kind: DistanceKind, u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    Ok(match kind {
        DistanceKind::SquaredL2 => u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum(),
        DistanceKind::Dot => dot(u, v),
        DistanceKind::Cosine => {
            let nn = norm(u) * norm(v);
            if nn <= COSINE_EPS {
                return Err(Error::DegenerateVector(nn));
            }
            1.0 - dot(u, v) / nn
        }
    })
}

/// Gradients of `distance(kind, u, v)` with respect to `u` and `v`.
pub fn distance_grad(kind: DistanceKind, u: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gu = vec![0.0; u.len()];
    let mut gv = vec![0.0; v.len()];
    distance_and_grad_into(kind, u, v, &mut gu, &mut gv)?;
    Ok((gu, gv))
}

/// Computes the distance and writes both gradients into caller buffers.
pub fn distance_and_grad_into(
    kind: DistanceKind,
    u: &[f64],
    v: &[f64],
    grad_u: &mut [f64],
    grad_v: &mut [f64],
) -> Result<f64> {
    check_dims(u, v)?;
    debug_assert_eq!(grad_u.len(), u.len());
    debug_assert_eq!(grad_v.len(), v.len());
    match kind {
        DistanceKind::SquaredL2 => {
            let mut acc = 0.0;
            for i in 0..u.len() {
                let diff = u[i] - v[i];
                acc += diff * diff;
                grad_u[i] = 2.0 * diff;
                grad_v[i] = -2.0 * diff;
            }
            Ok(acc)
        }
        DistanceKind::Dot => {
            grad_u.copy_from_slice(v);
            grad_v.copy_from_slice(u);
            Ok(dot(u, v))
        }
        DistanceKind::Cosine => {
            let nu = norm(u);
            let nv = norm(v);
            let nn = nu * nv;
            if nn <= COSINE_EPS {
                return Err(Error::DegenerateVector(nn));
            }
            let uv = dot(u, v);
            let cos = uv / nn;
            // d(1 - cos)/du = -(v / (|u||v|) - cos * u / |u|^2)
            for i in 0..u.len() {
                grad_u[i] = -(v[i] / nn - cos * u[i] / (nu * nu));
                grad_v[i] = -(u[i] / nn - cos * v[i] / (nv * nv));
            }
            Ok(1.0 - cos)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(kind: DistanceKind, u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = 1e-5;
        let mut gu = vec![0.0; u.len()];
        let mut gv = vec![0.0; v.len()];
        for i in 0..u.len() {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[i] += h;
            dn[i] -= h;
            gu[i] = (distance(kind, &up, v).unwrap() - distance(kind, &dn, v).unwrap()) / (2.0 * h);
            let mut up = v.to_vec();
            let mut dn = v.to_vec();
            up[i] += h;
            dn[i] -= h;
            gv[i] = (distance(kind, u, &up).unwrap() - distance(kind, u, &dn).unwrap()) / (2.0 * h);
        }
        (gu, gv)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(distance(DistanceKind::Cosine, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let d = distance(DistanceKind::Cosine, &[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!((d - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn squared_l2_identity_is_zero() {
        let u = [0.3, -1.2, 4.0];
        assert_eq!(distance(DistanceKind::SquaredL2, &u, &u).unwrap(), 0.0);
    }

    #[test]
    fn squared_l2_grad_example() {
        let (gu, gv) = distance_grad(DistanceKind::SquaredL2, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(gu, vec![2.0, 0.0]);
        assert_eq!(gv, vec![-2.0, 0.0]);
        let (fu, fv) = fd_grad(DistanceKind::SquaredL2, &[1.0, 0.0], &[0.0, 0.0]);
        for i in 0..2 {
            assert!((fu[i] - gu[i]).abs() < 1e-8);
            assert!((fv[i] - gv[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn dot_grad_swaps_arguments() {
        let u = [1.5, -2.0, 0.25];
        let v = [0.5, 3.0, -1.0];
        let (gu, gv) = distance_grad(DistanceKind::Dot, &u, &v).unwrap();
        assert_eq!(gu, v.to_vec());
        assert_eq!(gv, u.to_vec());
    }

    #[test]
    fn cosine_grad_vanishes_at_minimum() {
        let u = [0.7, -0.2, 1.1];
        let (gu, _) = distance_grad(DistanceKind::Cosine, &u, &u).unwrap();
        assert!(gu.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn cosine_degenerate_is_error() {
        let err = distance(DistanceKind::Cosine, &[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector(_)));
        assert!(distance_grad(DistanceKind::Cosine, &[1.0, 0.0], &[1e-13, 0.0]).is_err());
    }

    #[test]
    fn mismatched_dims_rejected() {
        assert!(matches!(
            distance(DistanceKind::Dot, &[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kind_parses() {
        for kind in DistanceKind::ALL {
            assert_eq!(kind.as_str().parse::<DistanceKind>().unwrap(), kind);
        }
        assert!("manhattan".parse::<DistanceKind>().is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..8).prop_flat_map(|n| {
                (
                    prop::collection::vec(-10.0f64..10.0, n),
                    prop::collection::vec(-10.0f64..10.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn squared_l2_nonnegative_and_symmetric((u, v) in vecs()) {
                let a = distance(DistanceKind::SquaredL2, &u, &v).unwrap();
                let b = distance(DistanceKind::SquaredL2, &v, &u).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert_eq!(a, b);
            }

            #[test]
            fn cosine_bounded_symmetric_scale_invariant(
                (u, v) in vecs(), a in 0.01f64..100.0, b in 0.01f64..100.0
            ) {
                prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
                let d = distance(DistanceKind::Cosine, &u, &v).unwrap();
                prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
                let r = distance(DistanceKind::Cosine, &v, &u).unwrap();
                prop_assert!((d - r).abs() < 1e-12);
                let su: Vec<f64> = u.iter().map(|x| x * a).collect();
                let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
                let s = distance(DistanceKind::Cosine, &su, &sv).unwrap();
                prop_assert!((d - s).abs() < 1e-9);
            }

            #[test]
            fn dot_symmetric((u, v) in vecs()) {
                prop_assert_eq!(
                    distance(DistanceKind::Dot, &u, &v).unwrap(),
                    distance(DistanceKind::Dot, &v, &u).unwrap()
                );
            }
        }
    }
}
