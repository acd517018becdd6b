//! Central finite-difference verification of tape gradients.
//!
//! Runs in 64-bit: the caller rebuilds the same scalar loss on a fresh tape
//! for every evaluation (any internal randomness reseeded identically), so
//! finite differences probe exactly the function the tape differentiated.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::ParamRef;
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub skipped_frozen: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with a dead zone: when both values sit below the
/// resolution of a central difference on an O(1) loss, the coordinate is
/// genuinely insensitive (e.g. a bias feeding straight into batch norm,
/// whose output is exactly shift-invariant) and both numbers are noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Central difference at one coordinate, refining the step when the error
/// is large: piecewise-linear nonlinearities (ReLU, max-pool) make finite
/// differences unreliable when the interval straddles a kink, and the kink
/// noise shrinks linearly with h while a genuine gradient bug does not.
fn fd_rel_err(
    p: &ParamRef<f64>,
    ci: usize,
    analytic: f64,
    h0: f64,
    eval: &mut impl FnMut(bool) -> Result<f64>,
) -> Result<f64> {
    // larger steps cut the cancellation noise floor on low-sensitivity
    // coordinates; smaller steps dodge kinks near the base point
    let mut best = f64::INFINITY;
    for h in [h0, h0 * 10.0, h0 / 10.0, h0 / 100.0] {
        let orig = p.borrow().value.data()[ci];
        p.borrow_mut().value.data_mut()[ci] = orig + h;
        let lp = eval(false)?;
        p.borrow_mut().value.data_mut()[ci] = orig - h;
        let lm = eval(false)?;
        p.borrow_mut().value.data_mut()[ci] = orig;
        let fd = (lp - lm) / (2.0 * h);
        best = best.min(rel_err(analytic, fd));
        if best < 1e-5 {
            break;
        }
    }
    Ok(best)
}

/// Compares tape gradients with (f(x+h) - f(x-h)) / 2h on sampled
/// coordinates of every parameter group. `eval(true)` must run backward and
/// leave gradients in `Parameter::grad` (grads are zeroed here first);
/// `eval(false)` only needs the loss value. Frozen parameters are skipped.
pub fn grad_check(
    params: &[ParamRef<f64>],
    coords_per_group: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
    mut eval: impl FnMut(bool) -> Result<f64>,
) -> Result<GradCheckReport> {
    for p in params {
        p.borrow_mut().zero_grad();
    }
    eval(true)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.borrow().grad.data().to_vec())
        .collect();

    let mut groups = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let (name, numel, frozen) = {
            let b = p.borrow();
            (b.name.clone(), b.value.numel(), b.frozen)
        };
        if frozen {
            groups.push(GroupReport {
                name,
                max_rel_err: 0.0,
                coords_checked: 0,
                skipped_frozen: true,
            });
            continue;
        }
        let coords: Vec<usize> = if numel <= coords_per_group {
            (0..numel).collect()
        } else {
            let mut seen = HashSet::new();
            while seen.len() < coords_per_group {
                seen.insert(rng.random_range(0..numel));
            }
            let mut v: Vec<usize> = seen.into_iter().collect();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for &ci in &coords {
            worst = worst.max(fd_rel_err(p, ci, analytic[pi][ci], h, &mut eval)?);
        }
        groups.push(GroupReport {
            name,
            max_rel_err: worst,
            coords_checked: coords.len(),
            skipped_frozen: false,
        });
    }
    Ok(GradCheckReport { groups })
}

/// Like [`grad_check`], but coordinates are sampled across a named group of
/// parameters (e.g., one group per module), so deep models stay checkable
/// within a time budget while every group still gets real coverage.
pub fn grad_check_grouped(
    groups: &[(String, Vec<ParamRef<f64>>)],
    coords_per_group: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
    mut eval: impl FnMut(bool) -> Result<f64>,
) -> Result<GradCheckReport> {
    for (_, params) in groups {
        for p in params {
            p.borrow_mut().zero_grad();
        }
    }
    eval(true)?;
    let analytic: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|(_, params)| {
            params
                .iter()
                .map(|p| p.borrow().grad.data().to_vec())
                .collect()
        })
        .collect();

    let mut reports = Vec::with_capacity(groups.len());
    for (gi, (name, params)) in groups.iter().enumerate() {
        let live: Vec<usize> = (0..params.len())
            .filter(|&i| !params[i].borrow().frozen)
            .collect();
        if live.is_empty() {
            reports.push(GroupReport {
                name: name.clone(),
                max_rel_err: 0.0,
                coords_checked: 0,
                skipped_frozen: true,
            });
            continue;
        }
        // flat coordinate space over the group's unfrozen parameters
        let sizes: Vec<usize> = live.iter().map(|&i| params[i].borrow().value.numel()).collect();
        let total: usize = sizes.iter().sum();
        let coords: Vec<usize> = if total <= coords_per_group {
            (0..total).collect()
        } else {
            let mut seen = HashSet::new();
            while seen.len() < coords_per_group {
                seen.insert(rng.random_range(0..total));
            }
            let mut v: Vec<usize> = seen.into_iter().collect();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for &flat in &coords {
            let mut rem = flat;
            let mut which = 0usize;
            while rem >= sizes[which] {
                rem -= sizes[which];
                which += 1;
            }
            let p = &params[live[which]];
            worst = worst.max(fd_rel_err(p, rem, analytic[gi][live[which]][rem], h, &mut eval)?);
        }
        reports.push(GroupReport {
            name: name.clone(),
            max_rel_err: worst,
            coords_checked: coords.len(),
            skipped_frozen: false,
        });
    }
    Ok(GradCheckReport { groups: reports })
}

/// Convenience for property tests: checks a gradient against a
/// finite-difference oracle on a plain slice.
pub fn fd_scalar<S: Scalar>(
    x: &mut [S],
    i: usize,
    h: f64,
    mut f: impl FnMut(&[S]) -> f64,
) -> f64 {
    let orig = x[i];
    x[i] = orig + S::from_f64(h);
    let lp = f(x);
    x[i] = orig - S::from_f64(h);
    let lm = f(x);
    x[i] = orig;
    (lp - lm) / (2.0 * h)
}
