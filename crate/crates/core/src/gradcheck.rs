//! Central finite-difference checks of every analytic gradient.
//!
//! The reference side only ever evaluates forward passes, so it shares no
//! code with the backward rules it checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::Result;
use crate::lpnorm::{self, LpNormLayer, NormOrder, RadiusParam};
use crate::models::build_poc;
use crate::seed;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; only matters for gradients
/// whose norm is below it.
const ERROR_FLOOR: f64 = 1e-6;

pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-6)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

#[derive(Default)]
struct Tally {
    entries: Vec<(String, usize, f64)>,
}

impl Tally {
    fn record(&mut self, name: &str, err: f64) {
        let err = if err.is_nan() { f64::INFINITY } else { err };
        match self.entries.iter_mut().find(|e| e.0 == name) {
            Some(e) => {
                e.1 += 1;
                e.2 = e.2.max(err);
            }
            None => self.entries.push((name.to_string(), 1, err)),
        }
    }

    fn finish(self, tolerance: f64) -> Vec<CheckResult> {
        self.entries
            .into_iter()
            .map(|(name, cases, worst)| CheckResult {
                name,
                cases,
                worst,
                tolerance,
            })
            .collect()
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const FIXED_ORDERS: [f64; 4] = [1.5, 2.0, 3.0, 8.0];

/// Layer output for the parameter vector `[x.., p or ρ, a]`, contracted
/// with `up`. `order_at` maps the order coordinate to a [`NormOrder`].
fn layer_loss(z: &[f64], dim: usize, up: &[f64], order_at: impl Fn(f64) -> NormOrder, radius_at: impl Fn(f64) -> RadiusParam) -> f64 {
    let layer = LpNormLayer::new(order_at(z[dim]), radius_at(z.get(dim + 1).copied().unwrap_or(0.0)));
    inner(up, &lpnorm::normalize_forward(&z[..dim], &layer))
}

/// Fixed order `p` at the central point, the general formula elsewhere.
fn order_near(p: f64) -> impl Fn(f64) -> NormOrder {
    move |q| if q == p { NormOrder::fixed(p).unwrap() } else { NormOrder::General(q) }
}

/// lp-layer gradients for fixed orders {1.5, 2, 3, 8} and the learnable
/// mode, on vectors of length 2..=16. Each case compares the layer's whole
/// gradient, with respect to the input, the order and the radius, as one
/// vector.
pub fn lp_layer_suite(seeds: u64) -> Vec<CheckResult> {
    let mut tally = Tally::default();
    for s in 0..seeds {
        let mut rng = seed::rng(seed::derive(0x6c70_6772, s));
        let dim = 2 + (s as usize % 15);
        let x = normal_vec(&mut rng, dim);
        let up = normal_vec(&mut rng, dim);
        let alpha: f64 = rng.random_range(0.5..3.0);
        let a_raw: f64 = rng.random_range(-2.0..2.0);
        let rho: f64 = rng.random_range(-2.0..2.0);

        for &p in &FIXED_ORDERS {
            let fixed = LpNormLayer::new(NormOrder::fixed(p).unwrap(), RadiusParam::Fixed(alpha));
            let mut analytic = lpnorm::grad_wrt_input(&x, &fixed, &up);
            analytic.push(lpnorm::grad_wrt_p(&x, p, alpha, fixed.epsilon, &up));
            let z: Vec<f64> = x.iter().copied().chain([p]).collect();
            let numeric = central_difference(
                |z| layer_loss(z, dim, &up, order_near(p), |_| RadiusParam::Fixed(alpha)),
                &z,
                STEP,
            );
            tally.record(&format!("lp p={p} (x, p)"), relative_error(&analytic, &numeric));

            let learn = LpNormLayer::new(fixed.order, RadiusParam::Learnable { raw: a_raw });
            let mut analytic = lpnorm::grad_wrt_input(&x, &learn, &up);
            analytic.push(lpnorm::grad_wrt_p(&x, p, learn.alpha(), learn.epsilon, &up));
            analytic.push(lpnorm::grad_wrt_alpha(&x, &learn, &up).unwrap());
            let z: Vec<f64> = x.iter().copied().chain([p, a_raw]).collect();
            let numeric = central_difference(
                |z| layer_loss(z, dim, &up, order_near(p), |a| RadiusParam::Learnable { raw: a }),
                &z,
                STEP,
            );
            tally.record(&format!("lp p={p} (x, p, alpha)"), relative_error(&analytic, &numeric));
        }

        let layer = LpNormLayer::new(NormOrder::Learnable { raw: rho }, RadiusParam::Learnable { raw: a_raw });
        let mut analytic = lpnorm::grad_wrt_input(&x, &layer, &up);
        analytic.push(lpnorm::grad_wrt_p_raw(&x, &layer, &up).unwrap());
        analytic.push(lpnorm::grad_wrt_alpha(&x, &layer, &up).unwrap());
        let z: Vec<f64> = x.iter().copied().chain([rho, a_raw]).collect();
        let numeric = central_difference(
            |z| {
                layer_loss(z, dim, &up, |r| NormOrder::Learnable { raw: r }, |a| RadiusParam::Learnable {
                    raw: a,
                })
            },
            &z,
            STEP,
        );
        tally.record("lp learnable (x, p, alpha)", relative_error(&analytic, &numeric));
    }
    tally.finish(TOLERANCE)
}

type Build<'a> = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'a;

fn tape_loss(inputs: &[Tensor], build: &Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &ids)?;
    Ok(tape.value(loss).values()[0])
}

/// Worst relative error over all inputs of a tape-built scalar function.
fn check_tape(inputs: &[Tensor], build: &Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = tape.grad(*id).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[k].numel()]);
        let numeric = central_difference(
            |v| {
                let mut probe = inputs.to_vec();
                probe[k] = Tensor::new(inputs[k].shape().to_vec(), v.to_vec()).unwrap();
                tape_loss(&probe, build).unwrap_or(f64::NAN)
            },
            inputs[k].values(),
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(rng, rows * cols)).unwrap()
}

/// Tape ops (matmul, add_bias, tanh, softmax cross-entropy, lp projection
/// with learnable scalars) and one full classifier, each contracted to a
/// scalar through a random linear read-out.
pub fn tape_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut tally = Tally::default();
    for s in 0..seeds {
        let mut rng = seed::rng(seed::derive(0x7461_7065, s));

        let inputs = [random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 4, 2), random_matrix(&mut rng, 2, 1)];
        let err = check_tape(&inputs, &|t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            let y = t.matmul(y, ids[2])?;
            t.sum(y)
        })?;
        tally.record("tape matmul", err);

        let inputs = [
            random_matrix(&mut rng, 3, 4),
            Tensor::vector(normal_vec(&mut rng, 4)),
            random_matrix(&mut rng, 4, 1),
        ];
        let err = check_tape(&inputs, &|t, ids| {
            let y = t.add_bias(ids[0], ids[1])?;
            let y = t.matmul(y, ids[2])?;
            t.sum(y)
        })?;
        tally.record("tape add_bias", err);

        let inputs = [random_matrix(&mut rng, 2, 5), random_matrix(&mut rng, 5, 1)];
        let err = check_tape(&inputs, &|t, ids| {
            let y = t.tanh(ids[0])?;
            let y = t.matmul(y, ids[1])?;
            t.sum(y)
        })?;
        tally.record("tape tanh", err);

        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let inputs = [random_matrix(&mut rng, 4, 3)];
        let err = check_tape(&inputs, &|t, ids| t.softmax_cross_entropy(ids[0], &labels))?;
        tally.record("tape softmax_cross_entropy", err);

        let layer = LpNormLayer::new(NormOrder::learnable(), RadiusParam::learnable());
        let d = 2 + (s as usize % 15);
        let inputs = [
            random_matrix(&mut rng, 3, d),
            Tensor::scalar(rng.random_range(-2.0..2.0)),
            Tensor::scalar(rng.random_range(-2.0..2.0)),
            random_matrix(&mut rng, d, 1),
        ];
        let err = check_tape(&inputs, &|t, ids| {
            let y = t.lp_normalize(ids[0], &layer, Some(ids[1]), Some(ids[2]))?;
            let y = t.matmul(y, ids[3])?;
            t.sum(y)
        })?;
        tally.record("tape lp_normalize learnable", err);
    }

    // Whole-model check on a handful of seeds; each costs two forwards per
    // parameter.
    for s in 0..seeds.min(5) {
        let mut rng = seed::rng(seed::derive(0x6d6f_6465, s));
        let layer = LpNormLayer::new(NormOrder::learnable(), RadiusParam::learnable());
        let mut model = build_poc(4, Some(layer), s)?;
        let x = random_matrix(&mut rng, 6, 2);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..2)).collect();
        model.zero_grad();
        model.loss_and_accumulate(&x, &labels)?;
        let mut worst = 0.0f64;
        for k in 0..model.params().len() {
            let analytic = model.params()[k].grad.clone();
            let base = model.params()[k].value.clone();
            let numeric = central_difference(
                |v| {
                    let mut probe = model.clone();
                    probe.params_mut()[k].value = Tensor::new(base.shape().to_vec(), v.to_vec()).unwrap();
                    let mut tape = Tape::new();
                    probe
                        .record(&mut tape, &x)
                        .and_then(|r| tape.softmax_cross_entropy(r.logits, &labels))
                        .map(|l| tape.value(l).values()[0])
                        .unwrap_or(f64::NAN)
                },
                base.values(),
                STEP,
            );
            worst = worst.max(relative_error(&analytic, &numeric));
        }
        tally.record("classifier learnable lp", worst);
    }
    Ok(tally.finish(TOLERANCE))
}

/// Everything the `gradcheck` command runs.
pub fn full_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut all = lp_layer_suite(seeds);
    all.extend(tape_suite(seeds)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_of_a_cubic() {
        let g = central_difference(|v| v[0].powi(3) + 2.0 * v[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.0, 1e-3]) - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn order_gradient_alone_with_a_wider_step() {
        // Order gradients can be ~1e-6, where a 1e-5 step is dominated by
        // rounding; a 1e-3 step isolates the order component.
        for s in 0..100 {
            let mut rng = seed::rng(seed::derive(0x6f72_6472, s));
            let dim = 2 + (s as usize % 15);
            let x = normal_vec(&mut rng, dim);
            let up = normal_vec(&mut rng, dim);
            for &p in &FIXED_ORDERS {
                let analytic = lpnorm::grad_wrt_p(&x, p, 1.3, lpnorm::DEFAULT_EPSILON, &up);
                let f = |q: f64| {
                    let l = LpNormLayer::new(NormOrder::General(q), RadiusParam::Fixed(1.3));
                    inner(&up, &lpnorm::normalize_forward(&x, &l))
                };
                let h = 1e-3;
                let numeric = (f(p + h) - f(p - h)) / (2.0 * h);
                assert!(relative_error(&[analytic], &[numeric]) < 1e-5, "seed {s} p {p}");
            }
        }
    }

    #[test]
    fn small_suites_pass() {
        for r in lp_layer_suite(8).into_iter().chain(tape_suite(3).unwrap()) {
            assert!(r.passed(), "{r:?}");
        }
    }
}
