//! Seeded finite-difference checks over every differentiable operation,
//! the composed pair loss, and the model's sub-networks.

use rand::Rng as _;
use rayon::prelude::*;

use crate::autodiff::gradcheck::{check_gradients, GradCheckReport, FD_STEP};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, HeadConfig, HeadKind, ModelBundle, ModelConfig, ParamGroup};
use crate::seed::{derive_indexed, rng, Rng};
use crate::train::pair_loss_graph;

/// Result of checking one operation over a number of random cases.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub report: GradCheckReport,
    /// Draws discarded as ill-conditioned across all cases.
    pub redrawn: usize,
}

/// One seeded case; `None` when the drawn point is too close to a kink or a
/// degenerate normalization for central differences to be meaningful.
type CaseFn = fn(&mut Rng) -> Result<Option<GradCheckReport>>;

/// Smallest allowed `|input|` of any ReLU at a check point. Central
/// differences straddling a kink measure the jump, not the derivative.
pub const RELU_MARGIN: f64 = 1e-3;
/// Smallest allowed standard deviation inside any normalization. Curvature
/// grows like `1/std^3`, so truncation error swamps tighter groups.
pub const MIN_NORM_STD: f64 = 0.05;
/// Draws allowed per case before giving up.
const MAX_DRAWS: usize = 1000;

pub const OPS: &[(&str, CaseFn)] = &[
    ("add", case_add),
    ("mul", case_mul),
    ("scale", case_scale),
    ("sum", case_sum),
    ("mean", case_mean),
    ("relu", case_relu),
    ("reshape", case_reshape),
    ("matmul", case_matmul),
    ("linear", case_linear),
    ("conv1d", case_conv1d),
    ("channel_norm", case_channel_norm),
    ("batch_norm", case_batch_norm),
    ("global_avg_pool", case_gap),
    ("cosine_similarity", case_cosine),
    ("mse", case_mse),
    ("softmax_cross_entropy", case_ce),
    ("pair_loss", case_pair_loss),
    ("encoder", case_encoder),
    ("projector_predictor", case_proj_pred),
    ("head", case_head),
];

/// Runs `cases` seeded cases of every entry in [`OPS`].
pub fn gradcheck_suite(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .map(|&(op, f)| {
            let results: Vec<(GradCheckReport, usize)> = (0..cases)
                .into_par_iter()
                .map(|i| {
                    let mut r = rng(derive_indexed(seed, op, i as u64));
                    for draw in 0..MAX_DRAWS {
                        if let Some(report) = f(&mut r)? {
                            return Ok((report, draw));
                        }
                    }
                    Err(Error::Numeric(format!(
                        "{op}: no well-conditioned point in {MAX_DRAWS} draws"
                    )))
                })
                .collect::<Result<_>>()?;
            let mut report = GradCheckReport::default();
            let mut redrawn = 0;
            for (r, d) in &results {
                report.merge(r);
                redrawn += d;
            }
            Ok(OpCheck {
                op,
                cases,
                report,
                redrawn,
            })
        })
        .collect()
}

/// Values in `±[0.1, 1]`, away from the kinks of piecewise-linear ops.
fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces a tensor-valued op to a scalar with a random fixed cotangent.
fn project(g: &mut Graph<f64>, y: Var, r: &mut Rng) -> Result<Var> {
    let w = rand_tensor(r, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var], &mut Rng) -> Result<Var>,
) -> Result<Option<GradCheckReport>> {
    let probe = |g: &mut Graph<f64>, v: &[Var]| f(g, v, &mut rng(seed));
    if !well_conditioned(inputs, probe)? {
        return Ok(None);
    }
    check_gradients(inputs, FD_STEP, |g, v| f(g, v, &mut rng(seed))).map(Some)
}

/// Evaluates `f` once at `inputs` and checks its margins.
fn well_conditioned(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<bool> {
    let mut g = Graph::new();
    let v: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    f(&mut g, &v)?;
    let (relu, std) = g.smoothness_margins();
    Ok(relu >= RELU_MARGIN && std >= MIN_NORM_STD)
}

fn dims(r: &mut Rng, n: usize, max: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(1..=max)).collect()
}

fn case_add(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 2, 4);
    let (a, b) = (rand_tensor(r, &s), rand_tensor(r, &s));
    check(&[a, b], r.gen(), |g, v, r| {
        let y = g.add(v[0], v[1])?;
        project(g, y, r)
    })
}

fn case_mul(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 2, 4);
    let (a, b) = (rand_tensor(r, &s), rand_tensor(r, &s));
    check(&[a, b], r.gen(), |g, v, r| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, r)
    })
}

fn case_scale(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 2, 4);
    let c = r.gen_range(-2.0..2.0);
    check(&[rand_tensor(r, &s)], r.gen(), |g, v, r| {
        let y = g.scale(v[0], c);
        project(g, y, r)
    })
}

fn case_sum(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 3, 3);
    check(&[rand_tensor(r, &s)], 0, |g, v, _| Ok(g.sum(v[0])))
}

fn case_mean(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 3, 3);
    check(&[rand_tensor(r, &s)], 0, |g, v, _| Ok(g.mean(v[0])))
}

fn case_relu(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 3, 4);
    check(&[rand_tensor(r, &s)], r.gen(), |g, v, r| {
        let y = g.relu(v[0]);
        project(g, y, r)
    })
}

fn case_reshape(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 3, 3);
    check(&[rand_tensor(r, &s)], r.gen(), |g, v, r| {
        let y = g.reshape(v[0], &[s[0] * s[1], s[2]])?;
        project(g, y, r)
    })
}

fn case_matmul(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let d = dims(r, 3, 4);
    let (a, b) = (rand_tensor(r, &[d[0], d[1]]), rand_tensor(r, &[d[1], d[2]]));
    check(&[a, b], r.gen(), |g, v, r| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, r)
    })
}

fn case_linear(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let d = dims(r, 3, 4);
    let x = rand_tensor(r, &[d[0], d[1]]);
    let w = rand_tensor(r, &[d[2], d[1]]);
    let b = rand_tensor(r, &[d[2]]);
    check(&[x, w, b], r.gen(), |g, v, r| {
        let y = g.linear(v[0], v[1], v[2])?;
        project(g, y, r)
    })
}

fn case_conv1d(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let (b, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let k = r.gen_range(1..=5);
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..=k / 2);
    let len = r.gen_range(k..=k + 6);
    let x = rand_tensor(r, &[b, ci, len]);
    let w = rand_tensor(r, &[co, ci, k]);
    check(&[x, w], r.gen(), |g, v, r| {
        let y = g.conv1d(v[0], v[1], stride, pad)?;
        project(g, y, r)
    })
}

fn case_channel_norm(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let (b, c) = (r.gen_range(1..=3), r.gen_range(2..=4));
    let shape = if r.gen_bool(0.5) {
        vec![b, c]
    } else {
        vec![b, c, r.gen_range(2..=5)]
    };
    let x = rand_tensor(r, &shape);
    let (gamma, beta) = (rand_tensor(r, &[c]), rand_tensor(r, &[c]));
    check(&[x, gamma, beta], r.gen(), |g, v, r| {
        let y = g.channel_norm(v[0], v[1], v[2])?;
        project(g, y, r)
    })
}

fn case_batch_norm(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let (b, c) = (r.gen_range(2..=5), r.gen_range(1..=4));
    let x = rand_tensor(r, &[b, c]);
    let (gamma, beta) = (rand_tensor(r, &[c]), rand_tensor(r, &[c]));
    check(&[x, gamma, beta], r.gen(), |g, v, r| {
        let y = g.batch_norm(v[0], v[1], v[2])?;
        project(g, y, r)
    })
}

fn case_gap(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 3, 4);
    check(&[rand_tensor(r, &s)], r.gen(), |g, v, r| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, r)
    })
}

fn case_cosine(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let (b, d) = (r.gen_range(1..=3), r.gen_range(2..=6));
    let (a, c) = (rand_tensor(r, &[b, d]), rand_tensor(r, &[b, d]));
    check(&[a, c], r.gen(), |g, v, r| {
        let y = g.cosine_similarity(v[0], v[1])?;
        project(g, y, r)
    })
}

fn case_mse(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let s = dims(r, 2, 4);
    let target = rand_tensor(r, &s).into_data();
    check(&[rand_tensor(r, &s)], 0, |g, v, _| g.mse(v[0], &target))
}

fn case_ce(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let (b, k) = (r.gen_range(1..=4), r.gen_range(2..=4));
    let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
    check(&[rand_tensor(r, &[b, k])], 0, |g, v, _| {
        g.softmax_cross_entropy(v[0], &labels)
    })
}

fn case_pair_loss(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let (b, d) = (r.gen_range(1..=3), r.gen_range(2..=6));
    let (p1, p2) = (rand_tensor(r, &[b, d]), rand_tensor(r, &[b, d]));
    let (z1, z2) = (rand_tensor(r, &[b, d]), rand_tensor(r, &[b, d]));
    // Targets sit behind a stop-gradient, so only predictions are perturbed.
    check(&[p1, p2], 0, |g, v, _| {
        let (z1, z2) = (g.constant(z1.clone()), g.constant(z2.clone()));
        pair_loss_graph(g, v[0], z1, v[1], z2)
    })
}

fn tiny_bundle(r: &mut Rng, head: Option<HeadConfig>) -> Result<ModelBundle<f64>> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            n_blocks: 2,
            base_channels: 2,
            embedding_dim: 8,
            input_length: 16,
        },
        z_dim: 8,
        head,
    };
    let mut m = ModelBundle::<f64>::init(config, r.gen())?;
    // Non-zero biases keep hidden units active.
    for p in m.params_mut() {
        if p.name.ends_with(".b") {
            let t = rand_tensor(r, p.value.shape());
            p.value = t;
        }
    }
    Ok(m)
}

/// Checks gradients of a bundle-level function with respect to every
/// parameter of the selected groups and to the extra inputs.
fn check_bundle(
    m: &ModelBundle<f64>,
    groups: &[ParamGroup],
    extra: &[Tensor<f64>],
    f: impl Fn(&ModelBundle<f64>, &mut Graph<f64>, &crate::model::Bound, &[Var]) -> Result<Var>,
) -> Result<Option<GradCheckReport>> {
    let names: Vec<String> = m
        .params()
        .iter()
        .filter(|p| groups.contains(&p.group()))
        .map(|p| p.name.clone())
        .collect();
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.param(n).unwrap().clone()).collect();
    inputs.extend_from_slice(extra);
    let run = |g: &mut Graph<f64>, v: &[Var]| {
        let mut b = m.bind(g, |_| false);
        for (n, t) in names.iter().zip(v) {
            b.rebind(n, *t);
        }
        f(m, g, &b, &v[names.len()..])
    };
    if !well_conditioned(&inputs, run)? {
        return Ok(None);
    }
    check_gradients(&inputs, FD_STEP, run).map(Some)
}

fn case_encoder(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let m = tiny_bundle(r, None)?;
    let x = rand_tensor(r, &[2, 1, 16]);
    let seed: u64 = r.gen();
    check_bundle(&m, &[ParamGroup::Encoder], &[x], |m, g, b, v| {
        let h = m.encode_graph(g, b, v[0])?;
        project(g, h, &mut rng(seed))
    })
}

fn case_proj_pred(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let m = tiny_bundle(r, None)?;
    let h = rand_tensor(r, &[3, 8]);
    let seed: u64 = r.gen();
    check_bundle(
        &m,
        &[ParamGroup::Projector, ParamGroup::Predictor],
        &[h],
        |m, g, b, v| {
            let z = m.project_graph(g, b, v[0])?;
            let p = m.predict_graph(g, b, z)?;
            project(g, p, &mut rng(seed))
        },
    )
}

fn case_head(r: &mut Rng) -> Result<Option<GradCheckReport>> {
    let kind = if r.gen_bool(0.5) {
        HeadKind::Regression
    } else {
        HeadKind::BinaryClassification
    };
    let m = tiny_bundle(r, Some(HeadConfig::new(kind)))?;
    let h = rand_tensor(r, &[3, 8]);
    let seed: u64 = r.gen();
    check_bundle(&m, &[ParamGroup::Head], &[h], |m, g, b, v| {
        let out = m.head_graph(g, b, v[0], kind)?;
        project(g, out, &mut rng(seed))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_near_kinks_or_flat_groups_are_rejected() {
        let relu = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.relu(v[0]);
            Ok(g.sum(y))
        };
        let near = Tensor::new(vec![2], vec![0.5, 1e-4]).unwrap();
        let far = Tensor::new(vec![2], vec![0.5, -0.2]).unwrap();
        assert!(!well_conditioned(&[near], relu).unwrap());
        assert!(well_conditioned(&[far], relu).unwrap());

        let flat = Tensor::new(vec![2, 2], vec![0.3, 0.3, 0.3, 0.31]).unwrap();
        let norm = |g: &mut Graph<f64>, v: &[Var]| {
            let one = g.constant(Tensor::full(&[2], 1.0));
            let zero = g.constant(Tensor::zeros(&[2]));
            let y = g.batch_norm(v[0], one, zero)?;
            Ok(g.sum(y))
        };
        assert!(!well_conditioned(&[flat], norm).unwrap());
    }

    #[test]
    fn suite_passes_on_a_few_cases() {
        for c in gradcheck_suite(5, 11).unwrap() {
            assert!(c.report.n_checked > 0, "{}", c.op);
            assert!(c.report.max_rel_error < 1e-4, "{}: {:?}", c.op, c.report);
        }
    }
}
