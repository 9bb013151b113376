//! Central finite differences against the tape's analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{prepare, scene_index, Conditions, Gammas, Model, Sample};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamId;
use crate::scenegen::{derive_seed, Dataset};
use crate::tensor::{Mat, Tape};

pub const MAX_BATCH: usize = 4;
pub const MAX_PROPOSALS: usize = 8;
/// Denominator floor of the relative error; tensors whose analytic and
/// numeric gradients are both below it compare as absolute differences.
const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradGroup {
    pub name: String,
    pub entries: usize,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub groups: Vec<GradGroup>,
    pub max_rel_err: f64,
    pub worst: String,
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(NORM_FLOOR)
}

fn analytic_grads(model: &Model, batch: &[&Sample], cfg: &TrainConfig) -> Result<Vec<Mat>> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let nodes = model.forward_batch(&mut tape, &p, batch, cfg)?;
    let total = model.total(&mut tape, &nodes, &Gammas::of(cfg));
    let grads = tape.backward(total);
    Ok(model.store.ids().map(|id| grads.get_or_zeros(p.var(id), model.store.get(id).shape())).collect())
}

fn loss_value(model: &Model, batch: &[&Sample], cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let nodes = model.forward_batch(&mut tape, &p, batch, cfg)?;
    let total = model.total(&mut tape, &nodes, &Gammas::of(cfg));
    Ok(tape.scalar(total))
}

/// Checks the total loss of the freshly initialized model on up to four
/// utterances with at most eight proposals. `cfg.gradcheck_entries` bounds
/// the entries probed per tensor (0 checks every entry).
pub fn grad_check(cfg: &TrainConfig, ds: &Dataset, eps: f64) -> Result<GradReport> {
    let cfg = TrainConfig { proposals: cfg.proposals.min(MAX_PROPOSALS), ..cfg.clone() };
    cfg.validate()?;
    let index = scene_index(ds);
    let mut samples = Vec::new();
    for u in &ds.utterances {
        if samples.len() == MAX_BATCH.min(cfg.batch_size) {
            break;
        }
        let scene = index.get(u.scene_id.as_str()).ok_or_else(|| Error::Config(format!("unknown scene `{}`", u.scene_id)))?;
        if scene.objects.len() <= cfg.proposals {
            samples.push(prepare(scene, u, &cfg, Conditions::of(&cfg), 0)?);
        }
    }
    if samples.is_empty() {
        return Err(Error::Empty("gradient-check batch"));
    }
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut model = Model::new(&cfg);
    let analytic = analytic_grads(&model, &batch, &cfg)?;
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck", 0));
    let mut groups = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        let len = model.store.get(id).data.len();
        let entries: Vec<usize> = if cfg.gradcheck_entries == 0 || cfg.gradcheck_entries >= len {
            (0..len).collect()
        } else {
            let mut e = sample(&mut rng, len, cfg.gradcheck_entries).into_vec();
            e.sort_unstable();
            e
        };
        let mut a = Vec::with_capacity(entries.len());
        let mut n = Vec::with_capacity(entries.len());
        for &e in &entries {
            let orig = model.store.get(id).data[e];
            model.store.get_mut(id).data[e] = orig + eps;
            let up = loss_value(&model, &batch, &cfg)?;
            model.store.get_mut(id).data[e] = orig - eps;
            let down = loss_value(&model, &batch, &cfg)?;
            model.store.get_mut(id).data[e] = orig;
            a.push(analytic[k].data[e]);
            n.push((up - down) / (2.0 * eps));
        }
        groups.push(GradGroup { name: model.store.name(id).to_string(), entries: entries.len(), rel_err: rel_err(&a, &n) });
    }
    let worst = groups.iter().max_by(|x, y| x.rel_err.total_cmp(&y.rel_err)).expect("at least one tensor");
    Ok(GradReport { max_rel_err: worst.rel_err, worst: worst.name.clone(), groups })
}

/// `f(x) = Σ (x A) ⊙ x + Σ b ⊙ x` for a random 5×3 `x`; central differences are
/// exact on quadratics, so the error is pure roundoff.
pub fn quadratic_probe(seed: u64, eps: f64) -> f64 {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_mat = |r: usize, c: usize| Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (x0, a, b) = (rand_mat(5, 3), rand_mat(3, 3), rand_mat(5, 3));
    let f = |x: &Mat| -> (f64, Mat) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let xa = tape.matmul(xv, av);
        let q = tape.mul(xa, xv);
        let l = tape.mul(bv, xv);
        let s = tape.add(q, l);
        let total = tape.sum(s);
        let g = tape.backward(total).get_or_zeros(xv, x.shape());
        (tape.scalar(total), g)
    };
    let (_, analytic) = f(&x0);
    let mut numeric = Vec::with_capacity(x0.data.len());
    for i in 0..x0.data.len() {
        let mut up = x0.clone();
        up.data[i] += eps;
        let mut down = x0.clone();
        down.data[i] -= eps;
        numeric.push((f(&up).0 - f(&down).0) / (2.0 * eps));
    }
    rel_err(&analytic.data, &numeric)
}
