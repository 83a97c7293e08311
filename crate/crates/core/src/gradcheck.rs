//! Finite-difference verification of every differentiable operation and of
//! a complete small model.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, AttentionMask, Tape, Tensor, TensorError, Var};
use crate::error::Result;
use crate::model::{param_specs, ModelConfig, ModelWeights};
use crate::objectives::{loss_cont, loss_rel, reinforce_surrogate, segment_sums, total_loss, Terms};
use crate::tokenizer::{EOS, SUM};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst error of one check over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], range: Range<f64>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(range.clone())).collect()).expect("shape matches")
}

/// Reduces `y` to a scalar with fixed random weights so that no output
/// coordinate cancels against another.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> std::result::Result<Var, TensorError> {
    let wv = tape.leaf(w);
    let shaped = tape.reshape(wv, tape.shape(y).to_vec())?;
    let p = tape.mul(y, shaped)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> std::result::Result<Var, TensorError>>;

/// Every op as a function of one input, with the other operands fixed.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, OpFn)> {
    let mut r = |shape: &[usize]| rand_tensor(rng, shape, -1.0..1.0);
    let a = r(&[3, 4]);
    let b = r(&[4, 5]);
    let bias = r(&[4]);
    let other = r(&[3, 4]);
    let vec4 = r(&[4]);
    let vec4b = r(&[4]);
    let emb = r(&[6, 4]);
    let gamma = r(&[4]);
    let sq = r(&[4, 4]);
    let w12 = r(&[12]);
    let w15 = r(&[15]);
    let w16 = r(&[16]);
    let w6 = r(&[6]);
    let w8 = r(&[8]);
    let w4 = r(&[4]);
    let w2 = r(&[2]);
    let w1 = r(&[1]);
    let probs = rand_tensor(rng, &[3], 0.05..0.95);
    let labels = [1.0, 0.0, 1.0];
    let mask = AttentionMask::prefix_segments(2, &[1, 1]);

    let c = |t: &Tensor| t.clone();
    let mut cases: Vec<(&'static str, Tensor, OpFn)> = Vec::new();
    {
        let (b_, w) = (c(&b), c(&w15));
        cases.push(("matmul.lhs", c(&a), Box::new(move |t, x| {
            let bv = t.leaf(&b_);
            let y = t.matmul(x, bv)?;
            project(t, y, &w)
        })));
    }
    {
        let (a_, w) = (c(&a), c(&w15));
        cases.push(("matmul.rhs", c(&b), Box::new(move |t, x| {
            let av = t.leaf(&a_);
            let y = t.matmul(av, x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w12);
        cases.push(("transpose", c(&a), Box::new(move |t, x| {
            let y = t.transpose(x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w12);
        cases.push(("reshape", c(&a), Box::new(move |t, x| {
            let y = t.reshape(x, vec![2, 6])?;
            project(t, y, &w)
        })));
    }
    {
        let (o, w) = (c(&other), c(&w12));
        cases.push(("add", c(&a), Box::new(move |t, x| {
            let ov = t.leaf(&o);
            let y = t.add(x, ov)?;
            let y = t.add(y, x)?;
            project(t, y, &w)
        })));
    }
    {
        let (a_, w) = (c(&a), c(&w12));
        cases.push(("add_bias", c(&bias), Box::new(move |t, x| {
            let av = t.leaf(&a_);
            let y = t.add_bias(av, x)?;
            project(t, y, &w)
        })));
    }
    {
        let (o, w) = (c(&other), c(&w12));
        cases.push(("mul", c(&a), Box::new(move |t, x| {
            let ov = t.leaf(&o);
            let y = t.mul(x, ov)?;
            let y = t.mul(y, x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w12);
        cases.push(("scale", c(&a), Box::new(move |t, x| {
            let y = t.scale(x, -1.7)?;
            project(t, y, &w)
        })));
    }
    {
        let (v, w) = (c(&vec4b), c(&w8));
        cases.push(("concat", c(&vec4), Box::new(move |t, x| {
            let vv = t.leaf(&v);
            let y = t.concat(&[vv, x])?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w6);
        cases.push(("slice_cols", c(&a), Box::new(move |t, x| {
            let y = t.slice_cols(x, 1, 3)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w16);
        cases.push(("gather_rows", c(&a), Box::new(move |t, x| {
            let y = t.gather_rows(x, &[2, 0, 2, 1])?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w16);
        cases.push(("embedding", c(&emb), Box::new(move |t, x| {
            let y = t.embedding(x, &[5, 1, 5, 0])?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w12);
        cases.push(("softmax", c(&a), Box::new(move |t, x| {
            let y = t.softmax(x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w16);
        cases.push(("masked_softmax", c(&sq), Box::new(move |t, x| {
            let y = t.masked_softmax(x, &mask)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w12);
        cases.push(("log_softmax", c(&a), Box::new(move |t, x| {
            let y = t.log_softmax(x)?;
            project(t, y, &w)
        })));
    }
    {
        let (g, bb, w) = (c(&gamma), c(&bias), c(&w12));
        cases.push(("layer_norm.x", c(&a), Box::new(move |t, x| {
            let gv = t.leaf(&g);
            let bv = t.leaf(&bb);
            let y = t.layer_norm(x, gv, bv)?;
            project(t, y, &w)
        })));
    }
    {
        let (a_, bb, w) = (c(&a), c(&bias), c(&w12));
        cases.push(("layer_norm.gamma", c(&gamma), Box::new(move |t, x| {
            let av = t.leaf(&a_);
            let bv = t.leaf(&bb);
            let y = t.layer_norm(av, x, bv)?;
            project(t, y, &w)
        })));
    }
    {
        let (a_, g, w) = (c(&a), c(&gamma), c(&w12));
        cases.push(("layer_norm.beta", c(&bias), Box::new(move |t, x| {
            let av = t.leaf(&a_);
            let gv = t.leaf(&g);
            let y = t.layer_norm(av, gv, x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w12);
        cases.push(("gelu", c(&a), Box::new(move |t, x| {
            let y = t.gelu(x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w12);
        cases.push(("tanh", c(&a), Box::new(move |t, x| {
            let y = t.tanh(x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w12);
        cases.push(("sigmoid", c(&a), Box::new(move |t, x| {
            let y = t.sigmoid(x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w4);
        cases.push(("mean_rows", c(&a), Box::new(move |t, x| {
            let y = t.mean_rows(x)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w1);
        cases.push(("sum", c(&a), Box::new(move |t, x| {
            let y = t.sum(x)?;
            project(t, y, &w)
        })));
    }
    {
        let (v, w) = (c(&vec4b), c(&w1));
        cases.push(("cosine", c(&vec4), Box::new(move |t, x| {
            let vv = t.leaf(&v);
            let y = t.cosine(x, vv)?;
            project(t, y, &w)
        })));
    }
    {
        let w = c(&w2);
        cases.push(("target_log_prob", c(&a), Box::new(move |t, x| {
            let rows = t.slice_cols(x, 0, 4)?;
            let g = t.gather_rows(rows, &[0, 2])?;
            let y = t.target_log_prob(g, &[3, 0])?;
            project(t, y, &w)
        })));
    }
    cases.push(("cross_entropy", c(&a), Box::new(|t, x| t.cross_entropy(x, &[1, 3, 0]))));
    cases.push(("bce", probs, Box::new(move |t, x| t.bce(x, &labels))));
    cases
}

/// Worst error per op over `seeds`.
pub fn check_ops(seeds: &[u64], eps: f64) -> Result<Vec<CheckResult>> {
    let mut results: Vec<CheckResult> = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, (name, x, f)) in op_cases(&mut rng).into_iter().enumerate() {
            let err = grad_check::<_, TensorError>(|t, v| f(t, v), &x, eps)?;
            if results.len() <= i {
                results.push(CheckResult { name: name.to_string(), max_error: 0.0 });
            }
            results[i].max_error = results[i].max_error.max(err);
        }
    }
    Ok(results)
}

/// Cross-entropy through the fused op against the same loss composed from
/// `log_softmax` and a fixed one-hot weighting.
pub fn check_softmax_cross_entropy(seeds: &[u64], eps: f64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 5], -2.0..2.0);
        let targets = [rng.gen_range(0..5), rng.gen_range(0..5), rng.gen_range(0..5)];
        let mut onehot = Tensor::zeros(&[3, 5]);
        for (r, &c) in targets.iter().enumerate() {
            onehot.data_mut()[r * 5 + c] = -1.0 / 3.0;
        }
        let composed = |t: &mut Tape, v: Var| {
            let ls = t.log_softmax(v)?;
            project(t, ls, &onehot)
        };
        let fused = |t: &mut Tape, v: Var| t.cross_entropy(v, &targets);
        worst = worst.max(grad_check::<_, TensorError>(fused, &x, eps)?);
        worst = worst.max(grad_check::<_, TensorError>(composed, &x, eps)?);
    }
    Ok(CheckResult { name: "softmax+cross_entropy".into(), max_error: worst })
}

fn model_loss(w: &ModelWeights, tape: &mut Tape, b: &mut crate::model::Bound, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let v = w.config.vocab_size;
    let mut word = || rng.gen_range(11..v);
    let prompt = vec![3, word(), word(), 4, word(), word(), SUM];
    let gold = vec![word(), word(), EOS];
    let sample = vec![word(), word()];
    let (tab_a, tab_b, query) = (vec![7, word(), 8, word(), 9, word()], vec![7, word(), 9, word()], vec![3, word(), word()]);

    let (lp, ranges) = w.packed_sample_log_probs(tape, b, &prompt, &[&gold, &sample])?;
    let gold_lp = segment_sums(tape, lp, &ranges[..1])?;
    let gen_sum = tape.sum(gold_lp)?;
    let gen = tape.scale(gen_sum, -1.0 / gold.len() as f64)?;
    let sample_lp = segment_sums(tape, lp, &ranges[1..])?;
    let rl = reinforce_surrogate(tape, sample_lp, &[0.7], 0.2)?;

    let pa = w.pool(tape, b, &tab_a)?;
    let pb = w.pool(tape, b, &tab_b)?;
    let pq = w.pool(tape, b, &query)?;
    let p1 = w.relation_prob(tape, b, pa, pb)?;
    let p2 = w.relation_prob(tape, b, pb, pa)?;
    let rel = loss_rel(tape, &[p1, p2], &[true, false])?;
    let h = w.hidden_causal(tape, b, &tab_a)?;
    let logits = w.logits_at(tape, b, h, &[1, 3])?;
    let mask = tape.cross_entropy(logits, &[word(), word()])?;
    let fp = tape.cosine(pq, pa)?;
    let fn_ = tape.cosine(pq, pb)?;
    let cont = loss_cont(tape, fp, fn_, 0.5)?;
    let terms = Terms { gen: Some(gen), mask: Some(mask), rel: Some(rel), cont: Some(cont), rl: Some(rl) };
    Ok(total_loss(tape, &terms, [1.0, 0.5, 0.5, 0.5])?.0)
}

pub fn gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig { vocab_size: 16, d_model: 8, layers: 1, heads: 2, ffn: 12, max_len: 16, seed }
}

/// Every parameter tensor of a one-block model under the combined
/// objective, with random weights per seed.
pub fn check_model(seeds: &[u64], eps: f64) -> Result<Vec<CheckResult>> {
    let specs = param_specs(&gradcheck_config(0));
    let mut results: Vec<CheckResult> =
        specs.iter().map(|(n, _)| CheckResult { name: format!("model.{n}"), max_error: 0.0 }).collect();
    for &seed in seeds {
        let mut w = ModelWeights::init(gradcheck_config(seed))?;
        // Non-trivial gains, biases and relation head.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        for p in &mut w.params {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        for (i, r) in results.iter_mut().enumerate() {
            let x = w.params[i].clone();
            let f = |tape: &mut Tape, xv: Var| -> Result<Var> {
                let mut b = w.bind(tape);
                b.vars[i] = xv;
                model_loss(&w, tape, &mut b, seed)
            };
            r.max_error = r.max_error.max(grad_check(f, &x, eps)?);
        }
    }
    Ok(results)
}

/// All checks: each op, the fused cross-entropy, and the full model.
pub fn run_all(seeds: &[u64], eps: f64) -> Result<Vec<CheckResult>> {
    let mut out = check_ops(seeds, eps)?;
    out.push(check_softmax_cross_entropy(seeds, eps)?);
    out.extend(check_model(seeds, eps)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_on_two_seeds() {
        for r in check_ops(&[1, 2], EPS).unwrap() {
            assert!(r.passed(TOLERANCE), "{r:?}");
        }
    }

    #[test]
    fn model_passes_on_one_seed() {
        for r in check_model(&[3], EPS).unwrap() {
            assert!(r.passed(TOLERANCE), "{r:?}");
        }
    }

    #[test]
    fn broken_gradient_is_detected() {
        let x = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        // d/dx of x*x through a detached copy sees only one factor.
        let err = grad_check::<_, TensorError>(
            |t, v| {
                let c = t.leaf(&t.to_tensor(v));
                let y = t.mul(v, c)?;
                t.sum(y)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
