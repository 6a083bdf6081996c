//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use pivot_distill::autodiff::{Graph, NodeId};
use pivot_distill::gradcheck::numeric_gradient;
use pivot_distill::model::{ModelDims, ModelParams};
use pivot_distill::objectives::{
    loss_from_targets, mle_loss, teacher_targets, DistillBatchLoss, Pair, ParamMask, TeacherTarget, TeachingMethod,
};
use pivot_distill::vocab::TokenSequence;
use pivot_distill::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;

/// Denominator floor of [`rel_err`]. Central differences at `EPS` on losses
/// of order 10 carry about 1e-10 of rounding noise, so coordinates whose
/// gradient is far below this are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(REL_ERR_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// `(min, max)` input range per operation argument.
type Range = (f64, f64);

/// Checks one graph operation: the loss is the operation's output weighted
/// by fixed random coefficients, differentiated with respect to every input.
pub fn op_check<F>(shapes: &[(&[usize], Range)], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|(s, (lo, hi))| {
            let n: usize = s.iter().product();
            Tensor::new(s, (0..n).map(|_| rng.gen_range(*lo..*hi)).collect()).unwrap()
        })
        .collect();
    let eval = |ins: &[Tensor], with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids)?;
        let shape = g.value(out).shape().to_vec();
        let n = g.value(out).len();
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = g.constant(Tensor::new(
            &shape,
            (0..n).map(|_| wrng.gen_range(-1.0..1.0)).collect(),
        )?);
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).item()?;
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let flat = ids
            .iter()
            .zip(ins)
            .flat_map(|(&id, t)| grads.get(id).map_or(vec![0.0; t.len()], |g| g.data().to_vec()))
            .collect();
        Ok((value, flat))
    };
    let (_, analytic) = eval(&inputs, true).unwrap();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = numeric_gradient(
        |p| {
            let mut off = 0;
            let ins: Vec<Tensor> = inputs
                .iter()
                .map(|t| {
                    let s = Tensor::new(t.shape(), p[off..off + t.len()].to_vec()).unwrap();
                    off += t.len();
                    s
                })
                .collect();
            Ok(eval(&ins, false)?.0)
        },
        &flat,
        EPS,
    )
    .unwrap();
    max_rel_err(&analytic, &numeric)
}

const ANY: Range = (-1.5, 1.5);
const POS: Range = (0.3, 2.0);

/// Maximum relative gradient error of every tape operation.
pub fn all_op_checks() -> Vec<(&'static str, f64)> {
    vec![
        (
            "matmul",
            op_check(&[(&[2, 3], ANY), (&[3, 4], ANY)], 1, |g, x| g.matmul(x[0], x[1])),
        ),
        (
            "add",
            op_check(&[(&[2, 3], ANY), (&[2, 3], ANY)], 2, |g, x| g.add(x[0], x[1])),
        ),
        (
            "add_broadcast",
            op_check(&[(&[2, 3], ANY), (&[1], ANY)], 3, |g, x| g.add(x[0], x[1])),
        ),
        (
            "sub",
            op_check(&[(&[3, 2], ANY), (&[3, 2], ANY)], 4, |g, x| g.sub(x[0], x[1])),
        ),
        (
            "mul",
            op_check(&[(&[2, 3], ANY), (&[2, 3], ANY)], 5, |g, x| g.mul(x[0], x[1])),
        ),
        (
            "mul_broadcast",
            op_check(&[(&[1], ANY), (&[2, 2], ANY)], 6, |g, x| g.mul(x[0], x[1])),
        ),
        ("tanh", op_check(&[(&[2, 3], ANY)], 7, |g, x| g.tanh(x[0]))),
        ("sigmoid", op_check(&[(&[2, 3], ANY)], 8, |g, x| g.sigmoid(x[0]))),
        ("exp", op_check(&[(&[2, 3], ANY)], 9, |g, x| g.exp(x[0]))),
        ("log", op_check(&[(&[2, 3], POS)], 10, |g, x| g.log(x[0]))),
        ("scale", op_check(&[(&[2, 3], ANY)], 11, |g, x| g.scale(x[0], -2.5))),
        ("softmax", op_check(&[(&[2, 4], ANY)], 12, |g, x| g.softmax(x[0]))),
        (
            "log_softmax",
            op_check(&[(&[3, 4], ANY)], 13, |g, x| g.log_softmax(x[0])),
        ),
        (
            "gather_rows",
            op_check(&[(&[4, 3], ANY)], 14, |g, x| g.gather_rows(x[0], &[2, 0, 2, 3])),
        ),
        (
            "concat_cols",
            op_check(&[(&[2, 3], ANY), (&[2, 1], ANY)], 15, |g, x| {
                g.concat_cols(&[x[0], x[1], x[0]])
            }),
        ),
        (
            "concat_rows",
            op_check(&[(&[1, 3], ANY), (&[2, 3], ANY)], 16, |g, x| {
                g.concat_rows(&[x[0], x[1]])
            }),
        ),
        (
            "slice_cols",
            op_check(&[(&[2, 5], ANY)], 17, |g, x| g.slice_cols(x[0], 1, 4)),
        ),
        (
            "repeat_rows",
            op_check(&[(&[1, 3], ANY)], 18, |g, x| g.repeat_rows(x[0], 4)),
        ),
        (
            "reshape",
            op_check(&[(&[2, 3], ANY)], 19, |g, x| g.reshape(x[0], &[3, 2])),
        ),
        ("sum", op_check(&[(&[2, 3], ANY)], 20, |g, x| g.sum(x[0]))),
        ("pick", op_check(&[(&[2, 3], ANY)], 21, |g, x| g.pick(x[0], 4))),
        (
            "composite",
            op_check(&[(&[2, 3], ANY), (&[3, 3], ANY)], 22, |g, x| {
                let h = g.matmul(x[0], x[1])?;
                let t = g.tanh(h)?;
                let s = g.sigmoid(h)?;
                let m = g.mul(t, s)?;
                g.log_softmax(m)
            }),
        ),
    ]
}

/// Vocabulary of the gradient-check models: the four reserved ids plus
/// `words` ordinary tokens.
pub fn tiny_model(seed: u64, words: usize, emb: usize, hidden: usize, scale: f64) -> ModelParams {
    let v = 4 + words;
    let dims = ModelDims::new(v, v, emb, hidden).unwrap();
    ModelParams::random_scaled(dims, scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Random sentences over the ordinary ids `4..vocab`.
pub fn random_sentences(rng: &mut impl Rng, n: usize, vocab: usize, max_len: usize) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| rng.gen_range(4..vocab as u32)).collect()
        })
        .collect()
}

pub fn random_pairs(seed: u64, n: usize, vocab: usize, max_len: usize) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = random_sentences(&mut rng, n, vocab, max_len);
    let ys = random_sentences(&mut rng, n, vocab, max_len);
    xs.into_iter().zip(ys).collect()
}

/// Maximum relative error of a method's batch-loss gradient with respect to
/// the student, teacher targets held fixed. Returns the error and the number
/// of pairs that contributed.
pub fn loss_check(method: TeachingMethod, seed: u64) -> (f64, usize) {
    let student = tiny_model(seed, 4, 3, 3, 0.8);
    let teacher = tiny_model(seed + 100, 4, 3, 3, 1.5);
    let batch = random_pairs(seed + 200, 3, 8, 3);
    let mask = ParamMask::all();
    let sources: Vec<&TokenSequence> = batch.iter().map(|(x, _)| x).collect();
    let targets: Vec<TeacherTarget> = if method == TeachingMethod::Mle {
        Vec::new()
    } else {
        let refs: Vec<&Pair> = batch.iter().collect();
        teacher_targets(&teacher, &refs, method, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    let compute = |s: &ModelParams| -> Result<DistillBatchLoss> {
        if method == TeachingMethod::Mle {
            mle_loss(s, &batch, &mask)
        } else {
            loss_from_targets(s, &sources, &targets, method, &mask)
        }
    };
    let loss = compute(&student).unwrap();
    let analytic = loss.grads.flatten(&student);
    let numeric = numeric_gradient(
        |p| {
            let mut s = student.clone();
            s.set_flat(p)?;
            Ok(compute(&s)?.loss)
        },
        &student.flatten(),
        EPS,
    )
    .unwrap();
    (max_rel_err(&analytic, &numeric), loss.pairs)
}

/// Random model over `words` ordinary tokens with independently drawn
/// source and target sizes.
pub fn random_model(seed: u64, src_words: usize, tgt_words: usize, hidden: usize, scale: f64) -> ModelParams {
    let dims = ModelDims::new(4 + src_words, 4 + tgt_words, hidden, hidden).unwrap();
    ModelParams::random_scaled(dims, scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Number of random cases where width-1 beam search and greedy decoding
/// disagree on the tokens.
pub fn beam1_greedy_mismatches(cases: u64) -> usize {
    use pivot_distill::model::{beam_search, default_max_len, greedy_decode};
    (0..cases)
        .filter(|&c| {
            let m = random_model(1000 + c, 5, 3 + (c as usize % 4), 4, 1.0 + (c % 3) as f64);
            let mut rng = ChaCha8Rng::seed_from_u64(c);
            let x = &random_sentences(&mut rng, 1, 9, 5)[0];
            let max_len = default_max_len(x.len());
            let beam = beam_search(&m, x, 1, max_len).unwrap().swap_remove(0).tokens;
            beam != greedy_decode(&m, x, max_len).unwrap()
        })
        .count()
}

/// Number of random cases where an exhaustive-width beam disagrees with the
/// argmax of full enumeration, on three output symbols and three steps.
pub fn exhaustive_beam_mismatches(cases: u64) -> usize {
    use pivot_distill::evaluation::enumerate_outcomes;
    use pivot_distill::model::beam_search;
    let max_len = 3;
    (0..cases)
        .filter(|&c| {
            // tgt vocab = 4 reserved + 1 word; outputs are EOS, UNK and the word
            let m = random_model(2000 + c, 3, 1, 3, 2.0);
            assert_eq!(m.dims().output_size(), 3);
            let mut rng = ChaCha8Rng::seed_from_u64(c);
            let x = &random_sentences(&mut rng, 1, 7, 4)[0];
            let outcomes = enumerate_outcomes(&m, x, max_len).unwrap();
            let best = outcomes
                .iter()
                .max_by(|a, b| a.log_prob.partial_cmp(&b.log_prob).unwrap())
                .unwrap();
            let top = beam_search(&m, x, 27, max_len).unwrap().swap_remove(0);
            top.tokens != best.tokens || (top.log_prob - best.log_prob).abs() > 1e-12
        })
        .count()
}

/// Sampling estimate of `E_{y ~ P_T(.|z)}[-log P_S(y|x)]`, its standard
/// error, and the enumerated value, on a model with four output symbols.
pub fn expectation_oracle(samples: usize, seed: u64) -> (f64, f64, f64) {
    use pivot_distill::evaluation::{exact_expected_nll, outcome_log_prob};
    use pivot_distill::model::sample_decode;
    let max_len = 3;
    let teacher = random_model(seed, 3, 2, 4, 1.5);
    let student = random_model(seed + 1, 3, 2, 4, 1.5);
    assert_eq!(teacher.dims().output_size(), 4);
    let (x, z) = (vec![4, 6, 5], vec![5, 4]);
    let exact = exact_expected_nll(&student, &teacher, &x, &z, max_len).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let values: Vec<f64> = (0..samples)
        .map(|_| {
            let (y, _) = sample_decode(&teacher, &z, max_len, &mut rng).unwrap();
            -outcome_log_prob(&student, &x, &y, max_len).unwrap()
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt(), exact)
}

/// `(word KL of a model against itself, |CE - H - KL|, |sum of k-best weights - 1|)`.
pub fn distillation_identities() -> (f64, f64, f64) {
    use pivot_distill::evaluation::{measure_j_word, word_kl, KlApprox};
    use pivot_distill::model::{beam_search, default_max_len};
    use pivot_distill::objectives::{kbest_renormalize, teacher_distributions, weighted_example};
    let teacher = random_model(31, 6, 6, 5, 1.0);
    let student = random_model(32, 6, 6, 5, 1.0);
    let pairs: Vec<Pair> = random_pairs(33, 8, 10, 5)
        .into_iter()
        .map(|(_, z)| (z.clone(), z))
        .collect();
    let self_kl = [
        KlApprox::Greedy,
        KlApprox::Beam { k: 3 },
        KlApprox::Sampling { seed: 4 },
    ]
    .iter()
    .map(|&a| measure_j_word(&teacher, &teacher, &pairs, a).unwrap().mean.abs())
    .fold(0.0, f64::max);

    let (x, z, y) = (vec![4u32, 7, 9], vec![5u32, 6], vec![8u32, 4, 4]);
    let p = teacher_distributions(&teacher, &z, &y).unwrap();
    let entropy: f64 = -p.data().iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
    let (ce, _) = weighted_example(&student, &ParamMask::all(), &x, &y, p).unwrap();
    let kl = word_kl(&student, &teacher, &x, &z, &y).unwrap();
    let ce_gap = (ce - entropy - kl).abs();

    let hyps = beam_search(&teacher, &z, 5, default_max_len(z.len())).unwrap();
    let lps: Vec<f64> = hyps.iter().map(|h| h.log_prob).collect();
    let weights = kbest_renormalize(&lps, 5e-3).unwrap();
    let sum_gap = (weights.iter().sum::<f64>() - 1.0).abs();
    (self_kl, ce_gap, sum_gap)
}
