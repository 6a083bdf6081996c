use pivot_distill::corpus::{encode_parallel, generate_trilingual, GeneratorConfig, Grammar, Lang, VocabPolicy};
use pivot_distill::evaluation::{corpus_bleu, validation_loss, MAX_ORDER};
use pivot_distill::model::{ModelDims, ModelParams};
use pivot_distill::objectives::{mle_loss, train, Corpora, ParamMask, Schedule, TeachingMethod, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        train_xz: 40,
        train_zy: 40,
        dev: 10,
        test: 30,
        ..GeneratorConfig::default()
    }
}

#[test]
fn oracle_translator_scores_one() {
    for seed in [1, 9, 1234] {
        let cfg = small_config(seed);
        let split = generate_trilingual(&cfg).unwrap();
        let grammar = Grammar::new(&cfg).unwrap();
        let (sources, refs): (Vec<String>, Vec<String>) = split.test_xy.iter().cloned().unzip();
        let hyps: Vec<String> = sources
            .iter()
            .map(|x| grammar.translate(Lang::X, Lang::Y, x).unwrap())
            .collect();
        assert_eq!(corpus_bleu(&hyps, &refs, MAX_ORDER, false).unwrap().bleu, 1.0);
        let pivots: Vec<String> = sources
            .iter()
            .map(|x| grammar.translate(Lang::X, Lang::Z, x).unwrap())
            .collect();
        assert_eq!(pivots, split.test_z);
    }
}

#[test]
fn validation_loss_is_the_mean_batch_nll() {
    let split = generate_trilingual(&small_config(3)).unwrap();
    let (z, y): (Vec<String>, Vec<String>) = split.train_zy.iter().cloned().unzip();
    let c = encode_parallel(&z, &y, VocabPolicy::Build { max_size: 100 }).unwrap();
    let dims = ModelDims::new(c.left_vocab.len(), c.right_vocab.len(), 6, 5).unwrap();
    let params = ModelParams::random(dims, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let batch = &c.pairs[..12];
    let v = validation_loss(&params, batch).unwrap();
    let m = mle_loss(&params, batch, &ParamMask::all()).unwrap().loss;
    assert!((v - m).abs() < 1e-9, "{v} vs {m}");
}

#[test]
fn teacher_cache_does_not_change_deterministic_training() {
    let split = generate_trilingual(&small_config(5)).unwrap();
    let (x, z): (Vec<String>, Vec<String>) = split.train_xz.iter().cloned().unzip();
    let (dx, dy): (Vec<String>, Vec<String>) = split.dev_xy.iter().cloned().unzip();
    let xz = encode_parallel(&x, &z, VocabPolicy::Build { max_size: 100 }).unwrap();
    let (_, y): (Vec<String>, Vec<String>) = split.train_zy.iter().cloned().unzip();
    let y_vocab = encode_parallel(&y, &y, VocabPolicy::Build { max_size: 100 })
        .unwrap()
        .left_vocab;
    let dev = encode_parallel(
        &dx,
        &dy,
        VocabPolicy::Given {
            left: xz.left_vocab.clone(),
            right: y_vocab.clone(),
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let teacher = ModelParams::random_scaled(
        ModelDims::new(xz.right_vocab.len(), y_vocab.len(), 6, 5).unwrap(),
        1.5,
        &mut rng,
    )
    .unwrap();
    let student = ModelParams::random(
        ModelDims::new(xz.left_vocab.len(), y_vocab.len(), 6, 5).unwrap(),
        &mut rng,
    )
    .unwrap();
    let corpora = Corpora {
        train: &xz.pairs,
        dev: &dev.pairs,
        target_vocab: Some(&y_vocab),
        ..Corpora::default()
    };
    for method in ["sent-beam", "word-greedy"] {
        let method: TeachingMethod = method.parse().unwrap();
        let run = |cache_teacher: bool| {
            let schedule = Schedule {
                epochs: 2,
                batch_size: 8,
                eval_interval: 5,
                cache_teacher,
                measure_kl: false,
                ..Schedule::default()
            };
            let state = TrainState::new(student.clone(), schedule.optimizer).unwrap();
            train(
                state,
                Some(&teacher),
                &corpora,
                method,
                &ParamMask::all(),
                &schedule,
                &mut (),
            )
            .unwrap()
        };
        let (cached, fresh) = (run(true), run(false));
        assert_eq!(cached.state.params, fresh.state.params, "{}", method.name());
        assert_eq!(cached.evals, fresh.evals);
    }
}
