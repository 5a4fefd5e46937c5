use std::collections::{BTreeMap, HashMap};

use autoretrieve::corpus::{PassageRecord, QuestionRecord};
use autoretrieve::encoder::{self, Mode};
use autoretrieve::eval::{self, HitJudge, Judgement, QrelSet, QuestionRanking, RankedPassage, RetrievalRun};
use autoretrieve::trainer::{
    self,
    entropy, kl_loss_and_grad, question_loss_and_grad, student_distribution, teacher_distribution, DropoutPlan,
    TrainConfig,
};
use autoretrieve::{
    EncoderDims, EncoderParams, Passage, Question, RelevanceScorer, Side, ToyTeacher, Trainer, TrainerState, Vocabulary,
};
use proptest::prelude::*;

const V: usize = 30;

fn vocab() -> Vocabulary {
    let v = Vocabulary::from_tokens((0..V).map(|i| format!("t{i}")));
    assert!(v.len() >= V);
    v
}

fn dims(vocab_size: usize) -> EncoderDims {
    EncoderDims {
        vocab_size,
        d_emb: 6,
        d_hidden: 5,
        d_out: 4,
    }
}

fn text(ids: &[usize]) -> String {
    ids.iter().map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ")
}

fn passage(i: usize, ids: &[usize], v: &Vocabulary) -> Passage {
    Passage::new(
        PassageRecord {
            id: format!("p{i}"),
            title: String::new(),
            text: text(ids),
        },
        v,
    )
}

fn question(i: usize, ids: &[usize], v: &Vocabulary) -> Question {
    Question::new(
        QuestionRecord {
            id: format!("q{i}"),
            question: text(ids),
            answers: None,
        },
        v,
    )
}

fn token_lists(max_lists: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0..V, 1..8), 2..=max_lists)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_mode_encoding_is_bitwise_deterministic(seed in any::<u64>(), ids in prop::collection::vec(0..V, 1..10)) {
        let v = vocab();
        let params = EncoderParams::init(dims(v.len()), seed);
        let q = question(0, &ids, &v);
        for side in [Side::Question, Side::Passage] {
            let a = encoder::encode(&q.tokens, side, &params, Mode::Eval).unwrap();
            let b = encoder::encode(&q.tokens, side, &params.clone(), Mode::Eval).unwrap();
            let bits = |e: &encoder::Embedding| e.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn towers_do_not_affect_each_other(seed in any::<u64>(), ids in prop::collection::vec(0..V, 1..10), delta in -1.0..1.0f64) {
        let v = vocab();
        let params = EncoderParams::init(dims(v.len()), seed);
        let q = question(0, &ids, &v);
        for (changed, kept) in [(Side::Question, Side::Passage), (Side::Passage, Side::Question)] {
            let mut other = params.clone();
            for t in other.towers.side_mut(changed).tensors_mut() {
                t.iter_mut().for_each(|x| *x += delta);
            }
            let before = encoder::encode(&q.tokens, kept, &params, Mode::Eval).unwrap();
            let after = encoder::encode(&q.tokens, kept, &other, Mode::Eval).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn toy_score_is_pure_and_length_normalized(
        q in prop::collection::vec(0..V as u32, 1..8),
        p in prop::collection::vec(0..V as u32, 1..20),
        alpha in 0.01..5.0f64,
    ) {
        let teacher = ToyTeacher::new(alpha, V);
        let a = teacher.relevance_score(&q, &p).unwrap();
        prop_assert_eq!(a.to_bits(), ToyTeacher::new(alpha, V).relevance_score(&q, &p).unwrap().to_bits());
        prop_assert!(a < 0.0);
        let doubled: Vec<u32> = q.iter().chain(&q).copied().collect();
        let b = teacher.relevance_score(&doubled, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let summed: f64 = q
            .iter()
            .map(|&t| {
                let count = p.iter().filter(|&&x| x == t).count() as f64;
                ((count + alpha) / (p.len() as f64 + alpha * V as f64)).ln()
            })
            .sum();
        prop_assert!((a - summed / q.len() as f64).abs() <= 1e-12);
    }

    #[test]
    fn kl_gradient_is_student_minus_teacher_over_tau(
        scores in prop::collection::vec(-4.0..4.0f64, 2..9),
        raw_teacher in prop::collection::vec(-6.0..-0.1f64, 9),
        tau in 0.2..3.0f64,
    ) {
        let k = scores.len();
        let teacher = teacher_distribution(&raw_teacher[..k]).unwrap();
        let loss_at = |s: &[f64]| kl_loss_and_grad(&teacher, &student_distribution(s, tau).unwrap(), tau).unwrap().0;
        let student = student_distribution(&scores, tau).unwrap();
        let (loss, grad) = kl_loss_and_grad(&teacher, &student, tau).unwrap();
        prop_assert!(loss >= -1e-15);
        let h = 1e-5;
        for i in 0..k {
            prop_assert!((grad[i] - (student[i] - teacher[i]) / tau).abs() < 1e-15);
            let mut up = scores.clone();
            let mut down = scores.clone();
            up[i] += h;
            down[i] -= h;
            let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            prop_assert!((numeric - grad[i]).abs() <= 1e-6 * grad[i].abs().max(1e-3), "{} vs {}", numeric, grad[i]);
        }
    }

    #[test]
    fn teacher_shift_leaves_loss_and_gradients_unchanged(
        seed in any::<u64>(),
        lists in token_lists(6),
        raw in prop::collection::vec(-8.0..-0.5f64, 6),
        shift in -50.0..50.0f64,
        tau in 0.3..3.0f64,
    ) {
        let v = vocab();
        let params = EncoderParams::init_scaled(dims(v.len()), seed, 0.5);
        let q = question(0, &lists[0], &v);
        let ps: Vec<Passage> = lists.iter().enumerate().map(|(i, l)| passage(i, l, &v)).collect();
        let cands: Vec<&Passage> = ps.iter().collect();
        let lp = &raw[..cands.len()];
        let shifted: Vec<f64> = lp.iter().map(|x| x + shift).collect();
        let plan = DropoutPlan { seed, rate: 0.1 };
        let mut g1 = params.gradient_buffer();
        let mut g2 = params.gradient_buffer();
        let (l1, ..) = question_loss_and_grad(&params, &q, &cands, lp, tau, plan, 1.0, &mut g1).unwrap();
        let (l2, ..) = question_loss_and_grad(&params, &q, &cands, &shifted, tau, plan, 1.0, &mut g2).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12);
        for (a, b) in g1.tensors().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn entropy_is_higher_at_high_temperature(scores in prop::collection::vec(-5.0..5.0f64, 2..12)) {
        let spread = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - scores.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let h1 = entropy(&student_distribution(&scores, 1.0).unwrap());
        let h10 = entropy(&student_distribution(&scores, 10.0).unwrap());
        prop_assert!(h10 > h1);
        prop_assert!(h10 <= (scores.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn topk_accuracy_matches_a_scan_and_grows_with_k(
        rankings in prop::collection::vec(Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(), 1..10),
        relevant in prop::collection::vec(prop::collection::btree_set(0..12usize, 1..4), 10),
    ) {
        let v = vocab();
        let passages: Vec<Passage> = (0..12).map(|i| passage(i, &[i], &v)).collect();
        let mut run = RetrievalRun::default();
        let mut judgements = HashMap::new();
        for (qi, r) in rankings.iter().enumerate() {
            let ranking: Vec<RankedPassage> = r
                .iter()
                .enumerate()
                .map(|(rank, p)| RankedPassage { pid: format!("p{p}"), score: -(rank as f64) })
                .collect();
            run.questions.push(QuestionRanking::new(format!("q{qi}"), ranking));
            let grades: BTreeMap<String, u32> = relevant[qi].iter().map(|p| (format!("p{p}"), 1)).collect();
            judgements.insert(format!("q{qi}"), Judgement::Graded(grades));
        }
        let qrels = QrelSet { judgements };
        let judge = HitJudge::new(&qrels, &passages);
        let ks: Vec<usize> = (1..=12).collect();
        let acc = eval::topk_accuracy(&run, &judge, &ks).unwrap();
        let mut previous = 0.0;
        for &k in &ks {
            let hits = run
                .questions
                .iter()
                .enumerate()
                .filter(|(qi, q)| {
                    q.ranking
                        .iter()
                        .take(k)
                        .any(|r| relevant[*qi].contains(&r.pid[1..].parse::<usize>().unwrap()))
                })
                .count();
            let want = hits as f64 / run.questions.len() as f64;
            prop_assert!((acc[&k] - want).abs() < 1e-15);
            prop_assert!(acc[&k] >= previous);
            previous = acc[&k];
        }
    }

    #[test]
    fn ndcg_is_a_fraction_and_one_only_when_ideal(
        grades in prop::collection::vec(0..4u32, 1..15),
        perm in Just((0..15usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        prop_assume!(grades.iter().any(|&g| g > 0));
        let ids: Vec<usize> = perm.into_iter().filter(|&i| i < grades.len()).collect();
        let ranking = ids
            .iter()
            .enumerate()
            .map(|(rank, &i)| RankedPassage { pid: format!("p{i:02}"), score: -(rank as f64) })
            .collect();
        let run = RetrievalRun { questions: vec![QuestionRanking::new("q".into(), ranking)], ..Default::default() };
        let graded: BTreeMap<String, u32> = grades.iter().enumerate().map(|(i, &g)| (format!("p{i:02}"), g)).collect();
        let qrels = QrelSet { judgements: HashMap::from([("q".to_string(), Judgement::Graded(graded))]) };
        let value = eval::ndcg_at_10(&run, &qrels).unwrap().value;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&value));
        let top: Vec<u32> = ids.iter().take(10).map(|&i| grades[i]).collect();
        let mut ideal = grades.clone();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let is_ideal = top == ideal[..top.len()];
        prop_assert_eq!(is_ideal, (value - 1.0).abs() < 1e-12, "top {:?} ideal {:?} value {}", top, ideal, value);
    }
}

/// Small corpus where every passage is a candidate, so the candidate set is
/// fixed while the encoder trains.
fn fixed_batch_trainer<'a>(passages: &'a [Passage], teacher: &'a ToyTeacher, vocab_size: usize, seed: u64) -> Trainer<'a> {
    let cfg = TrainConfig {
        k: passages.len(),
        lr: 5e-3,
        total_steps: 100,
        refresh_every: 1,
        checkpoint_every: 100,
        dropout: 0.0,
        num_shards: 2,
        ..Default::default()
    };
    let params = EncoderParams::init_scaled(dims(vocab_size), seed, 0.3);
    Trainer::new(passages, TrainerState::new(params, cfg, seed).unwrap(), teacher, HashMap::new(), None).unwrap()
}

#[test]
fn lower_kl_means_higher_expected_reconstruction() {
    let v = vocab();
    for seed in 0..4u64 {
        let passages: Vec<Passage> = (0..10)
            .map(|i| passage(i, &[(i * 3) % V, (i * 3 + 1) % V, (i * 7 + seed as usize) % V, i % V], &v))
            .collect();
        let questions: Vec<Question> = (0..6)
            .map(|i| question(i, &[(i * 3) % V, (i * 7 + 2) % V], &v))
            .collect();
        let batch: Vec<&Question> = questions.iter().collect();
        let teacher = ToyTeacher::new(0.5, v.len());
        let mut tr = fixed_batch_trainer(&passages, &teacher, v.len(), seed);
        let before = teacher;
        // (KL, expected log-likelihood under the student, same under the teacher)
        let mut trace = Vec::new();
        for _ in 0..=100 {
            let (sets, _) = tr.forward_backward(&batch, &tr.index.snapshot()).unwrap();
            let n = sets.len() as f64;
            let kl = sets.iter().map(|s| s.loss).sum::<f64>() / n;
            let under = |w: &dyn Fn(&trainer::CandidateSet) -> &[f64]| {
                sets.iter()
                    .map(|s| w(s).iter().zip(&s.teacher_log_probs).map(|(p, l)| p * l).sum::<f64>())
                    .sum::<f64>()
                    / n
            };
            trace.push((kl, under(&|s| &s.student), under(&|s| &s.teacher)));
            if tr.state.step < 100 {
                tr.train_step(&batch).unwrap();
            }
        }
        // Single steps can trade a little of one for the other; the claim is
        // about the trajectory.
        let (kl0, e0, t0) = trace[0];
        let (kl1, e1, t1) = trace[100];
        assert!((t0 - t1).abs() < 1e-12, "teacher side moved: {t0} vs {t1}");
        assert!(kl1 < 0.5 * kl0, "seed {seed}: KL {kl0} -> {kl1}");
        assert!(e1 > e0, "seed {seed}: expected log-likelihood {e0} -> {e1}");
        assert!((t1 - e1).abs() < (t0 - e0).abs(), "seed {seed}: gap to teacher grew");
        assert_eq!(teacher.alpha, before.alpha);
        assert_eq!(teacher.vocab_size, before.vocab_size);
        let same = before.score_candidates(&questions[0], &passages.iter().collect::<Vec<_>>()).unwrap();
        let again = teacher.score_candidates(&questions[0], &passages.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(same, again);
    }
}
